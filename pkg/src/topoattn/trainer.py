"""Tokenisation, corpora and the supervised training loop."""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from . import autodiff as ad
from .attention import MODES, PAD_ID, Captures, EncoderConfig, TopoEncoder
from .errors import ConfigError, DataError, DivergedLoss, EmptyCorpus, NonFiniteInput, TopoError
from .grid import make_grid

log = logging.getLogger(__name__)

UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_TAG_RE = re.compile(r"<[^>]+>")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(_TAG_RE.sub(" ", text).lower())


@dataclass
class LabeledCorpus:
    examples: list[tuple[int, str]]
    split: str = "train"

    def __post_init__(self):
        if not self.examples:
            raise EmptyCorpus(f"{self.split} corpus is empty")
        for label, _ in self.examples:
            if label not in (0, 1):
                raise DataError(f"labels must be 0 or 1, got {label!r}")

    def __len__(self):
        return len(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([lab for lab, _ in self.examples], dtype=np.int64)

    @property
    def texts(self) -> list[str]:
        return [t for _, t in self.examples]


def read_corpus(path: str | Path, split: str = "train") -> LabeledCorpus:
    """Read a ``label<TAB>text`` TSV file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"corpus file not found: {path}")
    examples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            label, sep, text = line.partition("\t")
            if not sep or label not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: expected '0|1<TAB>text'")
            examples.append((int(label), text))
    if not examples:
        raise EmptyCorpus(f"corpus file is empty: {path}")
    return LabeledCorpus(examples, split)


def write_corpus(corpus: LabeledCorpus, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for label, text in corpus.examples:
            fh.write(f"{label}\t{text}\n")


@dataclass
class Vocab:
    tokens: list[str]
    max_len: int = 256

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        ids = [self.index.get(t, UNK_ID) for t in tokenize(text)][: self.max_len]
        return ids

    def unk_fraction(self, texts) -> float:
        total = unk = 0
        for text in texts:
            ids = self.encode(text)
            total += len(ids)
            unk += sum(1 for i in ids if i == UNK_ID)
        return unk / total if total else 1.0


def build_vocab(corpus: LabeledCorpus, min_freq: int = 1, max_len: int = 256,
                max_size: int | None = None) -> Vocab:
    counts = Counter(tok for _, text in corpus.examples for tok in tokenize(text))
    if not counts:
        raise EmptyCorpus("corpus contains no tokens")
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[: max(0, max_size - 2)]
    return Vocab([PAD_TOKEN, UNK_TOKEN] + kept, max_len)


def pad_batch(seqs: list[list[int]]) -> np.ndarray:
    """Right-pad with PAD; empty sequences get a single UNK so pooling stays defined."""
    seqs = [s if s else [UNK_ID] for s in seqs]
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

def synthetic_corpus(n: int, seed: int = 0, kind: str = "separable", min_len: int = 6,
                     max_len: int = 14, n_class_words: int = 40, n_filler: int = 60,
                     n_partners: int = 1) -> LabeledCorpus:
    """Balanced two-class toy corpora.

    ``separable``: every word of a sentence comes from its class's own
    vocabulary; the two vocabularies are disjoint.

    ``filler``: a few class words planted among words shared by both classes.

    ``negation``: both classes draw from a shared pool of polar words; a
    negator flips the polarity of the word it directly precedes. Stray
    negators also appear before fillers, so the label depends on word order,
    not just on which words occur.

    ``matching``: one ``a<i>`` and ``n_partners`` distinct ``b<j>`` words among
    fillers; the label is whether some ``j`` equals ``i``, which needs
    query-key matching across tokens.
    """
    rng = np.random.default_rng(seed)
    filler = [f"f{i}" for i in range(n_filler)]
    pos = [f"p{i}" for i in range(n_class_words)]
    neg = [f"n{i}" for i in range(n_class_words)]
    examples = []
    for i in range(n):
        label = int(i % 2)
        length = int(rng.integers(min_len, max_len + 1))
        pool = pos if label == 1 else neg
        if kind == "separable":
            words = [str(w) for w in rng.choice(pool, size=length)]
        elif kind == "filler":
            words = [str(w) for w in rng.choice(filler, size=length)]
            for slot in rng.choice(length, size=int(rng.integers(1, 4)), replace=False):
                words[slot] = str(rng.choice(pool))
        elif kind == "negation":
            words = [str(w) for w in rng.choice(filler, size=length)]
            negated = bool(rng.integers(0, 2))
            polar_is_pos = bool(label) != negated
            slot = int(rng.integers(1, length))
            words[slot] = str(rng.choice(pos if polar_is_pos else neg))
            if negated:
                words[slot - 1] = "not"
            # a stray negator in front of a filler, so only adjacency carries the label
            spare = [k for k in range(length - 1) if k + 1 != slot and k != slot and k + 1 != slot - 1]
            if spare and rng.random() < 0.5:
                words[int(rng.choice(spare))] = "not"
        elif kind == "matching":
            words = [str(w) for w in rng.choice(filler, size=length)]
            i = int(rng.integers(n_class_words))
            others = [int(j) for j in rng.choice(np.delete(np.arange(n_class_words), i), size=n_partners,
                                                 replace=False)]
            partners = ([i] + others[1:]) if label == 1 else others
            slots = rng.choice(length, size=1 + n_partners, replace=False)
            words[slots[0]] = f"a{i}"
            for slot, j in zip(slots[1:], partners):
                words[slot] = f"b{j}"
        else:
            raise ConfigError(f"unknown synthetic corpus kind {kind!r}")
        examples.append((label, " ".join(words)))
    order = rng.permutation(n)
    return LabeledCorpus([examples[j] for j in order])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

DEFAULT_BATCH_SIZE = {"standard": 128, "SQ": 128, "SQR": 256}


@dataclass
class TrainConfig:
    train_path: str = ""
    test_path: str = ""
    mode: str = "SQ"
    d: int = 400
    r_sq: float = 0.3
    r_sr: float = 0.3
    epochs: int = 20
    batch_size: int | None = None  # None picks the per-mode default
    lr: float = 1e-3
    seed: int = 0
    scale: float = 10.0
    positional: bool = True
    reapply_abs: bool = False
    n_layers: int = 1
    max_len: int = 256
    min_freq: int = 1
    max_vocab: int | None = None
    adam_eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    clip_value: float | None = None
    dropout: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        make_grid(self.d)
        if self.batch_size is None:
            self.batch_size = DEFAULT_BATCH_SIZE[self.mode]
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, d=self.d, max_len=self.max_len, n_layers=self.n_layers,
                             mode=self.mode, r_sq=self.r_sq, r_sr=self.r_sr, scale=self.scale,
                             positional=self.positional, reapply_abs=self.reapply_abs,
                             dropout=self.dropout)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    model: TopoEncoder
    vocab: Vocab
    config: TrainConfig
    history: list[EpochMetrics] = field(default_factory=list)
    first_batch_loss: float = math.nan

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].accuracy


def predict(model: TopoEncoder, vocab: Vocab, texts: list[str], batch_size: int = 256) -> np.ndarray:
    preds = []
    for start in range(0, len(texts), batch_size):
        ids = pad_batch([vocab.encode(t) for t in texts[start:start + batch_size]])
        preds.append(model.logits(ids).data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model: TopoEncoder, vocab: Vocab, corpus: LabeledCorpus) -> float:
    return float((predict(model, vocab, corpus.texts) == corpus.labels).mean())


def train(config: TrainConfig, train_corpus: LabeledCorpus | None = None,
          test_corpus: LabeledCorpus | None = None, vocab: Vocab | None = None) -> TrainResult:
    """Train the encoder classifier; corpora are read from the config paths unless given."""
    if train_corpus is None:
        train_corpus = read_corpus(config.train_path, "train")
    if test_corpus is None:
        test_corpus = read_corpus(config.test_path, "test")
    if vocab is None:
        vocab = build_vocab(train_corpus, config.min_freq, config.max_len, config.max_vocab)
    model = TopoEncoder(config.encoder_config(len(vocab)), seed=config.seed)
    params = model.parameters()
    state = ad.AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps,
                         weight_decay=config.weight_decay, clip_value=config.clip_value)
    encoded = [vocab.encode(t) for t in train_corpus.texts]
    labels = train_corpus.labels
    rng = np.random.default_rng(config.seed + 1)
    drop_rng = np.random.default_rng(config.seed + 2) if config.dropout > 0 else None
    result = TrainResult(model, vocab, config)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(encoded))
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            ids = pad_batch([encoded[i] for i in batch])
            for p in params:
                p.zero_grad()
            try:
                loss = ad.cross_entropy(model.logits(ids, rng=drop_rng), labels[batch])
                ad.backward(loss, inputs=params)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergedLoss(f"loss is {value} at epoch {epoch}")
                ad.adam_step(params, [p.grad for p in params], state)
                if not all(np.isfinite(p.data).all() for p in params):
                    raise DivergedLoss(f"parameters became non-finite at epoch {epoch}")
            except NonFiniteInput as exc:
                raise DivergedLoss(f"non-finite values at epoch {epoch}: {exc}") from exc
            if math.isnan(result.first_batch_loss):
                result.first_batch_loss = value
            total += value * len(batch)
            seen += len(batch)
        try:
            acc = accuracy(model, vocab, test_corpus)
        except NonFiniteInput as exc:
            raise DivergedLoss(f"evaluation overflowed at epoch {epoch}: {exc}") from exc
        result.history.append(EpochMetrics(epoch, total / seen, acc))
        log.info("epoch %d loss %.4f acc %.4f", epoch, total / seen, acc)
    return result


# ---------------------------------------------------------------------------
# receptive-field sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepCell:
    r_sq: float
    r_sr: float
    seed: int
    accuracy: float | None
    error: str | None = None


@dataclass
class Regression:
    slope: float
    r2: float
    spearman: float


@dataclass
class SweepResult:
    cells: list[SweepCell]
    fits: dict[str, Regression | None]

    def to_csv(self) -> str:
        lines = ["r_sq,r_sr,seed,accuracy,error"]
        for c in self.cells:
            acc = "" if c.accuracy is None else repr(c.accuracy)
            lines.append(f"{c.r_sq!r},{c.r_sr!r},{c.seed},{acc},{c.error or ''}")
        return "\n".join(lines) + "\n"


def simple_regression(x, y) -> Regression | None:
    """Least-squares fit of ``y`` on ``x``; None when either side has no variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    fit = stats.linregress(x, y)
    rho = stats.spearmanr(x, y).statistic
    return Regression(float(fit.slope), float(fit.rvalue ** 2), float(rho))


def rf_sweep(base: TrainConfig, r_sq_grid, r_sr_grid, train_corpus=None, test_corpus=None) -> SweepResult:
    """Train one model per (r_sq, r_sr) cell; cell ``i`` uses seed ``base.seed + i``."""
    if not len(r_sq_grid) or not len(r_sr_grid):
        raise ConfigError("sweep grids must be nonempty")
    if train_corpus is None:
        train_corpus = read_corpus(base.train_path, "train")
    if test_corpus is None:
        test_corpus = read_corpus(base.test_path, "test")
    vocab = build_vocab(train_corpus, base.min_freq, base.max_len, base.max_vocab)
    cells = []
    index = 0
    for r_sq in r_sq_grid:
        for r_sr in r_sr_grid:
            seed = base.seed + index
            index += 1
            try:
                cfg = TrainConfig.from_dict({**base.to_dict(), "r_sq": float(r_sq), "r_sr": float(r_sr), "seed": seed})
                acc = train(cfg, train_corpus, test_corpus, vocab).final_accuracy
                cells.append(SweepCell(float(r_sq), float(r_sr), seed, acc))
            except TopoError as exc:
                log.warning("sweep cell r_sq=%s r_sr=%s failed: %s", r_sq, r_sr, exc)
                cells.append(SweepCell(float(r_sq), float(r_sr), seed, None, str(exc).replace(",", ";")))
    ok = [c for c in cells if c.accuracy is not None]
    acc = [c.accuracy for c in ok]
    fits = {
        "r_sq": simple_regression([c.r_sq for c in ok], acc),
        "r_sr": simple_regression([c.r_sr for c in ok], acc),
    }
    return SweepResult(cells, fits)


def capture_activations(model: TopoEncoder, vocab: Vocab, texts: list[str],
                        batch_size: int = 256) -> Captures:
    """Token-averaged sublayer activations for every text, stacked in corpus order."""
    if not texts:
        raise EmptyCorpus("nothing to capture")
    parts: list[Captures] = []
    for start in range(0, len(texts), batch_size):
        caps = Captures()
        model.encode(pad_batch([vocab.encode(t) for t in texts[start:start + batch_size]]), caps)
        parts.append(caps)
    return Captures({key: np.concatenate([p.data[key] for p in parts]) for key in parts[0].data})
