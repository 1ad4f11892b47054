"""Single-head self-attention with spatial querying / spatial reweighting, and the encoder built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, EmptySequence, SequenceTooLong, ShapeMismatch, TokenOutOfVocab
from .grid import make_grid, local_mask, pooling_matrix

MODES = ("standard", "SQ", "SQR")
SUBLAYERS = ("queries", "keys", "values", "fc_out")
PAD_ID = 0

# additive bias for padded keys; large but finite so the engine's finiteness checks pass
_MASK_BIAS = -1e9


@dataclass
class TopoAttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    pool: np.ndarray | None  # None means identity (standard attention)
    o_mask: np.ndarray
    mode: str = "standard"
    reapply_abs: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown attention mode {self.mode!r}")
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise ShapeMismatch(f"{name} must be {d}x{d}")
        if self.pool is not None and self.pool.shape != (d, d):
            raise ShapeMismatch("pooling matrix shape")
        if self.o_mask.shape != (d, d):
            raise ShapeMismatch("output mask shape")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v, self.w_o]

    def effective_output_weight(self) -> Tensor:
        w = ad.absolute(self.w_o) if self.reapply_abs else self.w_o
        return ad.masked_weight(w, self.o_mask)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_reweighting(w_o: np.ndarray, o_mask: np.ndarray, scale: float = 10.0) -> np.ndarray:
    """Positive, scaled, masked start point for the locally connected output weights."""
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    return np.abs(w_o * scale) * o_mask


def make_attention(d: int, mode: str, rng: np.random.Generator, r_sq: float = 1.0,
                   r_sr: float = 1.0, scale: float = 10.0, reapply_abs: bool = False) -> TopoAttentionParams:
    grid = make_grid(d)
    w = [_uniform(rng, (d, d), d) for _ in range(4)]
    ones = np.ones((d, d))
    if mode == "standard":
        pool, o_mask, w_o = None, ones, w[3]
    elif mode == "SQ":
        pool, o_mask, w_o = pooling_matrix(grid, r_sq), ones, w[3]
    elif mode == "SQR":
        pool, o_mask = pooling_matrix(grid, r_sq), local_mask(grid, r_sr)
        w_o = init_reweighting(w[3], o_mask, scale)
    else:
        raise ConfigError(f"unknown attention mode {mode!r}")
    return TopoAttentionParams(
        Tensor(w[0], True), Tensor(w[1], True), Tensor(w[2], True), Tensor(w_o, True),
        pool, o_mask, mode, reapply_abs,
    )


def attention_scores_sq(q: Tensor, k: Tensor, pool: np.ndarray | None, key_bias: np.ndarray | None = None) -> Tensor:
    """Row-softmax of ``q @ pool @ k^T / sqrt(d)``; ``pool=None`` is plain dot-product attention."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"queries {q.shape} vs keys {k.shape}")
    d = q.shape[-1]
    pooled = q if pool is None else ad.matmul(q, Tensor(pool))
    logits = ad.scale(ad.matmul(pooled, ad.transpose(k)), 1.0 / math.sqrt(d))
    if key_bias is not None:
        logits = ad.add(logits, Tensor(key_bias))
    return ad.softmax(logits)


def attention_forward(x: Tensor, params: TopoAttentionParams, key_bias: np.ndarray | None = None,
                      capture: dict | None = None) -> Tensor:
    if x.shape[-1] != params.d:
        raise ShapeMismatch(f"input width {x.shape[-1]} vs model width {params.d}")
    q = ad.matmul(x, params.w_q)
    k = ad.matmul(x, params.w_k)
    v = ad.matmul(x, params.w_v)
    attn = attention_scores_sq(q, k, params.pool, key_bias)
    out = ad.matmul(ad.matmul(attn, v), params.effective_output_weight())
    if capture is not None:
        capture.update(queries=q.data, keys=k.data, values=v.data, fc_out=out.data)
    return out


def _dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return ad.mul(x, Tensor(keep))


@dataclass
class EncoderBlock:
    attn: TopoAttentionParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @classmethod
    def create(cls, d: int, mode: str, rng: np.random.Generator, **attn_kwargs) -> "EncoderBlock":
        attn = make_attention(d, mode, rng, **attn_kwargs)
        hidden = 4 * d
        return cls(
            attn,
            Tensor(_uniform(rng, (d, hidden), d), True), Tensor(_uniform(rng, (hidden,), d), True),
            Tensor(_uniform(rng, (hidden, d), hidden), True), Tensor(_uniform(rng, (d,), hidden), True),
            Tensor(np.ones(d), True), Tensor(np.zeros(d), True),
            Tensor(np.ones(d), True), Tensor(np.zeros(d), True),
        )

    def parameters(self) -> list[Tensor]:
        return self.attn.parameters() + [self.w1, self.b1, self.w2, self.b2,
                                         self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b]

    def forward(self, x: Tensor, key_bias=None, capture: dict | None = None,
                dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
        h = _dropout(attention_forward(x, self.attn, key_bias, capture), dropout, rng)
        x = ad.add(ad.mul(ad.layer_norm(ad.add(x, h)), self.ln1_g), self.ln1_b)
        f = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(x, self.w1), self.b1)), self.w2), self.b2)
        f = _dropout(f, dropout, rng)
        return ad.add(ad.mul(ad.layer_norm(ad.add(x, f)), self.ln2_g), self.ln2_b)


@dataclass
class EncoderConfig:
    vocab_size: int
    d: int = 64
    max_len: int = 256
    n_layers: int = 1
    mode: str = "standard"
    r_sq: float = 0.3
    r_sr: float = 0.3
    scale: float = 10.0
    positional: bool = True
    reapply_abs: bool = False
    dropout: float = 0.0
    n_classes: int = 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Captures:
    """Per-sentence, token-averaged sublayer activations, keyed by (layer, sublayer)."""
    data: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)

    def get(self, sublayer: str, layer: int = 0) -> np.ndarray:
        return self.data[(layer, sublayer)]


class TopoEncoder:
    """Token + position embeddings, ``n_layers`` encoder blocks, mean pooling and a linear head."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        if config.mode not in MODES:
            raise ConfigError(f"unknown attention mode {config.mode!r}")
        make_grid(config.d)
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.d
        self.tok_emb = Tensor(rng.normal(0.0, 1.0, (config.vocab_size, d)), True)
        self.pos_emb = Tensor(rng.normal(0.0, 1.0, (config.max_len, d)), True) if config.positional else None
        self.blocks = [
            EncoderBlock.create(d, config.mode, rng, r_sq=config.r_sq, r_sr=config.r_sr,
                                scale=config.scale, reapply_abs=config.reapply_abs)
            for _ in range(config.n_layers)
        ]
        self.head_w = Tensor(_uniform(rng, (d, config.n_classes), d), True)
        self.head_b = Tensor(_uniform(rng, (config.n_classes,), d), True)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("tok_emb", self.tok_emb)]
        if self.pos_emb is not None:
            out.append(("pos_emb", self.pos_emb))
        names = ("w_q", "w_k", "w_v", "w_o", "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")
        for i, block in enumerate(self.blocks):
            out.extend((f"blocks.{i}.{n}", p) for n, p in zip(names, block.parameters()))
        out += [("head_w", self.head_w), ("head_b", self.head_b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def _validate(self, ids: np.ndarray) -> np.ndarray:
        if ids.ndim != 2:
            raise ShapeMismatch(f"token ids must be (batch, length), got {ids.shape}")
        if ids.shape[1] > self.config.max_len:
            raise SequenceTooLong(f"length {ids.shape[1]} exceeds max_len {self.config.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise TokenOutOfVocab("token id outside vocabulary")
        keep = (ids != PAD_ID).astype(np.float64)
        if (keep.sum(axis=1) == 0).any():
            raise EmptySequence("sequence contains only padding")
        return keep

    def encode(self, token_ids, captures: Captures | None = None,
               rng: np.random.Generator | None = None) -> Tensor:
        """Mean-pooled final hidden state, shape (batch, d).

        Dropout (``config.dropout``) is only active when a training ``rng`` is passed.
        """
        ids = np.asarray(token_ids, dtype=np.int64)
        keep = self._validate(ids)
        n = ids.shape[1]
        x = ad.embedding(self.tok_emb, ids)
        if self.pos_emb is not None:
            x = ad.add(x, ad.embedding(self.pos_emb, np.arange(n)))
        key_bias = ((1.0 - keep) * _MASK_BIAS)[:, None, :]
        counts = keep.sum(axis=1, keepdims=True)
        weights = keep[:, :, None] / counts[:, :, None]
        for i, block in enumerate(self.blocks):
            cap = {} if captures is not None else None
            x = block.forward(x, key_bias, cap, self.config.dropout, rng)
            if cap is not None:
                for name, arr in cap.items():
                    captures.data[(i, name)] = (arr * weights).sum(axis=1)
        return ad.sum_(ad.mul(x, Tensor(weights)), axis=1)

    def logits(self, token_ids, captures: Captures | None = None,
               rng: np.random.Generator | None = None) -> Tensor:
        pooled = self.encode(token_ids, captures, rng)
        return ad.add(ad.matmul(pooled, self.head_w), self.head_b)


def encoder_forward(token_ids, model: TopoEncoder) -> tuple[np.ndarray, Captures]:
    caps = Captures()
    pooled = model.encode(token_ids, caps)
    return pooled.data, caps
