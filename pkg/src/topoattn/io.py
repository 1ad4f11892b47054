"""On-disk formats: activation dumps, checkpoints, reports and run manifests.

Activation dump
    ``<stem>.json`` sidecar ``{n, d, sublayer, layer, model_digest, seed}``
    plus ``<stem>.bin`` holding ``n*d`` little-endian float32 values, row-major.

Checkpoint
    ``b"TOPOCKPT"`` magic, little-endian uint64 header length, UTF-8 JSON
    header (config, vocab, section table of ``{name, shape, offset, nbytes}``
    relative to the blob start), then the float32 blob.

All writes go to a temporary file in the target directory and are renamed
into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .attention import EncoderConfig, TopoEncoder
from .errors import DataError, NonSquareDimension
from .grid import make_grid
from .trainer import TrainConfig, Vocab

CKPT_MAGIC = b"TOPOCKPT"
_F32 = np.dtype("<f4")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: str | Path, obj) -> None:
    atomic_write(path, canonical_json(obj).encode("utf-8"))


# ---------------------------------------------------------------------------
# activation dumps
# ---------------------------------------------------------------------------

@dataclass
class ActivationDump:
    matrix: np.ndarray
    sublayer: str
    layer: int = 0
    model_digest: str = ""
    seed: int = 0

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]


def _dump_paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def write_dump(stem: str | Path, dump: ActivationDump) -> tuple[Path, Path]:
    meta_path, blob_path = _dump_paths(stem)
    blob = np.ascontiguousarray(dump.matrix, dtype=_F32).tobytes()
    meta = {"n": dump.n, "d": dump.d, "sublayer": dump.sublayer, "layer": dump.layer,
            "model_digest": dump.model_digest, "seed": dump.seed}
    atomic_write(blob_path, blob)
    write_json(meta_path, meta)
    return meta_path, blob_path


def read_dump(stem: str | Path) -> ActivationDump:
    meta_path, blob_path = _dump_paths(stem)
    if not meta_path.is_file() or not blob_path.is_file():
        raise DataError(f"activation dump not found: {meta_path} / {blob_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    n, d = int(meta["n"]), int(meta["d"])
    try:
        make_grid(d)
    except NonSquareDimension as exc:
        raise DataError(f"{meta_path}: {exc}") from exc
    blob = blob_path.read_bytes()
    if len(blob) != 4 * n * d:
        raise DataError(f"{blob_path}: expected {4 * n * d} bytes, found {len(blob)}")
    mat = np.frombuffer(blob, dtype=_F32).reshape(n, d).astype(np.float64)
    return ActivationDump(mat, meta["sublayer"], int(meta.get("layer", 0)),
                          meta.get("model_digest", ""), int(meta.get("seed", 0)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(model: TopoEncoder, vocab: Vocab, config: TrainConfig | None = None) -> bytes:
    sections = []
    chunks = []
    offset = 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype=_F32).tobytes()
        sections.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": 1,
        "encoder": model.config.to_dict(),
        "train_config": config.to_dict() if config is not None else None,
        "vocab": {"tokens": vocab.tokens, "max_len": vocab.max_len},
        "sections": sections,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(path: str | Path, model: TopoEncoder, vocab: Vocab, config: TrainConfig | None = None) -> str:
    data = checkpoint_bytes(model, vocab, config)
    atomic_write(path, data)
    return sha256_bytes(data)


def load_checkpoint(path: str | Path) -> tuple[TopoEncoder, Vocab, dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != CKPT_MAGIC or len(data) < 16:
        raise DataError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    blob = memoryview(data)[16 + hlen:]
    model = TopoEncoder(EncoderConfig(**header["encoder"]), seed=0)
    params = dict(model.named_parameters())
    for sec in header["sections"]:
        p = params.get(sec["name"])
        if p is None or list(p.shape) != sec["shape"]:
            raise DataError(f"{path}: section {sec['name']} does not match the encoder layout")
        arr = np.frombuffer(blob[sec["offset"]:sec["offset"] + sec["nbytes"]], dtype=_F32)
        p.data = arr.reshape(sec["shape"]).astype(np.float64)
    vocab = Vocab(header["vocab"]["tokens"], header["vocab"]["max_len"])
    return model, vocab, header


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def write_manifest(path: str | Path, command: str, config: dict, inputs: dict[str, str | Path],
                   outputs: list[str | Path], seed: int | None, started: float) -> None:
    """Record what produced a set of outputs, referencing every file by content digest."""
    manifest = {
        "command": command,
        "config_digest": sha256_bytes(canonical_json(config).encode("utf-8")),
        "config": config,
        "inputs": {k: file_digest(v) for k, v in sorted(inputs.items())},
        "outputs": {str(Path(o).name): file_digest(o) for o in outputs},
        "tool_version": __version__,
        "seed": seed,
        "wall_time_s": round(time.time() - started, 3),
    }
    write_json(path, manifest)
