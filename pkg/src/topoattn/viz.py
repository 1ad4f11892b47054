"""Deterministic grid heatmaps as binary PGM or SVG.

Values are clamped to a range, mapped linearly to 0..255 (round half up),
and that level picks the gray value (PGM) or an interpolated colour (SVG).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteValue

# anchor colours, evenly spaced over 0..255
_DIVERGING = [(0x21, 0x66, 0xAC), (0x67, 0xA9, 0xCF), (0xF7, 0xF7, 0xF7), (0xEF, 0x8A, 0x62), (0xB2, 0x18, 0x2B)]
_SEQUENTIAL = [(0x44, 0x01, 0x54), (0x3B, 0x52, 0x8B), (0x21, 0x90, 0x8C), (0x5D, 0xC8, 0x63), (0xFD, 0xE7, 0x25)]


@dataclass(frozen=True)
class Preset:
    colormap: str  # "diverging" | "sequential"
    vmin: float | None = None
    vmax: float | None = None

    @classmethod
    def selectivity(cls, limit: float = 2.0) -> "Preset":
        """Symmetric diverging range, e.g. +-2 for minimal-pair contrasts, +-10 for natural ones."""
        if limit <= 0:
            raise ConfigError("range must be positive")
        return cls("diverging", -limit, limit)

    @classmethod
    def weights(cls) -> "Preset":
        return cls("sequential")


def quantize(grid: np.ndarray, preset: Preset) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ConfigError(f"heatmap grid must be 2-D, got {g.shape}")
    if not np.isfinite(g).all():
        raise NonFiniteValue("heatmap grid contains NaN or Inf")
    if preset.colormap == "diverging":
        limit = preset.vmax if preset.vmax is not None else float(np.abs(g).max(initial=0.0))
        lo, hi = -limit, limit
    elif preset.colormap == "sequential":
        lo = preset.vmin if preset.vmin is not None else float(g.min())
        hi = preset.vmax if preset.vmax is not None else float(g.max())
    else:
        raise ConfigError(f"unknown colormap {preset.colormap!r}")
    if hi <= lo:
        return np.full(g.shape, 128 if preset.colormap == "diverging" else 0, dtype=np.uint8)
    frac = (np.clip(g, lo, hi) - lo) / (hi - lo)
    return np.floor(frac * 255.0 + 0.5).astype(np.uint8)


def render_pgm(grid, preset: Preset) -> bytes:
    q = quantize(grid, preset)
    rows, cols = q.shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + q.tobytes()


def _colour(level: int, anchors) -> str:
    pos = level / 255.0 * (len(anchors) - 1)
    i = min(int(math.floor(pos)), len(anchors) - 2)
    t = pos - i
    rgb = [round(a + (b - a) * t) for a, b in zip(anchors[i], anchors[i + 1])]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def render_svg(grid, preset: Preset, cell: int = 12, title: str = "") -> bytes:
    q = quantize(grid, preset)
    anchors = _DIVERGING if preset.colormap == "diverging" else _SEQUENTIAL
    rows, cols = q.shape
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * cell}" height="{rows * cell}" '
        f'viewBox="0 0 {cols * cell} {rows * cell}" shape-rendering="crispEdges">'
    ]
    if title:
        safe = title.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        parts.append(f"<title>{safe}</title>")
    for r in range(rows):
        for c in range(cols):
            parts.append(f'<rect x="{c * cell}" y="{r * cell}" width="{cell}" height="{cell}" '
                         f'fill="{_colour(int(q[r, c]), anchors)}"/>')
    parts.append("</svg>\n")
    return "\n".join(parts).encode("utf-8")


def render_heatmap(grid, preset: Preset, fmt: str = "pgm", **kwargs) -> bytes:
    if fmt == "pgm":
        return render_pgm(grid, preset)
    if fmt == "svg":
        return render_svg(grid, preset, **kwargs)
    raise ConfigError(f"unknown heatmap format {fmt!r}")


def unit_grid(vector, side: int) -> np.ndarray:
    """Reshape a length ``side**2`` unit vector into its row-major grid."""
    v = np.asarray(vector, dtype=np.float64)
    if v.size != side * side:
        raise ConfigError(f"vector of length {v.size} does not fill a {side}x{side} grid")
    return v.reshape(side, side)
