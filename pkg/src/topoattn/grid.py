"""Square unit layouts, lattice distances and circular receptive fields.

Units are laid out row-major on a bounded ``s x s`` lattice; there is no
wraparound, so receptive fields near the edge are truncated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import FractionOutOfRange, NonSquareDimension


@dataclass(frozen=True)
class GridLayout:
    side: int

    @property
    def d(self) -> int:
        return self.side * self.side

    @cached_property
    def coords(self) -> np.ndarray:
        """(d, 2) integer array of (row, col), row-major."""
        idx = np.arange(self.d)
        return np.stack([idx // self.side, idx % self.side], axis=1)

    def position(self, unit: int) -> tuple[int, int]:
        return divmod(unit, self.side)

    @property
    def center(self) -> int:
        return (self.side // 2) * self.side + self.side // 2

    @cached_property
    def distances(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        dist = np.sqrt((diff.astype(np.float64) ** 2).sum(axis=-1))
        dist.setflags(write=False)
        return dist


def make_grid(d: int) -> GridLayout:
    if d < 1:
        raise NonSquareDimension(f"dimension must be positive, got {d}")
    side = math.isqrt(d)
    if side * side != d:
        raise NonSquareDimension(f"{d} is not a perfect square")
    return GridLayout(side)


def distance_matrix(grid: GridLayout) -> np.ndarray:
    return grid.distances


@dataclass(frozen=True)
class ReceptiveField:
    center: int
    radius: float
    members: frozenset[int]


def receptive_field(grid: GridLayout, center: int, radius: float) -> ReceptiveField:
    members = np.flatnonzero(grid.distances[center] <= radius + _TIE_EPS)
    return ReceptiveField(center, float(radius), frozenset(int(m) for m in members))


# squared lattice distances are integers, so this only absorbs sqrt rounding
_TIE_EPS = 1e-9


def _check_fraction(r: float) -> None:
    if not (0.0 < r <= 1.0) or math.isnan(r):
        raise FractionOutOfRange(f"receptive-field fraction must lie in (0, 1], got {r}")


def radius_for_fraction(grid: GridLayout, r: float) -> float:
    """Smallest radius whose disc around the central unit holds ``round(r*d)`` units.

    At least one unit (the centre itself) is always covered. A fraction that
    asks for every unit returns the grid diameter, so full-grid fields are
    all-to-all from every unit, not just from the centre.
    """
    _check_fraction(r)
    target = max(1, int(round(r * grid.d)))
    if target >= grid.d:
        return float(grid.distances.max())
    dists = np.sort(grid.distances[grid.center])
    # ties at the threshold come along because membership uses <=
    return float(dists[target - 1])


def local_mask(grid: GridLayout, r: float) -> np.ndarray:
    """Binary (d, d) mask with entry [i, j] = 1 iff units i and j lie within the RF radius."""
    radius = radius_for_fraction(grid, r)
    return (grid.distances <= radius + _TIE_EPS).astype(np.float64)


def pooling_matrix(grid: GridLayout, r_sq: float) -> np.ndarray:
    """Binary query-pooling matrix.

    Column ``k`` marks the query units pooled for key unit ``k``:
    ``M[q, k] = 1`` iff ``q`` lies in the receptive field of ``k``.
    """
    return local_mask(grid, r_sq)
