"""Probing analyses over (sentences x units) activation matrices."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata

from .errors import ConfigError, DataError, NonFiniteInput, ShapeMismatch, SingleClassSplit, TooFewPairs

log = logging.getLogger(__name__)

P_FLOOR = 1e-300
N_SCALES = 9
SCALE_LOW_PERCENTILE = 10.0
CORR_DECIMALS = 12


def _as_matrix(x, name="X") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteInput(f"{name} contains NaN or Inf")
    return arr


# ---------------------------------------------------------------------------
# elementary statistics
# ---------------------------------------------------------------------------

def student_t_sf2(t, df):
    """Two-tailed p-value of Student's t via the regularised incomplete beta function."""
    t = np.asarray(t, dtype=np.float64)
    df = np.asarray(df, dtype=np.float64)
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def welch_t(a: np.ndarray, b: np.ndarray):
    """Column-wise Welch t statistic, degrees of freedom and two-tailed p.

    Columns where both groups are constant get t=0, p=1 and are flagged.
    """
    na, nb = a.shape[0], b.shape[0]
    va = a.var(axis=0, ddof=1) / na
    vb = b.var(axis=0, ddof=1) / nb
    se2 = va + vb
    degenerate = se2 == 0
    safe = np.where(degenerate, 1.0, se2)
    t = np.where(degenerate, 0.0, (a.mean(axis=0) - b.mean(axis=0)) / np.sqrt(safe))
    denom = np.where(degenerate, 1.0, va ** 2 / (na - 1) + vb ** 2 / (nb - 1))
    df = np.where(degenerate, 1.0, safe ** 2 / np.where(denom == 0, 1.0, denom))
    p = np.where(degenerate, 1.0, student_t_sf2(t, df))
    return t, df, p, degenerate


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    rx = rankdata(x)
    ry = rankdata(y)
    return pearson(rx, ry)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    y = np.asarray(y, dtype=np.float64) - np.mean(y)
    denom = np.sqrt((x @ x) * (y @ y))
    if denom == 0:
        return float("nan")
    return float(np.clip((x @ y) / denom, -1.0, 1.0))


def correlation_matrix(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pearson correlation between columns; returns (R, mask of non-constant columns)."""
    xc = x - x.mean(axis=0)
    norms = np.sqrt((xc * xc).sum(axis=0))
    valid = norms > 1e-12 * max(1.0, float(np.abs(x).max(initial=0.0)))
    z = xc[:, valid] / norms[valid]
    r = np.clip(z.T @ z, -1.0, 1.0)
    return r, valid


# ---------------------------------------------------------------------------
# selectivity
# ---------------------------------------------------------------------------

@dataclass
class SelectivityMap:
    s: np.ndarray
    t: np.ndarray
    p: np.ndarray
    degenerate: np.ndarray
    conditions: tuple[str, str] = ("A", "B")


def selectivity(a, b, conditions=("A", "B")) -> SelectivityMap:
    """Signed ``-log10 p`` of a per-unit Welch t-test; positive values prefer condition A."""
    a = _as_matrix(a, "A")
    b = _as_matrix(b, "B")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"condition widths differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DataError("each condition needs at least two rows")
    t, _, p, degenerate = welch_t(a, b)
    if degenerate.any():
        log.warning("%d units are constant in both conditions; reporting s=0", int(degenerate.sum()))
    s = np.sign(t) * -np.log10(np.maximum(p, P_FLOOR))
    s = np.where(degenerate, 0.0, s) + 0.0
    return SelectivityMap(s, t, p, degenerate, tuple(conditions))


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass
class PCAResult:
    weights: np.ndarray  # (d, k)
    scores: np.ndarray  # (n, k)
    explained_variance_ratio: np.ndarray
    mean: np.ndarray


def _fix_signs(w: np.ndarray) -> np.ndarray:
    """Per-column sign so the largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(w), axis=0)
    signs = np.sign(w[idx, np.arange(w.shape[1])])
    signs[signs == 0] = 1.0
    return signs


def pca(x, k: int) -> PCAResult:
    x = _as_matrix(x)
    n, d = x.shape
    if k < 1 or k > min(n - 1, d):
        raise ConfigError(f"k must lie in [1, {min(n - 1, d)}], got {k}")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    tol = s.max(initial=0.0) * max(n, d) * np.finfo(float).eps
    rank = int((s > tol).sum())
    if k > rank:
        warnings.warn(f"requested {k} components but numerical rank is {rank}; truncating", RuntimeWarning)
        k = max(rank, 1)
    w = vt[:k].T
    w = w * _fix_signs(w)
    total = (s ** 2).sum()
    ratio = (s[:k] ** 2) / total if total > 0 else np.zeros(k)
    return PCAResult(w, xc @ w, ratio, mean)


# ---------------------------------------------------------------------------
# topography
# ---------------------------------------------------------------------------

def _pair_values(x: np.ndarray, distances: np.ndarray):
    n_units = x.shape[1]
    if distances.shape != (n_units, n_units):
        raise ShapeMismatch(f"distance matrix {distances.shape} vs {n_units} units")
    r, valid = correlation_matrix(x)
    units = np.flatnonzero(valid)
    iu, ju = np.triu_indices(units.size, k=1)
    neg_r = _snap(-r[iu, ju])
    dist = distances[units[iu], units[ju]]
    return neg_r, dist, int((~valid).sum())


def _snap(values: np.ndarray) -> np.ndarray:
    """Round correlations so values equal up to float noise rank as ties."""
    return np.round(values, CORR_DECIMALS) + 0.0


def topo_stat(x, distances, d_max: float | None = None) -> float:
    """Spearman correlation between ``-corr(i, j)`` and ``dist(i, j)`` over unit pairs within ``d_max``.

    The threshold is inclusive: on a lattice the scale grid lands exactly on
    pair distances, and dropping that shell can leave a single distance value.
    """
    x = _as_matrix(x)
    neg_r, dist, dropped = _pair_values(x, np.asarray(distances, dtype=np.float64))
    if dropped:
        log.debug("topo_stat: %d constant units excluded", dropped)
    return _topo_from_pairs(neg_r, dist, d_max)


def _topo_from_pairs(neg_r, dist, d_max):
    if d_max is not None:
        keep = dist <= d_max + 1e-9
        neg_r, dist = neg_r[keep], dist[keep]
    if neg_r.size < 10:
        raise TooFewPairs(f"only {neg_r.size} unit pairs available")
    if np.ptp(dist) == 0:
        raise TooFewPairs("all selected pairs share one distance")
    return spearman(neg_r, dist)


def distance_scales(distances, n_scales: int = N_SCALES) -> np.ndarray:
    """Linearly spaced maximum distances from the 10th percentile of nonzero distances to the maximum."""
    dist = np.asarray(distances, dtype=np.float64)
    iu = np.triu_indices(dist.shape[0], k=1)
    nz = dist[iu]
    nz = nz[nz > 0]
    if nz.size == 0:
        raise TooFewPairs("no nonzero distances")
    return np.linspace(np.percentile(nz, SCALE_LOW_PERCENTILE), nz.max(), n_scales)


@dataclass
class TopoStatResult:
    scales: np.ndarray
    values: np.ndarray
    mean: float
    excluded_units: int = 0
    null: np.ndarray | None = None
    percentile: float | None = None
    significant: bool | None = None

    def to_dict(self) -> dict:
        out = {
            "scales": self.scales.tolist(),
            "t_g_d": self.values.tolist(),
            "t_g_mean": self.mean,
            "excluded_units": self.excluded_units,
        }
        if self.null is not None:
            out.update(null=self.null.tolist(), percentile=self.percentile, significant=self.significant)
        return out


def _profile_from_pairs(neg_r, dist, scales) -> np.ndarray:
    vals = []
    for d_max in scales:
        try:
            vals.append(_topo_from_pairs(neg_r, dist, d_max))
        except TooFewPairs:
            vals.append(np.nan)
    return np.array(vals)


def topo_stat_profile(x, distances, n_scales: int = N_SCALES) -> TopoStatResult:
    x = _as_matrix(x)
    distances = np.asarray(distances, dtype=np.float64)
    scales = distance_scales(distances, n_scales)
    neg_r, dist, dropped = _pair_values(x, distances)
    if neg_r.size < 10:
        raise TooFewPairs(f"only {neg_r.size} unit pairs with non-constant responses")
    vals = _profile_from_pairs(neg_r, dist, scales)
    finite = vals[np.isfinite(vals)]
    if finite.size == 0:
        raise TooFewPairs("no distance scale has enough pairs")
    return TopoStatResult(scales, vals, float(finite.mean()), dropped)


def permutation_null(x, distances, n_perm: int = 100, seed: int = 0, profile: bool = True,
                     n_scales: int = N_SCALES, alpha: float = 0.05) -> TopoStatResult:
    """Null distribution of the topography statistic under random unit-to-position shuffles.

    With ``profile=True`` the statistic is the mean over distance scales,
    otherwise the single all-pairs value.
    """
    if n_perm < 20:
        raise ConfigError(f"n_perm must be >= 20, got {n_perm}")
    x = _as_matrix(x)
    distances = np.asarray(distances, dtype=np.float64)
    if profile:
        observed = topo_stat_profile(x, distances, n_scales)
        scales = observed.scales
    else:
        value = topo_stat(x, distances)
        observed = TopoStatResult(np.array([np.inf]), np.array([value]), value)
        scales = None
    rng = np.random.default_rng(seed)
    r, valid = correlation_matrix(x)
    units = np.flatnonzero(valid)
    iu, ju = np.triu_indices(units.size, k=1)
    neg_r = _snap(-r[iu, ju])
    null = np.empty(n_perm)
    for i in range(n_perm):
        perm = rng.permutation(distances.shape[0])
        d_perm = distances[np.ix_(perm, perm)]
        dist = d_perm[units[iu], units[ju]]
        if profile:
            vals = _profile_from_pairs(neg_r, dist, scales)
            null[i] = np.nanmean(vals)
        else:
            null[i] = _topo_from_pairs(neg_r, dist, None)
    observed.null = null
    observed.percentile = float((null < observed.mean).mean() * 100.0)
    observed.significant = bool(observed.mean > np.percentile(null, 100.0 * (1.0 - alpha)))
    return observed


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _split(n: int, frac: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_train = int(round(frac * n))
    return order[:n_train], order[n_train:]


def logistic_regression(x: np.ndarray, y: np.ndarray, max_iter: int = 10_000, tol: float = 1e-6):
    """Full-batch gradient descent on the mean logistic loss. Returns (weights, bias)."""
    n, p = x.shape
    w = np.zeros(p)
    b = 0.0
    # Lipschitz bound of the mean logistic loss gradient, intercept included
    lip = 0.25 * (np.linalg.norm(np.c_[x, np.ones(n)], 2) ** 2) / n
    step = 1.0 / max(lip, 1e-12)
    for _ in range(max_iter):
        z = x @ w + b
        prob = 0.5 * (1.0 + np.tanh(0.5 * z))
        err = prob - y
        gw = x.T @ err / n
        gb = err.mean()
        if np.sqrt(gw @ gw + gb * gb) < tol:
            break
        w -= step * gw
        b -= step * gb
    return w, b


@dataclass
class DecodeResult:
    accuracy: float
    n_components: int
    n_train: int
    n_test: int


def decode(x, labels, n_components: int = 50, split: float = 0.8, seed: int = 0) -> DecodeResult:
    """Held-out accuracy of a logistic classifier on PCs fit to the training rows."""
    x = _as_matrix(x)
    y = np.asarray(labels)
    if y.shape != (x.shape[0],):
        raise ShapeMismatch("labels must have one entry per row")
    classes = np.unique(y)
    if classes.size != 2:
        raise SingleClassSplit(f"need exactly two classes, got {classes.size}")
    if x.shape[0] < 10:
        raise DataError("decoding needs at least 10 rows")
    y01 = (y == classes[1]).astype(np.float64)
    rng = np.random.default_rng(seed)
    tr, te = _split(x.shape[0], split, rng)
    if np.unique(y01[tr]).size < 2:
        raise SingleClassSplit("training split contains a single class")
    k = min(n_components, tr.size - 1, x.shape[1])
    if k < n_components:
        warnings.warn(f"n_components={n_components} exceeds available rank; using {k}", RuntimeWarning)
    fit = pca(x[tr], k)
    scores_tr = fit.scores
    scores_te = (x[te] - fit.mean) @ fit.weights
    sd = scores_tr.std(axis=0)
    sd[sd == 0] = 1.0
    w, b = logistic_regression(scores_tr / sd, y01[tr])
    pred = ((scores_te / sd) @ w + b) > 0
    return DecodeResult(float((pred == y01[te]).mean()), fit.weights.shape[1], tr.size, te.size)


# ---------------------------------------------------------------------------
# PLS-SVD alignment
# ---------------------------------------------------------------------------

@dataclass
class AlignmentResult:
    correlations: np.ndarray
    weights_x: np.ndarray  # (p, k), columns are unit-norm
    weights_y: np.ndarray  # (q, k)
    singular_values: np.ndarray
    train_index: np.ndarray
    test_index: np.ndarray
    kept_x: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    kept_y: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def full_weights_y(self) -> np.ndarray:
        """Weights scattered back to all original Y columns (dropped columns are 0)."""
        out = np.zeros((self.kept_y.size, self.weights_y.shape[1]))
        out[self.kept_y] = self.weights_y
        return out

    def full_weights_x(self) -> np.ndarray:
        out = np.zeros((self.kept_x.size, self.weights_x.shape[1]))
        out[self.kept_x] = self.weights_x
        return out


def _zscore_train(x: np.ndarray, tr: np.ndarray):
    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0, ddof=1)
    keep = sd > 1e-12
    return (x[:, keep] - mu[keep]) / sd[keep], keep


def pls_svd_align(x, y, n_components: int = 10, split: float = 0.8, seed: int = 0) -> AlignmentResult:
    x = _as_matrix(x, "X")
    y = _as_matrix(y, "Y")
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    tr, te = _split(n, split, rng)
    if tr.size < n_components or te.size < 2:
        raise ConfigError(f"split leaves {tr.size} train / {te.size} test rows for {n_components} components")
    xz, kx = _zscore_train(x, tr)
    yz, ky = _zscore_train(y, tr)
    for name, keep in (("X", kx), ("Y", ky)):
        if not keep.all():
            log.warning("%s: dropped %d zero-variance columns", name, int((~keep).sum()))
    k = min(n_components, xz.shape[1], yz.shape[1])
    u, s, vt = np.linalg.svd(xz[tr].T @ yz[tr], full_matrices=False)
    wx = u[:, :k]
    wy = vt[:k].T
    signs = _fix_signs(wx)
    wx, wy = wx * signs, wy * signs
    sx = xz[te] @ wx
    sy = yz[te] @ wy
    corr = np.array([pearson(sx[:, i], sy[:, i]) for i in range(k)])
    return AlignmentResult(corr, wx, wy, s[:k], tr, te, kx, ky)


# ---------------------------------------------------------------------------
# ridge encoding
# ---------------------------------------------------------------------------

def ridge_loo_errors(x: np.ndarray, y: np.ndarray, lambdas) -> np.ndarray:
    """Leave-one-out residuals for ridge with unpenalised intercept, one row per lambda.

    Uses the hat-matrix identity ``e_i = (y_i - yhat_i) / (1 - H_ii)`` with
    ``H = 11'/n + U diag(s^2 / (s^2 + lam)) U'`` from the SVD of centred ``x``.
    """
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    u, s, _ = np.linalg.svd(xc, full_matrices=False)
    uty = u.T @ yc
    out = np.empty((len(lambdas), n))
    for i, lam in enumerate(lambdas):
        shrink = s ** 2 / (s ** 2 + lam)
        fitted = u @ (shrink * uty)
        h = 1.0 / n + (u ** 2) @ shrink
        out[i] = (yc - fitted) / (1.0 - h)
    return out


def ridge_fit(x: np.ndarray, y: np.ndarray, lam: float):
    mx = x.mean(axis=0)
    my = y.mean()
    xc = x - mx
    w = np.linalg.solve(xc.T @ xc + lam * np.eye(x.shape[1]), xc.T @ (y - my))
    return w, my - mx @ w


@dataclass
class RidgeResult:
    weights: np.ndarray
    intercept: float
    best_lambda: float
    loo_mse: np.ndarray
    correlation: float
    lambdas: np.ndarray


DEFAULT_LAMBDAS = np.logspace(-3, 5, 17)


def ridge_encode(x, y, lambdas=DEFAULT_LAMBDAS, split: float = 0.8, seed: int = 0) -> RidgeResult:
    x = _as_matrix(x)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (x.shape[0],):
        raise ShapeMismatch("target must be a vector with one entry per row")
    if x.shape[0] < 10:
        raise DataError("ridge encoding needs at least 10 rows")
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.size == 0 or (lambdas <= 0).any():
        raise ConfigError("lambda grid must be nonempty and positive")
    rng = np.random.default_rng(seed)
    tr, te = _split(x.shape[0], split, rng)
    loo = ridge_loo_errors(x[tr], y[tr], lambdas)
    mse = (loo ** 2).mean(axis=1)
    best = float(lambdas[int(np.argmin(mse))])
    w, b = ridge_fit(x[tr], y[tr], best)
    pred = x[te] @ w + b
    return RidgeResult(w, float(b), best, mse, pearson(pred, y[te]), lambdas)
