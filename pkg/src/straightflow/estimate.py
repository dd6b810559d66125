"""Kernel estimation of density, conditional velocity/acceleration and the
velocity second-moment tensor from a sampled path ensemble.

Everything uses an isotropic Gaussian product kernel.  The unnormalized
kernel weight of sample j at query x is ``exp(-|x - X_j|^2 / (2 h^2))``; the
sum of these weights is the "effective n" at x, and queries whose effective n
falls under ``density_floor`` are refused (or masked, on grids).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import calculus
from .core import PathEnsemble
from .errors import (
    DegenerateDataError,
    InconsistentMomentsError,
    InvalidArgumentError,
    LowDensityError,
    NonFiniteDataError,
)

__all__ = [
    "KernelConfig",
    "NWEstimate",
    "SliceEstimate",
    "bandwidth_silverman",
    "silverman_bandwidth_from",
    "kde_density",
    "nw_conditional",
    "nw_second_moment",
    "reynolds_tensor",
    "slice_estimate",
    "nw_regress",
    "kde_at",
    "fields_on_grid",
]

_CHUNK = 1 << 22  # max weight-matrix elements held at once


@dataclass(frozen=True)
class KernelConfig:
    """Kernel estimation knobs.

    ``bandwidth`` is either an explicit length or the rule tag "silverman".
    ``density_floor`` is the minimum effective sample weight below which
    estimates are refused.
    """

    bandwidth: float | str = "silverman"
    kernel: str = "gaussian"
    density_floor: float = 25.0

    def __post_init__(self):
        if self.kernel != "gaussian":
            raise InvalidArgumentError("only the gaussian kernel is supported")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "silverman":
                raise InvalidArgumentError(f"unknown bandwidth rule {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise InvalidArgumentError("explicit bandwidth must be positive")
        if self.density_floor < 0:
            raise InvalidArgumentError("density_floor must be nonnegative")


@dataclass(frozen=True)
class NWEstimate:
    value: np.ndarray
    effective_n: float


@dataclass(frozen=True)
class SliceEstimate:
    """All pointwise estimates at one query point."""

    x: np.ndarray
    rho_hat: float
    v_hat: np.ndarray
    a_hat: np.ndarray
    Sigma_hat: np.ndarray
    Pi_hat: np.ndarray
    effective_n: float


def _slice_arrays(ensemble: PathEnsemble, t_index: int):
    X = ensemble.positions[:, t_index, :]
    V = ensemble.velocities[:, t_index, :]
    A = ensemble.accelerations[:, t_index, :]
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(V)) and np.all(np.isfinite(A))):
        raise NonFiniteDataError(
            f"slice {t_index} contains non-finite positions/velocities/accelerations"
        )
    return X, V, A


def silverman_bandwidth_from(X: np.ndarray) -> float:
    """Silverman rule on raw sample positions (N, d)."""
    n, d = X.shape
    if n < 2:
        raise InvalidArgumentError("silverman bandwidth needs at least two samples")
    sigma = float(np.mean(np.std(X, axis=0, ddof=1)))
    if sigma <= 0:
        raise DegenerateDataError("zero-variance slice; bandwidth undefined")
    return sigma * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def bandwidth_silverman(ensemble: PathEnsemble, t_index: int) -> float:
    """h = sigma_hat (4 / ((d+2) N))^(1/(d+4)) at the given time slice."""
    X, _, _ = _slice_arrays(ensemble, t_index)
    return silverman_bandwidth_from(X)


def resolve_bandwidth(cfg: KernelConfig, X: np.ndarray) -> float:
    if isinstance(cfg.bandwidth, str):
        return silverman_bandwidth_from(X)
    return float(cfg.bandwidth)


# ---------------------------------------------------------------------------
# array-level engine
# ---------------------------------------------------------------------------

# Kernel weights beyond this many bandwidths are below 1.3e-14 and dropped by
# the sorted-window fast path; immaterial next to estимator noise.
_WINDOW_BANDWIDTHS = 8.0


def _weighted_sums_1d(X: np.ndarray, Y: np.ndarray | None, points: np.ndarray, h: float):
    xs_order = np.argsort(X[:, 0], kind="stable")
    xs = X[xs_order, 0]
    ys = Y[xs_order] if Y is not None else None
    p = points[:, 0]
    radius = _WINDOW_BANDWIDTHS * h
    los = np.searchsorted(xs, p - radius, side="left")
    his = np.searchsorted(xs, p + radius, side="right")
    m = p.size
    sum_w = np.zeros(m)
    sum_wy = None if Y is None else np.zeros((m, Y.shape[1]))
    inv = 1.0 / (2.0 * h * h)
    for i in range(m):
        lo, hi = los[i], his[i]
        if lo >= hi:
            continue
        w = np.exp(-((p[i] - xs[lo:hi]) ** 2) * inv)
        sum_w[i] = w.sum()
        if ys is not None:
            sum_wy[i] = w @ ys[lo:hi]
    return sum_w, sum_wy


def _weighted_sums(X: np.ndarray, Y: np.ndarray | None, points: np.ndarray, h: float):
    """Kernel weight sums and weighted target sums.

    Returns (sum_w (M,), sum_wy (M, p)) with Y of shape (N, p); sum_wy is None
    when Y is None.  One dimension uses a sorted window (weights beyond
    8 bandwidths are dropped); higher dimensions chunk a GEMM-based distance
    matrix.
    """
    points = np.atleast_2d(points)
    if X.shape[1] == 1:
        return _weighted_sums_1d(X, Y, points, h)
    n = X.shape[0]
    m = points.shape[0]
    sum_w = np.empty(m)
    sum_wy = None if Y is None else np.empty((m, Y.shape[1]))
    step = max(1, _CHUNK // max(n, 1))
    inv = 1.0 / (2.0 * h * h)
    x_sq = np.sum(X**2, axis=1)
    for i0 in range(0, m, step):
        pts = points[i0 : i0 + step]
        d2 = np.sum(pts**2, axis=1)[:, None] + x_sq[None, :] - 2.0 * (pts @ X.T)
        np.clip(d2, 0.0, None, out=d2)
        w = np.exp(-d2 * inv)
        sum_w[i0 : i0 + step] = w.sum(axis=1)
        if Y is not None:
            sum_wy[i0 : i0 + step] = w @ Y
    return sum_w, sum_wy


def kde_at(X: np.ndarray, points: np.ndarray, h: float) -> np.ndarray:
    """Gaussian-kernel density estimate at each query point."""
    n, d = X.shape
    sum_w, _ = _weighted_sums(X, None, points, h)
    return sum_w / (n * (2 * np.pi * h * h) ** (d / 2))


def nw_regress(X: np.ndarray, Y: np.ndarray, points: np.ndarray, h: float):
    """Nadaraya-Watson ratio at each query point.

    Returns (values (M, p), effective_n (M,)).  No floor is applied here;
    callers decide whether to refuse or mask.
    """
    sum_w, sum_wy = _weighted_sums(X, Y, points, h)
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = sum_wy / sum_w[:, None]
    return vals, sum_w


# ---------------------------------------------------------------------------
# ensemble-facing operations
# ---------------------------------------------------------------------------

def kde_density(ensemble: PathEnsemble, t_index: int, x, cfg: KernelConfig) -> float:
    X, _, _ = _slice_arrays(ensemble, t_index)
    h = resolve_bandwidth(cfg, X)
    return float(kde_at(X, np.atleast_2d(np.asarray(x, dtype=float)), h)[0])


def nw_conditional(
    ensemble: PathEnsemble, t_index: int, x, target: str, cfg: KernelConfig
) -> NWEstimate:
    """Kernel-regression estimate of the conditional velocity or acceleration."""
    if target not in ("velocity", "acceleration"):
        raise InvalidArgumentError("target must be 'velocity' or 'acceleration'")
    X, V, A = _slice_arrays(ensemble, t_index)
    Y = V if target == "velocity" else A
    h = resolve_bandwidth(cfg, X)
    vals, eff = nw_regress(X, Y, np.atleast_2d(np.asarray(x, dtype=float)), h)
    if eff[0] < cfg.density_floor:
        raise LowDensityError(
            f"effective_n {eff[0]:.3g} below floor {cfg.density_floor}", float(eff[0])
        )
    return NWEstimate(vals[0], float(eff[0]))


def nw_second_moment(ensemble: PathEnsemble, t_index: int, x, cfg: KernelConfig) -> np.ndarray:
    """Kernel-weighted average of the velocity outer products."""
    X, V, _ = _slice_arrays(ensemble, t_index)
    d = X.shape[1]
    h = resolve_bandwidth(cfg, X)
    outer = (V[:, :, None] * V[:, None, :]).reshape(len(V), d * d)
    vals, eff = nw_regress(X, outer, np.atleast_2d(np.asarray(x, dtype=float)), h)
    if eff[0] < cfg.density_floor:
        raise LowDensityError(
            f"effective_n {eff[0]:.3g} below floor {cfg.density_floor}", float(eff[0])
        )
    S = vals[0].reshape(d, d)
    return 0.5 * (S + S.T)


def reynolds_tensor(Sigma_hat: np.ndarray, v_hat: np.ndarray) -> np.ndarray:
    """Pi = Sigma - v (x) v, symmetrized, with small negative eigenvalues
    clipped to zero.  Eigenvalues below -1e-8 trace(Sigma) mean the inputs
    are not a consistent (second moment, mean) pair."""
    Sigma_hat = np.atleast_2d(np.asarray(Sigma_hat, dtype=float))
    v_hat = np.atleast_1d(np.asarray(v_hat, dtype=float))
    if Sigma_hat.shape != (v_hat.size, v_hat.size):
        raise InvalidArgumentError("Sigma_hat and v_hat shapes disagree")
    pi = Sigma_hat - np.outer(v_hat, v_hat)
    pi = 0.5 * (pi + pi.T)
    vals, vecs = np.linalg.eigh(pi)
    tol = 1e-8 * max(float(np.trace(Sigma_hat)), 0.0)
    if vals.min() < -tol:
        raise InconsistentMomentsError(
            f"Pi eigenvalue {vals.min():.3g} below -1e-8 trace(Sigma) = {-tol:.3g}"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * vals) @ vecs.T


def slice_estimate(ensemble: PathEnsemble, t_index: int, x, cfg: KernelConfig) -> SliceEstimate:
    """All pointwise estimates at one query point."""
    X, V, A = _slice_arrays(ensemble, t_index)
    d = X.shape[1]
    h = resolve_bandwidth(cfg, X)
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    outer = (V[:, :, None] * V[:, None, :]).reshape(len(V), d * d)
    targets = np.concatenate([V, A, outer], axis=1)
    vals, eff = nw_regress(X, targets, x_arr[None, :], h)
    if eff[0] < cfg.density_floor:
        raise LowDensityError(
            f"effective_n {eff[0]:.3g} below floor {cfg.density_floor}", float(eff[0])
        )
    rho = float(kde_at(X, x_arr[None, :], h)[0])
    v_hat = vals[0, :d]
    a_hat = vals[0, d : 2 * d]
    Sigma_hat = vals[0, 2 * d :].reshape(d, d)
    Sigma_hat = 0.5 * (Sigma_hat + Sigma_hat.T)
    Pi_hat = reynolds_tensor(Sigma_hat, v_hat)
    return SliceEstimate(x_arr, rho, v_hat, a_hat, Sigma_hat, Pi_hat, float(eff[0]))


# ---------------------------------------------------------------------------
# grid tabulation
# ---------------------------------------------------------------------------

def fields_on_grid(
    X: np.ndarray,
    V: np.ndarray,
    A: np.ndarray,
    grid: calculus.SpatialGrid,
    cfg: KernelConfig,
    t: float = 0.0,
):
    """Estimate rho, v, a, Sigma, Pi on every grid node.

    Nodes whose effective n falls under the density floor get NaN values and
    are dropped from the mask (the compact-domain emulation).  Pi is repaired
    by clipping negative eigenvalues so downstream stencils see a full PSD
    field.  Returns (fields dict, refined grid, bandwidth).
    """
    for name, arr in (("positions", X), ("velocities", V), ("accelerations", A)):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteDataError(f"{name} must be finite for grid estimation")
    n, d = X.shape
    h = resolve_bandwidth(cfg, X)
    pts = grid.points()
    outer = (V[:, :, None] * V[:, None, :]).reshape(n, d * d)
    targets = np.concatenate([V, A, outer], axis=1)
    vals, eff = nw_regress(X, targets, pts, h)
    rho = eff / (n * (2 * np.pi * h * h) ** (d / 2))

    ok = eff >= cfg.density_floor
    vals[~ok] = np.nan
    rho_arr = np.where(ok, rho, np.nan)

    shape = grid.shape
    v_arr = vals[:, :d]
    a_arr = vals[:, d : 2 * d]
    sig_arr = vals[:, 2 * d :].reshape(-1, d, d)
    sig_arr = 0.5 * (sig_arr + np.swapaxes(sig_arr, -1, -2))

    pi_arr = np.full_like(sig_arr, np.nan)
    if np.any(ok):
        pi_ok = sig_arr[ok] - v_arr[ok, :, None] * v_arr[ok, None, :]
        w, Q = np.linalg.eigh(pi_ok)
        w = np.clip(w, 0.0, None)
        pi_arr[ok] = np.einsum("nij,nj,nkj->nik", Q, w, Q)

    refined = grid.with_mask(grid.mask & ok.reshape(shape))
    fields = {
        "rho": calculus.GridField(refined, "scalar", rho_arr.reshape(shape), t),
        "v": calculus.GridField(refined, "vector", v_arr.reshape(shape + (d,)), t),
        "a": calculus.GridField(refined, "vector", a_arr.reshape(shape + (d,)), t),
        "Sigma": calculus.GridField(refined, "matrix", sig_arr.reshape(shape + (d, d)), t),
        "Pi": calculus.GridField(refined, "matrix", pi_arr.reshape(shape + (d, d)), t),
        "effective_n": calculus.GridField(refined, "scalar", eff.reshape(shape), t),
    }
    return fields, refined, h
