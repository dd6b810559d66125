"""Probability-flow ODE integration, straightness metrics, and the energy
distance used to check marginal transport.

A velocity oracle is any (t, x) -> v evaluator; constructors are provided for
the analytic Gaussian fields, kernel regression on an ensemble, and a
tabulated grid field with multilinear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import calculus, estimate
from .core import PathEnsemble, TimeGrid, make_time_grid
from .errors import (
    InvalidArgumentError,
    LowDensityError,
    TrajectoryLeftSupportError,
)
from .gaussian import GaussianProcessSpec, velocity_at

__all__ = [
    "VelocityOracle",
    "Trajectory",
    "FlowMapResult",
    "StraightnessDeviation",
    "OneStepSummary",
    "analytic_velocity_oracle",
    "kernel_velocity_oracle",
    "tabulated_velocity_oracle",
    "integrate",
    "integrate_many",
    "flow_map",
    "straightness_deviation",
    "one_step_error",
    "energy_distance",
]

_SCHEMES = ("euler", "midpoint", "rk4")
_EVALS_PER_STEP = {"euler": 1, "midpoint": 2, "rk4": 4}


@dataclass
class OracleStats:
    """Mutable counters; `excursions` counts queries clamped back into the box."""

    excursions: int = 0


@dataclass(frozen=True)
class VelocityOracle:
    """Evaluator contract (t, x) -> v_t(x); accepts x of shape (d,) or (M, d).

    Evaluators must be safe to call concurrently (pure, or internally
    synchronized); the bundled constructors return pure evaluators up to the
    excursion counter.
    """

    evaluate: Callable[[float, np.ndarray], np.ndarray]
    source: str  # "analytic" | "kernel-regression" | "tabulated-grid"
    dim: int
    stats: OracleStats = field(default_factory=OracleStats)

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.evaluate(t, x)


def analytic_velocity_oracle(spec: GaussianProcessSpec) -> VelocityOracle:
    return VelocityOracle(
        evaluate=lambda t, x: velocity_at(spec, float(t), x),
        source="analytic",
        dim=spec.dim,
    )


def kernel_velocity_oracle(
    ensemble: PathEnsemble, cfg: estimate.KernelConfig, quantile: float = 0.01
) -> VelocityOracle:
    """Nadaraya-Watson velocity oracle over the ensemble.

    Off-node times are handled by linear interpolation between the bracketing
    slices.  Queries outside the per-axis [quantile, 1-quantile] box of the
    bracketing slices are clamped to it and counted as excursions; a query
    whose effective n still falls under the density floor raises
    LowDensityError.
    """
    nodes = ensemble.grid.nodes
    stats = OracleStats()
    cache: dict[int, tuple] = {}

    def slice_data(k: int):
        if k not in cache:
            X = ensemble.positions[:, k, :]
            V = ensemble.velocities[:, k, :]
            lo = np.quantile(X, quantile, axis=0)
            hi = np.quantile(X, 1.0 - quantile, axis=0)
            h = estimate.resolve_bandwidth(cfg, X)
            cache[k] = (X, V, lo, hi, h)
        return cache[k]

    def eval_slice(k: int, pts: np.ndarray) -> np.ndarray:
        X, V, lo, hi, h = slice_data(k)
        clamped = np.clip(pts, lo, hi)
        if np.any(clamped != pts):
            stats.excursions += int(np.sum(np.any(clamped != pts, axis=-1)))
        vals, eff = estimate.nw_regress(X, V, clamped, h)
        bad = eff < cfg.density_floor
        if np.any(bad):
            raise LowDensityError(
                f"effective_n {eff[bad].min():.3g} below floor {cfg.density_floor} "
                f"at t={nodes[k]:.6g}",
                float(eff[bad].min()),
            )
        return vals

    def evaluate(t: float, x: np.ndarray) -> np.ndarray:
        arr = np.asarray(x, dtype=float)
        single = arr.ndim == 1
        pts = np.atleast_2d(arr)
        k = int(np.clip(np.searchsorted(nodes, t, side="right") - 1, 0, len(nodes) - 1))
        if k >= len(nodes) - 1:
            out = eval_slice(len(nodes) - 1, pts)
        else:
            w = (t - nodes[k]) / (nodes[k + 1] - nodes[k])
            if w <= 0:
                out = eval_slice(k, pts)
            elif w >= 1:
                out = eval_slice(k + 1, pts)
            else:
                out = (1.0 - w) * eval_slice(k, pts) + w * eval_slice(k + 1, pts)
        return out[0] if single else out

    return VelocityOracle(evaluate, "kernel-regression", ensemble.dim, stats)


def _multilinear(axes, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of a vector field tabulated on a tensor grid."""
    d = len(axes)
    m = pts.shape[0]
    idx = []
    frac = []
    for i, ax in enumerate(axes):
        j = np.clip(np.searchsorted(ax, pts[:, i], side="right") - 1, 0, ax.size - 2)
        h = ax[1] - ax[0]
        w = np.clip((pts[:, i] - ax[j]) / h, 0.0, 1.0)
        idx.append(j)
        frac.append(w)
    out = np.zeros((m, values.shape[-1]))
    for corner in range(1 << d):
        weight = np.ones(m)
        pos = []
        for i in range(d):
            if corner >> i & 1:
                weight = weight * frac[i]
                pos.append(idx[i] + 1)
            else:
                weight = weight * (1.0 - frac[i])
                pos.append(idx[i])
        out += weight[:, None] * values[tuple(pos)]
    return out


def tabulated_velocity_oracle(slices: Sequence[tuple[float, calculus.GridField]]) -> VelocityOracle:
    """Oracle from tabulated vector fields; linear in t between slices."""
    if not slices:
        raise InvalidArgumentError("need at least one tabulated slice")
    slices = sorted(slices, key=lambda p: p[0])
    times = np.array([p[0] for p in slices])
    fields = [p[1] for p in slices]
    for f in fields:
        if f.rank != "vector":
            raise InvalidArgumentError("tabulated oracle needs vector fields")
    d = fields[0].dim

    def eval_field(f: calculus.GridField, pts: np.ndarray) -> np.ndarray:
        return _multilinear(f.grid.axes, f.values, pts)

    def evaluate(t: float, x: np.ndarray) -> np.ndarray:
        arr = np.asarray(x, dtype=float)
        single = arr.ndim == 1
        pts = np.atleast_2d(arr)
        if len(fields) == 1 or t <= times[0]:
            out = eval_field(fields[0], pts)
        elif t >= times[-1]:
            out = eval_field(fields[-1], pts)
        else:
            k = int(np.searchsorted(times, t, side="right") - 1)
            k = min(k, len(fields) - 2)
            w = (t - times[k]) / (times[k + 1] - times[k])
            out = (1 - w) * eval_field(fields[k], pts) + w * eval_field(fields[k + 1], pts)
        return out[0] if single else out

    return VelocityOracle(evaluate, "tabulated-grid", d)


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """States of one ODE solution on a time grid."""

    grid: TimeGrid
    states: np.ndarray  # (K, d)
    scheme: str
    n_evals: int

    def __post_init__(self):
        states = np.ascontiguousarray(self.states, dtype=float)
        if states.ndim != 2 or states.shape[0] != self.grid.n_nodes:
            raise InvalidArgumentError("states must have shape (n_nodes, d)")
        if not np.all(np.isfinite(states)):
            raise InvalidArgumentError("trajectory states must be finite throughout")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]


def _step(oracle: VelocityOracle, t: float, x: np.ndarray, h: float, scheme: str) -> np.ndarray:
    if scheme == "euler":
        return x + h * oracle(t, x)
    if scheme == "midpoint":
        k1 = oracle(t, x)
        return x + h * oracle(t + h / 2, x + (h / 2) * k1)
    k1 = oracle(t, x)
    k2 = oracle(t + h / 2, x + (h / 2) * k1)
    k3 = oracle(t + h / 2, x + (h / 2) * k2)
    k4 = oracle(t + h, x + h * k3)
    return x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(
    oracle: VelocityOracle, x0: np.ndarray, grid: TimeGrid, scheme: str = "rk4"
) -> Trajectory:
    """Fixed-step explicit integration of dx/dt = v(t, x) along the grid."""
    if scheme not in _SCHEMES:
        raise InvalidArgumentError(f"unknown scheme {scheme!r}; pick from {_SCHEMES}")
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    nodes = grid.nodes
    states = np.empty((grid.n_nodes, x.size))
    states[0] = x
    for k in range(grid.n_nodes - 1):
        h = nodes[k + 1] - nodes[k]
        try:
            x = _step(oracle, float(nodes[k]), x, float(h), scheme)
        except LowDensityError as err:
            raise TrajectoryLeftSupportError(
                f"flow left the oracle support at t={nodes[k]:.6g}: {err}",
                times=nodes[: k + 1].copy(),
                states=states[: k + 1].copy(),
            ) from err
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError(
                f"trajectory diverged to a non-finite state at t={nodes[k + 1]:.6g}"
            )
        states[k + 1] = x
    n_evals = (grid.n_nodes - 1) * _EVALS_PER_STEP[scheme]
    return Trajectory(grid, states, scheme, n_evals)


def integrate_many(
    oracle: VelocityOracle, points: np.ndarray, grid: TimeGrid, scheme: str = "rk4"
) -> np.ndarray:
    """Vectorized stepping of many initial points at once; returns (M, K, d).

    Only valid for oracles that are total on the domain (analytic or
    tabulated); kernel oracles should go through flow_map for per-point error
    collection.
    """
    if scheme not in _SCHEMES:
        raise InvalidArgumentError(f"unknown scheme {scheme!r}; pick from {_SCHEMES}")
    X = np.atleast_2d(np.asarray(points, dtype=float)).copy()
    nodes = grid.nodes
    states = np.empty((X.shape[0], grid.n_nodes, X.shape[1]))
    states[:, 0, :] = X
    for k in range(grid.n_nodes - 1):
        h = float(nodes[k + 1] - nodes[k])
        X = _step(oracle, float(nodes[k]), X, h, scheme)
        states[:, k + 1, :] = X
    if not np.all(np.isfinite(states)):
        raise InvalidArgumentError("batched integration produced non-finite states")
    return states


@dataclass(frozen=True)
class FlowMapResult:
    """Per-point trajectories; failures leave a None and collect the error."""

    trajectories: list
    errors: list  # list of (index, exception)

    @property
    def endpoints(self) -> np.ndarray:
        return np.stack([t.endpoint for t in self.trajectories if t is not None])


def flow_map(
    oracle: VelocityOracle, points, grid: TimeGrid, scheme: str = "rk4"
) -> FlowMapResult:
    """Integrate each point; order is preserved, per-point errors collected."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if oracle.source in ("analytic", "tabulated-grid"):
        states = integrate_many(oracle, pts, grid, scheme)
        n_evals = (grid.n_nodes - 1) * _EVALS_PER_STEP[scheme]
        trajs = [Trajectory(grid, states[i], scheme, n_evals) for i in range(pts.shape[0])]
        return FlowMapResult(trajs, [])
    trajs, errors = [], []
    for i in range(pts.shape[0]):
        try:
            trajs.append(integrate(oracle, pts[i], grid, scheme))
        except (TrajectoryLeftSupportError, InvalidArgumentError) as err:
            trajs.append(None)
            errors.append((i, err))
    return FlowMapResult(trajs, errors)


# ---------------------------------------------------------------------------
# straightness metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StraightnessDeviation:
    chord_dev: float
    second_diff: float


def straightness_deviation(traj: Trajectory) -> StraightnessDeviation:
    """Deviation from the chord and the discrete second time derivative."""
    states = traj.states
    if states.shape[0] < 3:
        raise InvalidArgumentError("straightness needs at least 3 nodes")
    t = traj.grid.nodes[:, None]
    chord = (1.0 - t) * states[0] + t * states[-1]
    chord_dev = float(np.linalg.norm(states - chord, axis=1).max())
    step = traj.grid.step
    dd = states[2:] - 2 * states[1:-1] + states[:-2]
    second_diff = float(np.linalg.norm(dd, axis=1).max() / step**2)
    return StraightnessDeviation(chord_dev, second_diff)


@dataclass(frozen=True)
class OneStepSummary:
    errors: np.ndarray  # per point
    max_error: float
    rms_error: float


def one_step_error(
    oracle: VelocityOracle,
    points,
    reference_scheme: str = "rk4",
    reference_steps: int = 400,
) -> OneStepSummary:
    """|single-Euler-step endpoint - reference endpoint| per starting point."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    euler_end = pts + np.atleast_2d(oracle(0.0, pts))
    ref_grid = make_time_grid(reference_steps)
    if oracle.source in ("analytic", "tabulated-grid"):
        ref_end = integrate_many(oracle, pts, ref_grid, reference_scheme)[:, -1, :]
    else:
        ref_end = np.stack(
            [integrate(oracle, p, ref_grid, reference_scheme).endpoint for p in pts]
        )
    errs = np.linalg.norm(euler_end - ref_end, axis=1)
    return OneStepSummary(errs, float(errs.max()), float(np.sqrt(np.mean(errs**2))))


# ---------------------------------------------------------------------------
# energy distance
# ---------------------------------------------------------------------------

def _mean_cross_1d(a: np.ndarray, b: np.ndarray) -> float:
    a = np.sort(a)
    b = np.sort(b)
    prefix = np.concatenate([[0.0], np.cumsum(b)])
    k = np.searchsorted(b, a, side="right")
    total = np.sum(a * (2 * k - b.size) - 2 * prefix[k] + prefix[-1])
    return float(total / (a.size * b.size))


def _mean_within_1d(a: np.ndarray) -> float:
    a = np.sort(a)
    n = a.size
    j = np.arange(n)
    return float(2.0 * np.sum(a * (2 * j - (n - 1))) / (n * n))


def _mean_cross_nd(a: np.ndarray, b: np.ndarray) -> float:
    total = 0.0
    step = max(1, (1 << 22) // max(b.shape[0], 1))
    for i0 in range(0, a.shape[0], step):
        chunk = a[i0 : i0 + step]
        d2 = np.sum((chunk[:, None, :] - b[None, :, :]) ** 2, axis=-1)
        total += float(np.sum(np.sqrt(d2)))
    return total / (a.shape[0] * b.shape[0])


def energy_distance(sample_a, sample_b) -> float:
    """V-statistic energy distance 2 E|a-b| - E|a-a'| - E|b-b'|.

    Exact O(n log n) path in one dimension, chunked pairwise otherwise.
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.size == 0 or b.size == 0:
        raise InvalidArgumentError("energy distance needs nonempty samples")
    if a.shape[1] != b.shape[1]:
        raise InvalidArgumentError("samples must share a dimension")
    if a.shape[1] == 1:
        av, bv = a[:, 0], b[:, 0]
        return 2.0 * _mean_cross_1d(av, bv) - _mean_within_1d(av) - _mean_within_1d(bv)
    return (
        2.0 * _mean_cross_nd(a, b) - _mean_cross_nd(a, a) - _mean_cross_nd(b, b)
    )
