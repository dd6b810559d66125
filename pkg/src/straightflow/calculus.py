"""Finite-difference calculus on tensor-product grids and PDE residuals.

First derivatives use central differences.  With ``order=4`` (the default,
appropriate for smooth analytic fields) a five-point stencil is used at every
interior node, switching to the offset five-point stencil one node in from
each boundary.  ``order=2`` (three-point central) is preferred for noisy
estimated fields, where higher-order stencils amplify sampling noise.  Both
are exact on quadratics.  The outermost node layer never receives a value and
is always masked out.

The divergence of a matrix field contracts the FIRST index:
``(div T)_j = sum_i d_i T_ij``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, InvalidGridError

__all__ = [
    "SpatialGrid",
    "GridField",
    "ResidualReport",
    "make_spatial_grid",
    "grid_gradient",
    "grid_divergence_vector",
    "grid_divergence_matrix",
    "time_derivative",
    "time_derivative_one_sided",
    "material_derivative",
    "momentum_residual",
    "balance_residual",
    "continuity_residual",
    "field_norms",
    "grid_field_to_csv",
]

_REL_FLOOR = 1e-30


# ---------------------------------------------------------------------------
# grid and field containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpatialGrid:
    """Tensor-product grid with uniform spacing per axis and a node mask.

    ``mask`` marks admissible nodes; the outermost layer on each axis is
    forced inadmissible because no centered stencil exists there.
    """

    axes: tuple
    mask: np.ndarray | None = None

    def __post_init__(self):
        axes = []
        for ax in self.axes:
            ax = np.ascontiguousarray(ax, dtype=float)
            if ax.ndim != 1 or ax.size < 3:
                raise InvalidGridError("each axis needs at least 3 nodes")
            d = np.diff(ax)
            h = (ax[-1] - ax[0]) / (ax.size - 1)
            if np.any(d <= 0) or np.abs(d - h).max() > 1e-12 * max(abs(h), 1.0):
                raise InvalidGridError("axis nodes must be uniformly spaced and increasing")
            ax.setflags(write=False)
            axes.append(ax)
        object.__setattr__(self, "axes", tuple(axes))
        interior = np.ones(self.shape, dtype=bool)
        for axis in range(self.dim):
            sl = [slice(None)] * self.dim
            sl[axis] = 0
            interior[tuple(sl)] = False
            sl[axis] = -1
            interior[tuple(sl)] = False
        mask = interior if self.mask is None else (np.asarray(self.mask, dtype=bool) & interior)
        if mask.shape != self.shape:
            raise InvalidGridError("mask shape does not match grid shape")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(ax.size for ax in self.axes)

    @property
    def spacings(self) -> tuple:
        return tuple(float((ax[-1] - ax[0]) / (ax.size - 1)) for ax in self.axes)

    def meshgrid(self):
        return np.meshgrid(*self.axes, indexing="ij")

    def points(self) -> np.ndarray:
        """All nodes as an (n_nodes, dim) array in C order."""
        mesh = self.meshgrid()
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def with_mask(self, mask: np.ndarray) -> "SpatialGrid":
        return SpatialGrid(self.axes, mask)

    def same_axes(self, other: "SpatialGrid") -> bool:
        return self.dim == other.dim and all(
            np.array_equal(a, b) for a, b in zip(self.axes, other.axes)
        )


def make_spatial_grid(bounds, nodes_per_axis) -> SpatialGrid:
    """Grid over a box; ``bounds`` is a sequence of (lo, hi) pairs."""
    if np.isscalar(nodes_per_axis):
        nodes_per_axis = [int(nodes_per_axis)] * len(bounds)
    axes = []
    for (lo, hi), n in zip(bounds, nodes_per_axis):
        if not (hi > lo):
            raise InvalidGridError("box bounds must satisfy hi > lo")
        axes.append(np.linspace(float(lo), float(hi), int(n)))
    return SpatialGrid(tuple(axes))


_RANKS = ("scalar", "vector", "matrix")


@dataclass(frozen=True)
class GridField:
    """Scalar/vector/matrix values tabulated on a grid at one time slice."""

    grid: SpatialGrid
    rank: str
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        if self.rank not in _RANKS:
            raise InvalidArgumentError(f"unknown rank {self.rank!r}")
        d = self.grid.dim
        expected = {
            "scalar": self.grid.shape,
            "vector": self.grid.shape + (d,),
            "matrix": self.grid.shape + (d, d),
        }[self.rank]
        values = np.asarray(self.values, dtype=float)
        if values.shape != expected:
            raise InvalidArgumentError(
                f"{self.rank} field values must have shape {expected}, got {values.shape}"
            )
        mag = _pointwise_mag(values, self.rank)
        if not np.all(np.isfinite(mag[self.grid.mask])):
            raise InvalidArgumentError("field values must be finite at admissible nodes")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.grid.dim


def _pointwise_mag(values: np.ndarray, rank: str) -> np.ndarray:
    if rank == "scalar":
        return np.abs(values)
    if rank == "vector":
        return np.sqrt(np.sum(values**2, axis=-1))
    return np.sqrt(np.sum(values**2, axis=(-2, -1)))


# ---------------------------------------------------------------------------
# stencils
# ---------------------------------------------------------------------------

def _sl(nd: int, axis: int, s) -> tuple:
    idx = [slice(None)] * nd
    idx[axis] = s
    return tuple(idx)


def _axis_d1(values: np.ndarray, axis: int, h: float, order: int) -> np.ndarray:
    """First derivative along ``axis``; NaN on the outermost layer."""
    n = values.shape[axis]
    nd = values.ndim
    out = np.full_like(values, np.nan)
    f = lambda s: values[_sl(nd, axis, s)]
    if order == 4 and n >= 5:
        out[_sl(nd, axis, slice(2, -2))] = (
            f(slice(0, -4)) - 8 * f(slice(1, -3)) + 8 * f(slice(3, -1)) - f(slice(4, None))
        ) / (12 * h)
        out[_sl(nd, axis, 1)] = (
            -3 * f(0) - 10 * f(1) + 18 * f(2) - 6 * f(3) + f(4)
        ) / (12 * h)
        out[_sl(nd, axis, n - 2)] = (
            3 * f(n - 1) + 10 * f(n - 2) - 18 * f(n - 3) + 6 * f(n - 4) - f(n - 5)
        ) / (12 * h)
    else:
        out[_sl(nd, axis, slice(1, -1))] = (f(slice(2, None)) - f(slice(0, -2))) / (2 * h)
    return out


def grid_gradient(f: GridField, order: int = 4) -> GridField:
    """Gradient of a scalar field as a vector field."""
    if f.rank != "scalar":
        raise InvalidArgumentError("grid_gradient expects a scalar field")
    h = f.grid.spacings
    comps = [_axis_d1(f.values, i, h[i], order) for i in range(f.dim)]
    values = np.stack(comps, axis=-1)
    return GridField(_narrow(f.grid, values, "vector"), "vector", values, f.time)


def grid_divergence_vector(f: GridField, order: int = 4) -> GridField:
    """Divergence of a vector field: sum_i d_i F_i."""
    if f.rank != "vector":
        raise InvalidArgumentError("grid_divergence_vector expects a vector field")
    h = f.grid.spacings
    out = np.zeros(f.grid.shape)
    for i in range(f.dim):
        out = out + _axis_d1(f.values[..., i], i, h[i], order)
    return GridField(_narrow(f.grid, out, "scalar"), "scalar", out, f.time)


def grid_divergence_matrix(T: GridField, order: int = 4) -> GridField:
    """Divergence of a matrix field, contracting the first index:
    ``(div T)_j = sum_i d_i T_ij``."""
    if T.rank != "matrix":
        raise InvalidArgumentError("grid_divergence_matrix expects a matrix field")
    h = T.grid.spacings
    d = T.dim
    out = np.zeros(T.grid.shape + (d,))
    for j in range(d):
        for i in range(d):
            out[..., j] = out[..., j] + _axis_d1(T.values[..., i, j], i, h[i], order)
    return GridField(_narrow(T.grid, out, "vector"), "vector", out, T.time)


def _narrow(grid: SpatialGrid, values: np.ndarray, rank: str) -> SpatialGrid:
    """Restrict the mask to nodes where the computed values are finite."""
    finite = np.isfinite(_pointwise_mag(values, rank))
    return grid.with_mask(grid.mask & finite)


def _check_triple(fields, rank: str):
    a, b, c = fields
    for f in fields:
        if f.rank != rank:
            raise InvalidArgumentError(f"expected {rank} fields")
    if not (a.grid.same_axes(b.grid) and a.grid.same_axes(c.grid)):
        raise InvalidArgumentError("time-slice fields must share one spatial grid")


def time_derivative(f_minus: GridField, f_center: GridField, f_plus: GridField, h_t: float) -> GridField:
    """Central time derivative from slices at t-h_t, t, t+h_t."""
    _check_triple((f_minus, f_center, f_plus), f_center.rank)
    values = (f_plus.values - f_minus.values) / (2 * h_t)
    grid = f_center.grid.with_mask(f_minus.grid.mask & f_center.grid.mask & f_plus.grid.mask)
    return GridField(_narrow(grid, values, f_center.rank), f_center.rank, values, f_center.time)


def time_derivative_one_sided(
    f0: GridField, f1: GridField, f2: GridField, h_t: float, forward: bool = True
) -> GridField:
    """Second-order one-sided time derivative at the edge slice ``f0``.

    ``forward=True`` reads slices at t, t+h_t, t+2h_t; otherwise at
    t, t-h_t, t-2h_t.  Intended for t in {0, 1} where no centered triple
    exists; callers should flag the lower accuracy.
    """
    _check_triple((f0, f1, f2), f0.rank)
    sign = 1.0 if forward else -1.0
    values = sign * (-3 * f0.values + 4 * f1.values - f2.values) / (2 * h_t)
    grid = f0.grid.with_mask(f0.grid.mask & f1.grid.mask & f2.grid.mask)
    return GridField(_narrow(grid, values, f0.rank), f0.rank, values, f0.time)


def material_derivative(
    v_minus: GridField, v_center: GridField, v_plus: GridField, h_t: float, order: int = 4
) -> GridField:
    """D_t v = time derivative of v plus the advective term (v . grad) v."""
    _check_triple((v_minus, v_center, v_plus), "vector")
    dtv = time_derivative(v_minus, v_center, v_plus, h_t)
    h = v_center.grid.spacings
    d = v_center.dim
    jac = np.empty(v_center.grid.shape + (d, d))  # jac[..., i, j] = d_i v_j
    for i in range(d):
        jac[..., i, :] = _axis_d1(v_center.values, i, h[i], order)
    adv = np.einsum("...i,...ij->...j", v_center.values, jac)
    values = dtv.values + adv
    grid = v_center.grid.with_mask(dtv.grid.mask)
    return GridField(_narrow(grid, values, "vector"), "vector", values, v_center.time)


# ---------------------------------------------------------------------------
# residual reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResidualReport:
    """A residual field with its masked norms.

    ``relative`` is ``rms / max(reference, 1e-30)`` where ``reference`` is the
    rms of the operation's scale field over the same mask.
    """

    residual: GridField
    max_abs: float
    rms: float
    reference: float
    relative: float
    n_nodes: int
    verdict: str | None = None


def _report(values, rank, grid, ref_mag, time, verdict=None) -> ResidualReport:
    mag = _pointwise_mag(values, rank)
    valid = grid.mask & np.isfinite(mag) & np.isfinite(ref_mag)
    if not np.any(valid):
        raise InvalidGridError("no admissible nodes left for residual norms")
    max_abs = float(mag[valid].max())
    rms = float(np.sqrt(np.mean(mag[valid] ** 2)))
    reference = float(np.sqrt(np.mean(ref_mag[valid] ** 2)))
    relative = rms / max(reference, _REL_FLOOR)
    res_field = GridField(grid.with_mask(valid), rank, values, time)
    return ResidualReport(
        residual=res_field,
        max_abs=max_abs,
        rms=rms,
        reference=reference,
        relative=relative,
        n_nodes=int(valid.sum()),
        verdict=verdict,
    )


def field_norms(f: GridField, reference: np.ndarray | None = None) -> dict:
    """Masked max/rms of a field, and rms relative to a reference magnitude
    array (same grid shape) when given."""
    mag = _pointwise_mag(f.values, f.rank)
    valid = f.grid.mask & np.isfinite(mag)
    if reference is not None:
        valid = valid & np.isfinite(reference)
    if not np.any(valid):
        raise InvalidGridError("no admissible nodes for field norms")
    out = {
        "max_abs": float(mag[valid].max()),
        "rms": float(np.sqrt(np.mean(mag[valid] ** 2))),
        "n_nodes": int(valid.sum()),
    }
    if reference is not None:
        ref = float(np.sqrt(np.mean(np.asarray(reference)[valid] ** 2)))
        out["reference"] = ref
        out["relative"] = out["rms"] / max(ref, _REL_FLOOR)
    return out


def momentum_residual(
    rho_triple, v_triple, Sigma: GridField, a: GridField, h_t: float, order: int = 4
) -> ResidualReport:
    """Residual of d_t(rho v) + div(rho Sigma) - rho a.

    The reference scale is rho (|a| + |v| per unit time) at the center slice.
    """
    _check_triple(rho_triple, "scalar")
    _check_triple(v_triple, "vector")
    rho_c, v_c = rho_triple[1], v_triple[1]
    if Sigma.rank != "matrix" or a.rank != "vector":
        raise InvalidArgumentError("Sigma must be a matrix field and a a vector field")
    if not (rho_c.grid.same_axes(Sigma.grid) and rho_c.grid.same_axes(a.grid)):
        raise InvalidArgumentError("all fields must share one spatial grid")

    mom = [
        GridField(
            r.grid.with_mask(r.grid.mask & v.grid.mask),
            "vector",
            r.values[..., None] * v.values,
            r.time,
        )
        for r, v in zip(rho_triple, v_triple)
    ]
    dt_mom = time_derivative(mom[0], mom[1], mom[2], h_t)
    rho_sigma = GridField(
        Sigma.grid.with_mask(Sigma.grid.mask & rho_c.grid.mask),
        "matrix",
        rho_c.values[..., None, None] * Sigma.values,
        Sigma.time,
    )
    div = grid_divergence_matrix(rho_sigma, order)
    values = dt_mom.values + div.values - rho_c.values[..., None] * a.values

    ref_mag = rho_c.values * (
        _pointwise_mag(a.values, "vector") + _pointwise_mag(v_c.values, "vector")
    )
    grid = rho_c.grid.with_mask(
        rho_c.grid.mask & v_c.grid.mask & Sigma.grid.mask & a.grid.mask & dt_mom.grid.mask
    )
    return _report(values, "vector", grid, ref_mag, rho_c.time)


def balance_residual(
    rho: GridField, Pi: GridField, a: GridField, order: int = 4, tolerance: float = 1e-3
) -> ResidualReport:
    """Residual of div(rho Pi) - rho a at one time slice.

    Relative norm is measured against rms of rho |a|; verdict is
    ``straight-compatible`` when the relative rms is within ``tolerance``.
    """
    if rho.rank != "scalar" or Pi.rank != "matrix" or a.rank != "vector":
        raise InvalidArgumentError("balance_residual expects (scalar, matrix, vector) fields")
    if not (rho.grid.same_axes(Pi.grid) and rho.grid.same_axes(a.grid)):
        raise InvalidArgumentError("fields must share one spatial grid")
    rho_pi = GridField(
        Pi.grid.with_mask(Pi.grid.mask & rho.grid.mask),
        "matrix",
        rho.values[..., None, None] * Pi.values,
        Pi.time,
    )
    div = grid_divergence_matrix(rho_pi, order)
    values = div.values - rho.values[..., None] * a.values
    ref_mag = rho.values * _pointwise_mag(a.values, "vector")
    grid = rho.grid.with_mask(rho.grid.mask & Pi.grid.mask & a.grid.mask)
    rep = _report(values, "vector", grid, ref_mag, rho.time)
    verdict = "straight-compatible" if rep.relative <= tolerance else "not-straight-compatible"
    return ResidualReport(
        rep.residual, rep.max_abs, rep.rms, rep.reference, rep.relative, rep.n_nodes, verdict
    )


def continuity_residual(rho_triple, v_triple, h_t: float, order: int = 4) -> ResidualReport:
    """Residual of d_t rho + div(rho v); reference scale is rho per unit time."""
    _check_triple(rho_triple, "scalar")
    _check_triple(v_triple, "vector")
    rho_c, v_c = rho_triple[1], v_triple[1]
    dt_rho = time_derivative(*rho_triple, h_t=h_t)
    flux = GridField(
        rho_c.grid.with_mask(rho_c.grid.mask & v_c.grid.mask),
        "vector",
        rho_c.values[..., None] * v_c.values,
        rho_c.time,
    )
    div = grid_divergence_vector(flux, order)
    values = dt_rho.values + div.values
    grid = rho_c.grid.with_mask(rho_c.grid.mask & v_c.grid.mask & dt_rho.grid.mask)
    return _report(values, "scalar", grid, rho_c.values, rho_c.time)


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def grid_field_to_csv(field: GridField) -> str:
    """One row per node: coordinates, then value components (C order).

    Inadmissible nodes keep whatever is stored, typically ``nan`` sentinels
    for estimated fields.
    """
    d = field.dim
    coords = field.grid.points()
    if field.rank == "scalar":
        comp_names = ["value"]
        flat = field.values.reshape(-1, 1)
    elif field.rank == "vector":
        comp_names = [f"v{j}" for j in range(d)]
        flat = field.values.reshape(-1, d)
    else:
        comp_names = [f"m{i}{j}" for i in range(d) for j in range(d)]
        flat = field.values.reshape(-1, d * d)
    buf = io.StringIO()
    buf.write(",".join([f"x{i}" for i in range(d)] + comp_names) + "\n")
    for row_xy, row_val in zip(coords, flat):
        cells = [repr(float(c)) for c in row_xy] + [repr(float(c)) for c in row_val]
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()
