"""Configuration-driven command-line front end.

Grammar::

    straightflow <simulate|fields|diagnose|verify|flow|sweep> --config PATH [flags]

Configs are JSON validated against :data:`CONFIG_SCHEMA` (unknown keys are
rejected).  Flags mirror config entries and take precedence.  Every run
writes a ``manifest.json`` (config hash, tool version, timestamp, seed,
output list) before any result file; result files are written atomically and
are byte-identical across re-runs with the same config and seed.

Exit codes: 0 success/consistent, 2 config error, 3 capability error,
4 theorem violated, 5 inconclusive.

``STRAIGHTFLOW_THREADS`` caps BLAS/OpenMP parallelism; it is applied before
the numerical modules are imported.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__ as _VERSION

__all__ = [
    "CONFIG_SCHEMA",
    "ExperimentConfig",
    "load_config",
    "config_hash",
    "main",
    "entrypoint",
]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CAPABILITY = 3
EXIT_VIOLATED = 4
EXIT_INCONCLUSIVE = 5

_VEC = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_MATRIX = {"type": "array", "items": _VEC, "minItems": 1}
_POS = {"type": "number", "exclusiveMinimum": 0}

_DISTRIBUTION = {
    "type": "object",
    "properties": {
        "family": {"enum": ["gaussian", "gaussian_mixture", "empirical"]},
        "mean": _VEC,
        "cov": _MATRIX,
        "weights": _VEC,
        "means": _MATRIX,
        "covs": {"type": "array", "items": _MATRIX, "minItems": 1},
        "samples": _MATRIX,
    },
    "required": ["family"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "properties": {
        "process": {
            "type": "object",
            "properties": {
                "coefficients": {"enum": ["affine", "trig", "latent"]},
                "dim": {"type": "integer", "minimum": 1},
                "coupling": {
                    "type": "object",
                    "properties": {
                        "kind": {
                            "enum": ["independent", "deterministic_map", "gaussian_joint"]
                        },
                        "mu0": _DISTRIBUTION,
                        "mu1": _DISTRIBUTION,
                        "map": {
                            "oneOf": [
                                {"const": "ot"},
                                {
                                    "type": "object",
                                    "properties": {"A": _MATRIX, "b": _VEC},
                                    "required": ["A", "b"],
                                    "additionalProperties": False,
                                },
                            ]
                        },
                        "joint": {
                            "type": "object",
                            "properties": {"mean": _VEC, "cov": _MATRIX},
                            "required": ["cov"],
                            "additionalProperties": False,
                        },
                    },
                    "required": ["kind"],
                    "additionalProperties": False,
                },
            },
            "required": ["coefficients", "dim", "coupling"],
            "additionalProperties": False,
        },
        "n": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "seeds": {
            "type": "array",
            "items": {"type": "integer", "minimum": 0},
            "minItems": 1,
        },
        "time_steps": {"type": "integer", "minimum": 1},
        "grid": {
            "type": "object",
            "properties": {
                "nodes_per_axis": {"type": "integer", "minimum": 3},
                "box": {
                    "oneOf": [
                        {"enum": ["oracle", "quantile"]},
                        {
                            "type": "array",
                            "items": {
                                "type": "array",
                                "items": {"type": "number"},
                                "minItems": 2,
                                "maxItems": 2,
                            },
                            "minItems": 1,
                        },
                    ]
                },
            },
            "additionalProperties": False,
        },
        "bandwidth": {"oneOf": [{"const": "silverman"}, _POS]},
        "density_floor": {"type": "number", "minimum": 0},
        "source": {"enum": ["oracle", "estimate"]},
        "time": {"type": "number", "minimum": 0, "maximum": 1},
        "time_nodes": {
            "type": "array",
            "items": {"type": "number", "minimum": 0, "maximum": 1},
            "minItems": 1,
        },
        "h_t": {
            "type": "object",
            "properties": {"analytic": _POS, "estimated": _POS},
            "additionalProperties": False,
        },
        "tolerances": {
            "type": "object",
            "properties": {
                "balance_relative": _POS,
                "material_max": _POS,
                "trace_ratio": _POS,
                "one_step": _POS,
                "chord": _POS,
            },
            "additionalProperties": False,
        },
        "flow": {
            "type": "object",
            "properties": {
                "scheme": {"enum": ["euler", "midpoint", "rk4"]},
                "steps": {"type": "integer", "minimum": 1},
                "reference_steps": {"type": "integer", "minimum": 1},
                "n_points": {"type": "integer", "minimum": 1},
                "points": _MATRIX,
            },
            "additionalProperties": False,
        },
        "output_dir": {"type": "string"},
    },
    "required": ["process", "n", "seed"],
    "additionalProperties": False,
}

_DEFAULTS = {
    "time_steps": 10,
    "grid": {"nodes_per_axis": 60, "box": "oracle"},
    "bandwidth": "silverman",
    "density_floor": 25.0,
    "source": "oracle",
    "time": 0.5,
    "time_nodes": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
    "h_t": {"analytic": 1e-5, "estimated": 1e-3},
    "tolerances": {
        "balance_relative": 1e-3,
        "material_max": 1e-3,
        "trace_ratio": 0.05,
        "one_step": 1e-6,
        "chord": 1e-6,
    },
    "flow": {"scheme": "rk4", "steps": 100, "reference_steps": 400, "n_points": 100},
    "output_dir": "out",
}


class ExperimentConfig:
    """Validated config with defaults applied; ``data`` is the merged dict and
    ``canonical`` the byte-exact serialization that is hashed."""

    def __init__(self, data: dict):
        self.data = data
        self.canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))

    def __getitem__(self, key):
        return self.data[key]

    def get(self, key, default=None):
        return self.data.get(key, default)


def _merge_defaults(data: dict, defaults: dict) -> dict:
    out = dict(data)
    for key, val in defaults.items():
        if key not in out:
            out[key] = val
        elif isinstance(val, dict) and isinstance(out[key], dict):
            out[key] = _merge_defaults(out[key], val)
    return out


def load_config(path) -> ExperimentConfig:
    """Parse and validate a config file; raises ConfigError on any problem."""
    import jsonschema

    from .errors import ConfigError

    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(
            f"config {path} is not valid JSON: line {err.lineno} column {err.colno}: {err.msg}"
        ) from err
    try:
        jsonschema.validate(data, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        field = ".".join(str(p) for p in err.absolute_path) or "(root)"
        raise ConfigError(f"config field {field}: {err.message}", field) from err
    return ExperimentConfig(_merge_defaults(data, _DEFAULTS))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.canonical.encode()).hexdigest()


# ---------------------------------------------------------------------------
# spec construction
# ---------------------------------------------------------------------------

def _build_distribution(block: dict):
    import numpy as np

    from . import core
    from .errors import ConfigError

    family = block["family"]
    if family == "gaussian":
        if "mean" not in block or "cov" not in block:
            raise ConfigError("gaussian distribution needs mean and cov", "mu")
        return core.Gaussian(np.array(block["mean"]), np.array(block["cov"]))
    if family == "gaussian_mixture":
        for key in ("weights", "means", "covs"):
            if key not in block:
                raise ConfigError(f"gaussian_mixture needs {key}", key)
        return core.GaussianMixture(
            np.array(block["weights"]), np.array(block["means"]), np.array(block["covs"])
        )
    if "samples" not in block:
        raise ConfigError("empirical distribution needs samples", "samples")
    return core.Empirical(np.array(block["samples"]))


def build_process_spec(cfg: ExperimentConfig):
    import numpy as np

    from . import core, gaussian
    from .errors import ConfigError

    proc = cfg["process"]
    cp = proc["coupling"]
    kind = cp["kind"]
    if kind == "gaussian_joint":
        if "joint" not in cp:
            raise ConfigError("gaussian_joint coupling needs a joint block", "coupling.joint")
        joint = cp["joint"]
        cov = np.array(joint["cov"])
        mean = np.array(joint.get("mean", [0.0] * cov.shape[0]))
        coupling = core.gaussian_joint_coupling(mean, cov)
    else:
        if "mu0" not in cp or "mu1" not in cp:
            raise ConfigError(f"{kind} coupling needs mu0 and mu1", "coupling.mu0")
        mu0 = _build_distribution(cp["mu0"])
        mu1 = _build_distribution(cp["mu1"])
        amap = None
        if kind == "deterministic_map":
            spec_map = cp.get("map")
            if spec_map == "ot":
                if not (isinstance(mu0, core.Gaussian) and isinstance(mu1, core.Gaussian)):
                    raise ConfigError(
                        "map rule 'ot' needs gaussian endpoint distributions", "coupling.map"
                    )
                amap = gaussian.gaussian_ot_map(mu0.mean, mu0.cov, mu1.mean, mu1.cov)
            elif isinstance(spec_map, dict):
                amap = core.AffineMap(np.array(spec_map["A"]), np.array(spec_map["b"]))
        coupling = core.CouplingSpec(kind, mu0, mu1, map=amap)

    tag = proc["coefficients"]
    if tag == "trig":
        alpha, beta, gamma = core.trig_alpha(), core.trig_beta(), None
    elif tag == "latent":
        alpha, beta, gamma = core.affine_alpha(), core.affine_beta(), core.bridge_gamma()
    else:
        alpha, beta, gamma = core.affine_alpha(), core.affine_beta(), None
    return core.ProcessSpec(alpha, beta, coupling, proc["dim"], gamma)


def build_gaussian_spec(cfg: ExperimentConfig):
    from . import gaussian

    return gaussian.from_process_spec(build_process_spec(cfg))


# ---------------------------------------------------------------------------
# output plumbing
# ---------------------------------------------------------------------------

def _atomic_write(path: Path, payload) -> None:
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    if isinstance(payload, bytes):
        tmp.write_bytes(payload)
    else:
        tmp.write_text(payload)
    os.replace(tmp, path)


def _json_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write_manifest(out_dir: Path, cfg: ExperimentConfig, outputs: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_hash": config_hash(cfg),
        "version": _VERSION,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "seed": cfg["seed"],
        "outputs": sorted(outputs),
    }
    _atomic_write(out_dir / "manifest.json", _json_text(manifest))


def _resolve_spatial_grid(cfg: ExperimentConfig, t: float, gspec=None, sample=None):
    import numpy as np

    from . import calculus, gaussian
    from .errors import ConfigError

    box = cfg["grid"]["box"]
    nodes = cfg["grid"]["nodes_per_axis"]
    if isinstance(box, list):
        bounds = [(float(lo), float(hi)) for lo, hi in box]
    elif box == "oracle":
        if gspec is None:
            raise ConfigError("grid.box 'oracle' needs a Gaussian-expressible process", "grid.box")
        bounds = gaussian.oracle_box(gspec, t)
    else:  # quantile
        if sample is None:
            raise ConfigError("grid.box 'quantile' needs sampled positions", "grid.box")
        lo = np.quantile(sample, 0.01, axis=0)
        hi = np.quantile(sample, 0.99, axis=0)
        bounds = list(zip(lo.tolist(), hi.tolist()))
    return calculus.make_spatial_grid(bounds, nodes)


def _kernel_config(cfg: ExperimentConfig):
    from . import estimate

    return estimate.KernelConfig(
        bandwidth=cfg["bandwidth"], density_floor=cfg["density_floor"]
    )


def _grid_for_estimate(cfg: ExperimentConfig, t: float, sample):
    """Spatial grid for estimated fields; an 'oracle' box falls back to the
    sample quantile box when the process is not Gaussian-expressible."""
    from .errors import CapabilityError

    if cfg["grid"]["box"] == "oracle":
        try:
            return _resolve_spatial_grid(cfg, t, gspec=build_gaussian_spec(cfg))
        except CapabilityError:
            import numpy as np

            from . import calculus

            lo = np.quantile(sample, 0.01, axis=0)
            hi = np.quantile(sample, 0.99, axis=0)
            return calculus.make_spatial_grid(
                list(zip(lo.tolist(), hi.tolist())), cfg["grid"]["nodes_per_axis"]
            )
    return _resolve_spatial_grid(cfg, t, sample=sample)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, out_dir: Path) -> int:
    from . import core

    spec = build_process_spec(cfg)
    grid = core.make_time_grid(cfg["time_steps"])
    _write_manifest(out_dir, cfg, ["ensemble.sflw"])
    ensemble = core.sample_paths(spec, cfg["n"], grid, cfg["seed"])
    core.save_ensemble(ensemble, out_dir / "ensemble.sflw")
    print(
        f"simulate: wrote {out_dir / 'ensemble.sflw'} "
        f"(N={ensemble.n_paths}, K={grid.n_nodes}, d={ensemble.dim})"
    )
    return EXIT_OK


def _field_csv_names(names):
    return [f"fields_{name.lower()}.csv" for name in names]


def cmd_fields(cfg: ExperimentConfig, out_dir: Path, source: str, t: float) -> int:
    from . import calculus, core, estimate

    names = ["rho", "v", "a", "Sigma", "Pi"]
    _write_manifest(out_dir, cfg, _field_csv_names(names))
    if source == "oracle":
        gspec = build_gaussian_spec(cfg)
        from . import gaussian

        grid = _resolve_spatial_grid(cfg, t, gspec=gspec)
        fields = gaussian.fields_on_grid(gspec, t, grid)
    else:
        spec = build_process_spec(cfg)
        endpoints = core.sample_endpoints(
            spec.coupling, cfg["n"], cfg["seed"], with_latent=spec.gamma is not None
        )
        X, V, A = core.slice_state(spec, endpoints, t)
        grid = _grid_for_estimate(cfg, t, X)
        fields, _, _ = estimate.fields_on_grid(X, V, A, grid, _kernel_config(cfg), t)
    for name in names:
        _atomic_write(
            out_dir / f"fields_{name.lower()}.csv", calculus.grid_field_to_csv(fields[name])
        )
    print(f"fields: wrote {len(names)} CSVs to {out_dir} (source={source}, t={t:g})")
    return EXIT_OK


def _oracle_field_triples(gspec, t, h_t, grid):
    from . import gaussian

    f_m = gaussian.fields_on_grid(gspec, t - h_t, grid)
    f_c = gaussian.fields_on_grid(gspec, t, grid)
    f_p = gaussian.fields_on_grid(gspec, t + h_t, grid)
    return f_m, f_c, f_p


def _estimate_field_triples(spec, cfg, t, h_t, grid):
    from . import core, estimate

    endpoints = core.sample_endpoints(
        spec.coupling, cfg["n"], cfg["seed"], with_latent=spec.gamma is not None
    )
    kcfg = _kernel_config(cfg)
    out = []
    for tt in (t - h_t, t, t + h_t):
        X, V, A = core.slice_state(spec, endpoints, tt)
        fields, _, _ = estimate.fields_on_grid(X, V, A, grid, kcfg, tt)
        out.append(fields)
    return out


def cmd_diagnose(cfg: ExperimentConfig, out_dir: Path, t: float) -> int:
    import numpy as np

    from . import calculus, core
    from .errors import ConfigError

    source = cfg["source"]
    outputs = [
        "diagnostics.json",
        "residual_continuity.csv",
        "residual_momentum.csv",
        "residual_balance.csv",
        "residual_material.csv",
    ]
    _write_manifest(out_dir, cfg, outputs)

    if source == "oracle":
        h_t = cfg["h_t"]["analytic"]
        order = 4
        gspec = build_gaussian_spec(cfg)
        if not (h_t <= t <= 1.0 - h_t):
            raise ConfigError("diagnose time must keep t +- h_t inside [0, 1]", "time")
        grid = _resolve_spatial_grid(cfg, t, gspec=gspec)
        f_m, f_c, f_p = _oracle_field_triples(gspec, t, h_t, grid)
    else:
        h_t = cfg["h_t"]["estimated"]
        order = 2
        spec = build_process_spec(cfg)
        if not (h_t <= t <= 1.0 - h_t):
            raise ConfigError("diagnose time must keep t +- h_t inside [0, 1]", "time")
        endpoints = core.sample_endpoints(
            spec.coupling, cfg["n"], cfg["seed"], with_latent=spec.gamma is not None
        )
        X, _, _ = core.slice_state(spec, endpoints, t)
        grid = _grid_for_estimate(cfg, t, X)
        f_m, f_c, f_p = _estimate_field_triples(spec, cfg, t, h_t, grid)

    rho3 = (f_m["rho"], f_c["rho"], f_p["rho"])
    v3 = (f_m["v"], f_c["v"], f_p["v"])
    cont = calculus.continuity_residual(rho3, v3, h_t, order=order)
    mom = calculus.momentum_residual(rho3, v3, f_c["Sigma"], f_c["a"], h_t, order=order)
    bal = calculus.balance_residual(
        f_c["rho"], f_c["Pi"], f_c["a"], order=order,
        tolerance=cfg["tolerances"]["balance_relative"],
    )
    dtv = calculus.material_derivative(v3[0], v3[1], v3[2], h_t, order=order)
    v_mag = np.sqrt(np.sum(f_c["v"].values ** 2, axis=-1))
    mat = calculus.field_norms(dtv, reference=v_mag)

    def norms(rep):
        return {
            "max_abs": rep.max_abs,
            "rms": rep.rms,
            "reference": rep.reference,
            "relative": rep.relative,
            "n_nodes": rep.n_nodes,
        }

    report = {
        "provenance": {
            "seed": cfg["seed"],
            "config_hash": config_hash(cfg),
            "version": _VERSION,
            "source": source,
            "time": t,
            "h_t": h_t,
            "stencil_order": order,
        },
        "continuity": norms(cont),
        "momentum": norms(mom),
        "balance": {**norms(bal), "verdict": bal.verdict},
        "material": mat,
    }
    _atomic_write(out_dir / "diagnostics.json", _json_text(report))
    _atomic_write(out_dir / "residual_continuity.csv", calculus.grid_field_to_csv(cont.residual))
    _atomic_write(out_dir / "residual_momentum.csv", calculus.grid_field_to_csv(mom.residual))
    _atomic_write(out_dir / "residual_balance.csv", calculus.grid_field_to_csv(bal.residual))
    _atomic_write(out_dir / "residual_material.csv", calculus.grid_field_to_csv(dtv))
    print(
        "diagnose: continuity rel={:.3g} momentum rel={:.3g} balance rel={:.3g} ({})".format(
            cont.relative, mom.relative, bal.relative, bal.verdict
        )
    )
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, out_dir: Path, theorem: str) -> int:
    from . import core, verify

    _write_manifest(out_dir, cfg, [f"theorem_{theorem}.json"])
    spec = build_process_spec(cfg)
    if theorem == "affine":
        report = verify.affine_straightness_check(
            spec, cfg["n"], cfg["seed"], time_nodes=tuple(cfg["time_nodes"]),
            cfg=_kernel_config(cfg),
        )
    else:
        grid = core.make_time_grid(cfg["time_steps"])
        ensemble = core.sample_paths(spec, cfg["n"], grid, cfg["seed"])
        if theorem == "geometric":
            report = verify.geometric_report(
                ensemble, grid.index_of(cfg["time"]), density_floor=cfg["density_floor"]
            )
        else:
            report = verify.determinism_detector(
                ensemble,
                {"ratio": cfg["tolerances"]["trace_ratio"], "density_floor": cfg["density_floor"]},
            )
    _atomic_write(out_dir / f"theorem_{theorem}.json", report.to_json())
    print(f"verify[{theorem}]: verdict={report.verdict}")
    return {
        "consistent": EXIT_OK,
        "violated": EXIT_VIOLATED,
        "inconclusive": EXIT_INCONCLUSIVE,
    }[report.verdict]


def cmd_flow(
    cfg: ExperimentConfig,
    out_dir: Path,
    points_file: str | None,
    use_grid: bool,
    scheme: str,
    steps: int,
) -> int:
    import numpy as np

    from . import core, estimate, flow
    from .errors import ConfigError

    _write_manifest(out_dir, cfg, ["trajectories.csv", "straightness.json"])
    spec = build_process_spec(cfg)
    source = cfg["source"]
    if source == "oracle":
        gspec = build_gaussian_spec(cfg)
        oracle = flow.analytic_velocity_oracle(gspec)
    else:
        grid_t = core.make_time_grid(max(cfg["time_steps"], 10))
        ensemble = core.sample_paths(spec, cfg["n"], grid_t, cfg["seed"])
        oracle = flow.kernel_velocity_oracle(ensemble, _kernel_config(cfg))

    if points_file is not None:
        pts = np.loadtxt(points_file, delimiter=",", ndmin=2)
        if pts.shape[1] != spec.dim:
            raise ConfigError(
                f"points file has dimension {pts.shape[1]}, process has {spec.dim}", "points"
            )
    elif use_grid:
        gspec2 = build_gaussian_spec(cfg) if source == "oracle" else None
        sample = None
        if gspec2 is None:
            endpoints = core.sample_endpoints(
                spec.coupling, cfg["n"], cfg["seed"], with_latent=spec.gamma is not None
            )
            sample, _, _ = core.slice_state(spec, endpoints, 0.0)
        sgrid = _resolve_spatial_grid(cfg, 0.0, gspec=gspec2, sample=sample)
        pts = sgrid.points()[sgrid.mask.ravel()]
    else:
        pts = spec.coupling.mu0.draw(core.aux_rng(cfg["seed"], 4), cfg["flow"]["n_points"])

    tgrid = core.make_time_grid(steps)
    result = flow.flow_map(oracle, pts, tgrid, scheme)
    one_step = flow.one_step_error(oracle, pts, reference_steps=cfg["flow"]["reference_steps"])

    lines = ["point," + "t," + ",".join(f"x{i}" for i in range(spec.dim))]
    per_point = []
    for i, traj in enumerate(result.trajectories):
        if traj is None:
            per_point.append({"point": i, "error": str(dict(result.errors)[i])})
            continue
        entry = {"point": i, "one_step_error": float(one_step.errors[i])}
        if traj.grid.n_nodes >= 3:
            dev = flow.straightness_deviation(traj)
            entry["chord_dev"] = dev.chord_dev
            entry["second_diff"] = dev.second_diff
        per_point.append(entry)
        for k, t in enumerate(traj.grid.nodes):
            cells = [str(i), repr(float(t))] + [repr(float(c)) for c in traj.states[k]]
            lines.append(",".join(cells))
    _atomic_write(out_dir / "trajectories.csv", "\n".join(lines) + "\n")
    summary = {
        "provenance": {
            "seed": cfg["seed"],
            "config_hash": config_hash(cfg),
            "version": _VERSION,
            "scheme": scheme,
            "steps": steps,
            "source": source,
        },
        "one_step": {"max": one_step.max_error, "rms": one_step.rms_error},
        "points": per_point,
        "n_failed": len(result.errors),
    }
    _atomic_write(out_dir / "straightness.json", _json_text(summary))
    print(
        f"flow: {len(pts)} points, scheme={scheme}, steps={steps}, "
        f"one_step max={one_step.max_error:.3g}"
    )
    return EXIT_OK


_SWEEP_PARAMS = {"n": int, "seed": int, "bandwidth": float, "nodes_per_axis": int, "time": float}


def _sweep_metrics(cfg: ExperimentConfig) -> dict:
    import numpy as np

    from . import core, estimate, gaussian, verify

    spec = build_process_spec(cfg)
    gspec = build_gaussian_spec(cfg)
    t = cfg["time"]
    endpoints = core.sample_endpoints(
        spec.coupling, cfg["n"], cfg["seed"], with_latent=spec.gamma is not None
    )
    X, V, _ = core.slice_state(spec, endpoints, t)
    mom = gaussian.marginal_moments(gspec, t)
    sd = np.sqrt(np.diag(mom.cov))
    pts = np.stack(
        [np.linspace(m - 2 * s, m + 2 * s, 9) for m, s in zip(mom.mean, sd)], axis=1
    )
    kcfg = _kernel_config(cfg)
    h = estimate.resolve_bandwidth(kcfg, X)
    vhat, _ = estimate.nw_regress(X, V, pts, h)
    v_true = gaussian.velocity_at(gspec, t, pts)
    v_rmse = float(np.sqrt(np.mean(np.sum((vhat - v_true) ** 2, axis=1))))
    tp = verify.tr_pi_moment(X, V, core.aux_rng(cfg["seed"], 5), m_eval=2048)
    return {"v_rmse": v_rmse, "tr_pi": tp.value}


def cmd_sweep(cfg: ExperimentConfig, out_dir: Path, param: str, values: list[str]) -> int:
    from .errors import ConfigError

    if param not in _SWEEP_PARAMS:
        raise ConfigError(
            f"unknown sweep parameter {param!r}; known: {sorted(_SWEEP_PARAMS)}", "param"
        )
    if not values:
        raise ConfigError("sweep needs a nonempty values list", "values")
    caster = _SWEEP_PARAMS[param]
    try:
        parsed = [caster(v) for v in values]
    except ValueError as err:
        raise ConfigError(f"sweep value not a {caster.__name__}: {err}", "values") from err

    _write_manifest(out_dir, cfg, ["sweep.csv"])
    seeds = cfg.get("seeds") or [cfg["seed"]]
    rows = ["param,value,seed,metric,metric_value"]
    for value in parsed:
        sweep_seeds = [value] if param == "seed" else seeds
        for seed in sweep_seeds:
            data = json.loads(cfg.canonical)
            data["seed"] = int(seed)
            if param == "n":
                data["n"] = int(value)
            elif param == "bandwidth":
                data["bandwidth"] = float(value)
            elif param == "nodes_per_axis":
                data.setdefault("grid", {})["nodes_per_axis"] = int(value)
            elif param == "time":
                data["time"] = float(value)
            run_cfg = ExperimentConfig(_merge_defaults(data, _DEFAULTS))
            metrics = _sweep_metrics(run_cfg)
            value_cell = "" if param == "seed" else repr(float(value))
            for metric in ("v_rmse", "tr_pi"):
                rows.append(
                    f"{param},{value_cell},{seed},{metric},{repr(float(metrics[metric]))}"
                )
    _atomic_write(out_dir / "sweep.csv", "\n".join(rows) + "\n")
    print(f"sweep: wrote {out_dir / 'sweep.csv'} ({len(rows) - 1} rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="straightflow",
        description="Numerical laboratory for straight-line probability flows",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to JSON experiment config")
        return p

    add("simulate", "sample a path ensemble and write the binary cache")
    p = add("fields", "tabulate rho/v/a/Sigma/Pi on the grid as CSVs")
    p.add_argument("--source", choices=["oracle", "estimate"], default=None)
    p.add_argument("--time", type=float, default=None)
    p = add("diagnose", "continuity/momentum/balance/material residual report")
    p.add_argument("--time", type=float, default=None)
    p = add("verify", "run a theorem harness")
    p.add_argument("--theorem", choices=["affine", "geometric", "determinism"], required=True)
    p = add("flow", "integrate the probability-flow ODE and measure straightness")
    p.add_argument("--points", default=None, help="CSV file of starting points")
    p.add_argument("--grid", action="store_true", help="start from the masked grid nodes")
    p.add_argument("--scheme", choices=["euler", "midpoint", "rk4"], default=None)
    p.add_argument("--steps", type=int, default=None)
    p = add("sweep", "cross product of a parameter sweep, long-format CSV")
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    return parser


def _apply_thread_cap() -> None:
    cap = os.environ.get("STRAIGHTFLOW_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    from .errors import CapabilityError, ConfigError, InvalidArgumentError, InvalidCouplingError

    try:
        cfg = load_config(args.config)
        out_dir = Path(cfg["output_dir"])
        if args.command == "simulate":
            return cmd_simulate(cfg, out_dir)
        if args.command == "fields":
            return cmd_fields(
                cfg, out_dir, args.source or cfg["source"],
                cfg["time"] if args.time is None else args.time,
            )
        if args.command == "diagnose":
            return cmd_diagnose(cfg, out_dir, cfg["time"] if args.time is None else args.time)
        if args.command == "verify":
            return cmd_verify(cfg, out_dir, args.theorem)
        if args.command == "flow":
            return cmd_flow(
                cfg, out_dir, args.points, args.grid,
                args.scheme or cfg["flow"]["scheme"],
                args.steps or cfg["flow"]["steps"],
            )
        return cmd_sweep(cfg, out_dir, args.param, [v for v in args.values.split(",") if v])
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvalidArgumentError, InvalidCouplingError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except CapabilityError as err:
        print(f"capability error: {err}", file=sys.stderr)
        return EXIT_CAPABILITY


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
