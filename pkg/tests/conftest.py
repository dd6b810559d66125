"""Shared specs and expensive session-scoped ensembles.

The four canonical processes used throughout:

* affine_det:   X_t = (1-t) X + t (2X),  X ~ N(0,1)        (deterministic, straight)
* affine_indep: X_t = (1-t) X + t Y,     X, Y ~ N(0,1) indep (curved)
* trig_indep:   X_t = cos(pi t/2) X + sin(pi t/2) Y, indep   (straight with a != 0)
* trig_det:     X_t = (cos + sin)(pi t/2) X, Y = X           (balance law fails)
"""

import numpy as np
import pytest

from straightflow import core


def gauss1(mean=0.0, var=1.0):
    return core.Gaussian(np.array([mean]), np.array([[var]]))


def make_spec(alpha_beta: str, coupling: core.CouplingSpec, dim: int = 1, latent: bool = False):
    if alpha_beta == "affine":
        a, b = core.affine_alpha(), core.affine_beta()
    else:
        a, b = core.trig_alpha(), core.trig_beta()
    g = core.bridge_gamma() if latent else None
    return core.ProcessSpec(a, b, coupling, dim, g)


@pytest.fixture(scope="session")
def affine_indep_spec():
    cpl = core.CouplingSpec("independent", gauss1(), gauss1())
    return make_spec("affine", cpl)


@pytest.fixture(scope="session")
def affine_det2x_spec():
    """T(x) = 2x between N(0,1) and N(0,4)."""
    amap = core.AffineMap(np.array([[2.0]]), np.array([0.0]))
    cpl = core.CouplingSpec("deterministic_map", gauss1(), gauss1(var=4.0), map=amap)
    return make_spec("affine", cpl)


@pytest.fixture(scope="session")
def trig_indep_spec():
    cpl = core.CouplingSpec("independent", gauss1(), gauss1())
    return make_spec("trig", cpl)


@pytest.fixture(scope="session")
def trig_det_identity_spec():
    """Y = X through the identity deterministic map."""
    amap = core.AffineMap(np.eye(1), np.zeros(1))
    cpl = core.CouplingSpec("deterministic_map", gauss1(), gauss1(), map=amap)
    return make_spec("trig", cpl)


@pytest.fixture(scope="session")
def latent_spec():
    cpl = core.CouplingSpec("independent", gauss1(), gauss1())
    return make_spec("affine", cpl, latent=True)


@pytest.fixture(scope="session")
def affine_ot_spec():
    """OT-map coupling N(0,1) -> N(2,4): T(x) = 2x + 2."""
    amap = core.AffineMap(np.array([[2.0]]), np.array([2.0]))
    cpl = core.CouplingSpec(
        "deterministic_map", gauss1(), core.Gaussian(np.array([2.0]), np.array([[4.0]])), map=amap
    )
    return make_spec("affine", cpl)


# time grid with nodes {0, 0.5, 1}: slices for t=0 and t=0.5 tests
@pytest.fixture(scope="session")
def grid3():
    return core.make_time_grid(2)


@pytest.fixture(scope="session")
def ens_affine_indep_200k(affine_indep_spec, grid3):
    return core.sample_paths(affine_indep_spec, 200_000, grid3, seed=11)


@pytest.fixture(scope="session")
def ens_trig_indep_200k(trig_indep_spec, grid3):
    return core.sample_paths(trig_indep_spec, 200_000, grid3, seed=12)


def head_ensemble(ensemble: core.PathEnsemble, n: int) -> core.PathEnsemble:
    """First-n view; valid because per-path streams are keyed by path index."""
    return core.PathEnsemble(
        ensemble.grid,
        ensemble.positions[:n],
        ensemble.velocities[:n],
        ensemble.accelerations[:n],
        ensemble.seed,
    )
