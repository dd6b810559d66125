"""straightflow: a numerical laboratory for straight-line probability flows
of stochastic interpolant processes.

Submodules are imported lazily so the CLI can apply the STRAIGHTFLOW_THREADS
cap before any numerical library loads.
"""

__version__ = "0.1.0"

_SUBMODULES = ("core", "gaussian", "estimate", "calculus", "flow", "verify", "cli", "errors")


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
