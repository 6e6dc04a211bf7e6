"""Warping-based iterative optical flow at desk scale.

Submodules are imported lazily so the CLI can pin BLAS thread counts via
environment variables before numpy is first loaded.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("autodiff", "flow_ops", "losses", "metrics", "model", "synth",
               "flow_io", "profiler", "checkpoint", "train", "cli")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
