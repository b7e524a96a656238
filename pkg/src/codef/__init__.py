"""Video fitting with a canonical content field and a temporal deformation field.

Submodules are imported on first attribute access so that ``codef.cli`` can
cap thread pools before the numeric libraries load.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("cli", "fields", "flow", "grid_encoding", "images", "mlp", "synth", "toolkit", "trainer")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


__all__ = list(_SUBMODULES)
