"""Kernel backend selection.

The compiled extension (`latentshift._kernels`, Cython) is preferred;
the numpy module (`latentshift._kernels_py`) is the fallback. Selection
happens once at import and can be forced with the environment variable
LATENT_SHIFT_BACKEND set to "compiled", "python", or "auto" (default).
"""

import os

from latentshift import _kernels_py

_requested = os.environ.get("LATENT_SHIFT_BACKEND", "auto").lower()

if _requested not in ("auto", "compiled", "python"):
    raise RuntimeError(
        f"LATENT_SHIFT_BACKEND must be auto, compiled or python, got {_requested!r}"
    )

if _requested == "python":
    kernels = _kernels_py
else:
    try:
        from latentshift import _kernels as _compiled
        kernels = _compiled
    except ImportError:
        if _requested == "compiled":
            raise RuntimeError(
                "LATENT_SHIFT_BACKEND=compiled but the extension is not built; "
                "run `pip install -e . --no-build-isolation`"
            )
        kernels = _kernels_py

ACTIVE_BACKEND = kernels.BACKEND_NAME


def available_backends():
    """Names of the backends importable in this environment."""
    names = ["python"]
    try:
        from latentshift import _kernels  # noqa: F401
        names.insert(0, "compiled")
    except ImportError:
        pass
    return names


def get_backend(name):
    """Fetch a backend module by name, independent of the active one."""
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from latentshift import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
