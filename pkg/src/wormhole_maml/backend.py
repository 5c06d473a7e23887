"""Kernel backend selection.

The compiled extension is preferred when present; the pure-Python module is
a drop-in replacement. ``WORMHOLE_MAML_BACKEND`` forces the choice:

    auto      use compiled if importable, else pure (default)
    compiled  require the extension, fail loudly if missing
    pure      skip the extension

Both backends are bit-compatible; ``benchmarks/bench_backends.py`` compares
their speed.
"""

import os

_choice = os.environ.get("WORMHOLE_MAML_BACKEND", "auto").lower()
if _choice not in ("auto", "compiled", "pure"):
    raise RuntimeError(
        f"WORMHOLE_MAML_BACKEND must be auto, compiled or pure (got {_choice!r})"
    )

kernels = None
if _choice in ("auto", "compiled"):
    try:
        from . import _ckernels as kernels  # type: ignore[no-redef]
    except ImportError:
        if _choice == "compiled":
            raise
if kernels is None:
    from . import _pykernels as kernels  # type: ignore[no-redef]

BACKEND_NAME: str = kernels.BACKEND_NAME
