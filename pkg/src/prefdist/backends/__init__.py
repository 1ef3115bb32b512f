"""Backend selection for the hot training kernel.

Two interchangeable implementations of ``loss_and_grad`` exist: a compiled
Cython kernel (``_native``) and a pure-NumPy fallback (``pure``). The native
one is used when importable; set ``PREFDIST_BACKEND=pure`` or ``native`` to
force a choice (forcing ``native`` raises if the extension is missing).
"""

import os


def _load():
    choice = os.environ.get("PREFDIST_BACKEND", "auto")
    if choice not in ("auto", "native", "pure"):
        raise RuntimeError(f"PREFDIST_BACKEND must be auto|native|pure, got {choice!r}")
    if choice in ("auto", "native"):
        try:
            from . import _native as impl
            return impl, "native"
        except ImportError:
            if choice == "native":
                raise
    from . import pure as impl
    return impl, "pure"


_impl, BACKEND_NAME = _load()

loss_and_grad = _impl.loss_and_grad


def get_backend(name: str):
    """Return a specific backend module by name (for tests and benchmarks)."""
    if name == "pure":
        from . import pure
        return pure
    if name == "native":
        from . import _native
        return _native
    raise ValueError(f"unknown backend {name!r}")
