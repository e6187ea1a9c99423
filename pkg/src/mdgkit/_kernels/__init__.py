"""Kernel backend selection.

At import time we pick the compiled core if it is available, otherwise the
numpy fallback. ``MDGKIT_KERNELS`` overrides the choice: ``cython`` insists on
the extension (ImportError if missing), ``python`` forces the fallback,
``auto`` (default) prefers the extension.

Both backends satisfy one calling convention (arrays in, arrays out); the
compiled core works on flat views, so it is adapted here. ``active`` is the
namespace the graph layer imports.
"""

import os
from types import SimpleNamespace

from . import numpy_backend


def _adapt_core(core):
    """Bridge the flat-view signatures of the compiled core."""

    return SimpleNamespace(
        NAME=core.NAME,
        matmul=core.matmul,
        transpose=core.transpose,
        add=lambda a, b: core.add(a.ravel(), b.ravel(), a.shape),
        add_bias=core.add_bias,
        mul=lambda a, b: core.mul(a.ravel(), b.ravel(), a.shape),
        scale=lambda x, c: core.scale(x.ravel(), c, x.shape),
        relu=lambda x: core.relu(x.ravel(), x.shape),
        mask_pos=lambda ref, t: core.mask_pos(ref.ravel(), t.ravel(), t.shape),
        tanh=lambda x: core.tanh(x.ravel(), x.shape),
        exp=lambda x: core.exp(x.ravel(), x.shape),
        log_softmax=core.log_softmax,
        gather_rows=core.gather_rows,
        scatter_rows=core.scatter_rows,
        sum_all=lambda x: core.sum_all(x.ravel()),
        sum_axis0=core.sum_axis0,
        sum_axis1_keep=core.sum_axis1_keep,
        broadcast_cols=core.broadcast_cols,
        broadcast_rows=core.broadcast_rows,
        fill=core.fill,
        check_finite=lambda x: core.check_finite(x.ravel()),
    )


def load_backend(name="auto"):
    """Return the kernel namespace for ``name`` in {auto, cython, python}."""
    if name not in ("auto", "cython", "python"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "python":
        return numpy_backend
    try:
        from . import _core
    except ImportError:
        if name == "cython":
            raise
        return numpy_backend
    return _adapt_core(_core)


active = load_backend(os.environ.get("MDGKIT_KERNELS", "auto"))
