"""Kernel backend selection.

The default splits the work by measured strength (benchmarks/bench_kernels.py):
convolution runs on the numpy path, whose im2col matmul lands in BLAS and
beats the compiled loops severalfold, while the compiled pooling kernels win
by a similar factor and are used when importable. FRAMEPROMPT_BACKEND=numpy
or =cython forces every kernel onto one implementation (forcing cython
without the built extension is an import error).
"""

import os

from . import _ref

_forced = os.environ.get("FRAMEPROMPT_BACKEND", "").strip().lower()

if _forced == "numpy":
    _conv = _pool = _ref
elif _forced == "cython":
    from . import _fast

    _conv = _pool = _fast
else:
    _conv = _ref
    try:
        from . import _fast as _pool
    except ImportError:
        _pool = _ref

BACKEND = _conv.BACKEND if _conv is _pool else "mixed"
conv2d_forward = _conv.conv2d_forward
conv2d_backward_input = _conv.conv2d_backward_input
conv2d_backward_weight = _conv.conv2d_backward_weight
maxpool2_forward = _pool.maxpool2_forward
maxpool2_backward = _pool.maxpool2_backward
