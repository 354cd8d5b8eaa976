"""Hot convolution kernels with backend selection at import.

The compiled Cython backend is used when available; set INSTRUCTPAINT_PURE=1
to force the pure-numpy fallback. `BACKEND` names the active one.
"""

import os

from . import _pyref

conv_out_size = _pyref.conv_out_size

if os.environ.get("INSTRUCTPAINT_PURE", "0") == "1":
    _impl = _pyref
    BACKEND = "pure"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _pyref
        BACKEND = "pure"

im2col = _impl.im2col
col2im = _impl.col2im

__all__ = ["im2col", "col2im", "conv_out_size", "BACKEND"]
