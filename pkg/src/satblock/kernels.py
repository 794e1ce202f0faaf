"""Backend selection for the hot kernels.

The compiled extension is used when it imports; setting
``SATBLOCK_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("SATBLOCK_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pykernels

sample_points = _impl.sample_points
sample_points_grad = _impl.sample_points_grad
lsm_accumulate = _impl.lsm_accumulate
lsm_jacobian = _pykernels.lsm_jacobian
