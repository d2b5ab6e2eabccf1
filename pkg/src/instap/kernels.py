"""Hot-loop kernels with backend selection at import.

The compiled extension (``instap._kernels``) is used when it was built;
otherwise the numpy fallback in ``instap._kernels_py`` is used.  Set
``INSTAP_PURE_PYTHON=1`` to force the fallback.  Both backends produce
bit-identical results.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("INSTAP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def rasterize(frames, shapes, sizes, xs, ys, colors):
    """Stamp K shapes into ``frames`` (T, H, W, 3) uint8, in list order."""
    _impl.rasterize(
        frames,
        np.ascontiguousarray(shapes, dtype=np.int64),
        np.ascontiguousarray(sizes, dtype=np.int64),
        np.ascontiguousarray(xs, dtype=np.int64),
        np.ascontiguousarray(ys, dtype=np.int64),
        np.ascontiguousarray(colors, dtype=np.uint8),
    )


def object_mask(shape: int, size: int) -> np.ndarray:
    return np.asarray(_impl.object_mask(int(shape), int(size)), dtype=bool)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resample of an (h, w, C) float image."""
    return np.asarray(
        _impl.bilinear_resize(np.ascontiguousarray(img, dtype=np.float64), int(out_h), int(out_w))
    )


def gt_ranks(sim: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """0-based rank of each query's ground-truth column; ties go to the lower index."""
    return np.asarray(
        _impl.gt_ranks(
            np.ascontiguousarray(sim, dtype=np.float64),
            np.ascontiguousarray(gt, dtype=np.int64),
        )
    )
