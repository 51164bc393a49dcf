"""Dense float32 matrix helpers on top of the selected kernel backend.

Matrices are plain C-contiguous ``numpy.ndarray`` objects of dtype float32.
Random draws use numpy's PCG64 bit generator, which is specified
bit-for-bit and therefore reproducible across platforms.
"""

import numpy as np

from . import kernels
from .errors import MaskError, ShapeError

DTYPE = np.float32


def as_matrix(x):
    m = np.ascontiguousarray(x, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def make_rng(seed):
    """PCG64 generator seeded with an unsigned 64-bit integer."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def matmul(a, b):
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return kernels.matmul(a, b)


def softmax_rows(m, mask=None):
    """Row-wise softmax; entries where ``mask`` is False get exactly 0.

    Masked logits are excluded from both the row max and the normaliser,
    so each row sums to one over its unmasked entries.
    """
    m = as_matrix(m)
    if mask is None:
        if m.shape[1] == 0 and m.shape[0] > 0:
            raise MaskError("rows have no entries")
        return kernels.softmax_rows(m)
    mask = np.ascontiguousarray(mask, dtype=bool)
    if mask.shape != m.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match {m.shape}")
    empty = ~mask.any(axis=1)
    if empty.any():
        raise MaskError(f"fully masked rows: {np.flatnonzero(empty).tolist()}")
    return kernels.softmax_rows(m, mask.view(np.uint8))


def rand_matrix(rng, rows, cols, scale):
    """Uniform draws in [-scale, scale], advancing ``rng``."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    out = rng.uniform(-scale, scale, size=(rows, cols)).astype(DTYPE)
    bound = DTYPE(scale)
    if float(bound) > scale:
        # float32 rounding may land just outside the requested range
        bound = np.nextafter(bound, DTYPE(0))
    return np.clip(out, -bound, bound)
