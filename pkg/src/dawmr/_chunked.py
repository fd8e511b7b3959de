"""Row-chunked matrix products whose per-row results do not depend on batching."""

from __future__ import annotations

import numpy as np

CHUNK_ROWS = 256


def chunked_matmul(a: np.ndarray, b: np.ndarray, rows: int = CHUNK_ROWS) -> np.ndarray:
    """``a @ b`` evaluated in fixed-size, zero-padded row blocks.

    BLAS picks different kernels (and summation orders) for different matrix
    shapes; a single row, for instance, goes through gemv.  Always handing it
    the same ``(rows, K) @ (K, N)`` shape makes each output row a function of
    its input row alone, which is what tiled inference relies on.
    """
    n = a.shape[0]
    out = np.empty((n, b.shape[1]), dtype=np.result_type(a, b))
    if n == 0:
        return out
    full = n - n % rows
    for i in range(0, full, rows):
        np.matmul(a[i:i + rows], b, out=out[i:i + rows])
    if full < n:
        pad = np.zeros((rows, a.shape[1]), dtype=a.dtype)
        pad[: n - full] = a[full:]
        out[full:] = (pad @ b)[: n - full]
    return out
