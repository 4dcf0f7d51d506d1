"""Compiled loops for RoI max pooling (forward and its gradient scatter)."""

import numpy as np
from numba import njit


@njit(cache=True)
def roi_pool_forward(feat, cells, P):
    """Max-pool each cell rectangle of ``feat`` (Hf, Wf, C) to a P x P grid.

    ``cells`` is (R, 4) int64 ``x1, y1, x2, y2`` with exclusive ends.
    Returns pooled values (R, P, P, C) and flat argmax positions
    ``y * Wf + x`` of the same shape (first maximum in row-major order).
    """
    R = cells.shape[0]
    Wf = feat.shape[1]
    C = feat.shape[2]
    out = np.empty((R, P, P, C), dtype=feat.dtype)
    arg = np.empty((R, P, P, C), dtype=np.int64)
    for r in range(R):
        x1 = cells[r, 0]
        y1 = cells[r, 1]
        w = cells[r, 2] - x1
        h = cells[r, 3] - y1
        for i in range(P):
            ys = y1 + (i * h) // P
            ye = y1 - ((-(i + 1) * h) // P)
            for j in range(P):
                xs = x1 + (j * w) // P
                xe = x1 - ((-(j + 1) * w) // P)
                for c in range(C):
                    best = feat[ys, xs, c]
                    where = ys * Wf + xs
                    for y in range(ys, ye):
                        for x in range(xs, xe):
                            v = feat[y, x, c]
                            if v > best:
                                best = v
                                where = y * Wf + x
                    out[r, i, j, c] = best
                    arg[r, i, j, c] = where
    return out, arg


@njit(cache=True)
def roi_pool_backward(dout, arg, Hf, Wf):
    R, P, _, C = dout.shape
    grad = np.zeros((Hf * Wf, C), dtype=dout.dtype)
    for r in range(R):
        for i in range(P):
            for j in range(P):
                for c in range(C):
                    grad[arg[r, i, j, c], c] += dout[r, i, j, c]
    return grad.reshape(Hf, Wf, C)
