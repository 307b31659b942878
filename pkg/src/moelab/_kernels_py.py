"""Pure-numpy fallbacks for the compiled kernels.

Same contracts, same arithmetic order: every expression here rounds exactly
like its counterpart in _kernels.pyx, so switching backends never changes a
single bit of output.
"""

import numpy as np


def adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place Adam step on flat f64 arrays; bc1/bc2 are the 1 - beta**t factors."""
    np.multiply(m, beta1, out=m)
    m += (1.0 - beta1) * g
    np.multiply(v, beta2, out=v)
    v += (1.0 - beta2) * (g * g)
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def scatter_add_rows(out, ids, rows):
    """out[ids[i], :] += rows[i, :] accumulated in row order."""
    np.add.at(out, ids, rows)


def topk_rows(x, k):
    """Per-row top-k: values descending, exact ties toward the lower column index."""
    order = np.argsort(-x, axis=1, kind="stable")[:, :k]
    return order.astype(np.int64), np.take_along_axis(x, order, axis=1)
