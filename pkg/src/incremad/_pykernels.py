"""Pure-Python/numpy implementations of the compiled kernels in ``_kernels.pyx``.

Both modules must produce bit-identical results; the arithmetic below mirrors
the C loops operation for operation.
"""

import numpy as np


def slda_fit_batch(means, counts, cov, total, features, labels):
    """Stream ``features``/``labels`` through the SLDA statistics in place.

    Returns the updated total sample count.
    """
    for x, y in zip(features, labels):
        mu = means[y]
        xm = x - mu
        scale = total / (total + 1.0)
        cov *= total
        cov += np.multiply.outer(xm, xm) * scale
        cov /= total + 1.0
        mu += (x - mu) / (counts[y] + 1.0)
        counts[y] += 1.0
        total += 1.0
    return total


def count_above(sorted_scores, thresholds):
    """Number of scores strictly greater than each threshold."""
    n = sorted_scores.shape[0]
    return n - np.searchsorted(sorted_scores, thresholds, side="right").astype(np.int64)
