# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. See ``_pykernels`` for the reference semantics."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def slda_fit_batch(double[:, ::1] means, double[::1] counts, double[:, ::1] cov,
                   double total, const double[:, ::1] features,
                   const cnp.int64_t[::1] labels):
    cdef Py_ssize_t n = features.shape[0]
    cdef Py_ssize_t d = features.shape[1]
    cdef Py_ssize_t s, i, j
    cdef cnp.int64_t y
    cdef double scale, denom
    cdef double[::1] xm = np.empty(d)
    for s in range(n):
        y = labels[s]
        for i in range(d):
            xm[i] = features[s, i] - means[y, i]
        scale = total / (total + 1.0)
        denom = total + 1.0
        for i in range(d):
            for j in range(d):
                cov[i, j] = (cov[i, j] * total + (xm[i] * xm[j]) * scale) / denom
        for i in range(d):
            means[y, i] = means[y, i] + (features[s, i] - means[y, i]) / (counts[y] + 1.0)
        counts[y] = counts[y] + 1.0
        total = total + 1.0
    return total


def count_above(const double[::1] sorted_scores, const double[::1] thresholds):
    """Merge walk; ``thresholds`` must be sorted ascending."""
    cdef Py_ssize_t n = sorted_scores.shape[0]
    cdef Py_ssize_t t = thresholds.shape[0]
    cdef Py_ssize_t k, pos = 0
    out = np.empty(t, dtype=np.int64)
    cdef cnp.int64_t[::1] view = out
    for k in range(t):
        while pos < n and sorted_scores[pos] <= thresholds[k]:
            pos += 1
        view[k] = n - pos
    return out
