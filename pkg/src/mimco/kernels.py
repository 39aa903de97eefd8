"""Ranking kernels behind the evaluation metrics.

Each kernel has a numba implementation and a pure-numpy one with identical
semantics. Ranking is by descending score with ties going to the lower
index. The numba path is used unless ``MIMCO_DISABLE_NUMBA=1`` is set (or
numba is not importable); both paths stay importable for benchmarking.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


USE_NUMBA = HAVE_NUMBA and os.environ.get("MIMCO_DISABLE_NUMBA", "0").lower() not in (
    "1", "true", "yes")


# --------------------------------------------------------------------- numpy

def topk_indices_numpy(scores, k):
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


def knn_predict_numpy(sim, train_labels, k, n_classes):
    nq = sim.shape[0]
    nbr = topk_indices_numpy(sim, k)
    nbr_labels = train_labels[nbr]  # nq, k
    counts = np.zeros((nq, n_classes), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(nq), k), nbr_labels.ravel()), 1)
    tied = counts == counts.max(axis=1, keepdims=True)
    first = np.argmax(tied[np.arange(nq)[:, None], nbr_labels], axis=1)
    return nbr_labels[np.arange(nq), first]


def average_precision_numpy(scores, relevant):
    order = np.argsort(-scores, axis=1, kind="stable")
    rel = np.take_along_axis(relevant, order, axis=1).astype(np.float64)
    hits = np.cumsum(rel, axis=1)
    prec = hits / np.arange(1, scores.shape[1] + 1)
    n_rel = rel.sum(axis=1)
    return (prec * rel).sum(axis=1) / np.maximum(n_rel, 1)


# --------------------------------------------------------------------- numba

@njit(cache=True, nogil=True)
def _topk_row(row, k, out):
    # insertion into a sorted buffer; strict '>' keeps lower index first on ties
    n_kept = 0
    best = np.empty(k, dtype=np.float64)
    for j in range(row.shape[0]):
        v = row[j]
        if n_kept == k and not v > best[k - 1]:
            continue
        pos = n_kept if n_kept < k else k - 1
        while pos > 0 and v > best[pos - 1]:
            if pos < k:
                best[pos] = best[pos - 1]
                out[pos] = out[pos - 1]
            pos -= 1
        best[pos] = v
        out[pos] = j
        if n_kept < k:
            n_kept += 1


@njit(cache=True, nogil=True)
def topk_indices_numba(scores, k):
    nq = scores.shape[0]
    out = np.empty((nq, k), dtype=np.int64)
    for i in range(nq):
        _topk_row(scores[i], k, out[i])
    return out


@njit(cache=True, nogil=True)
def knn_predict_numba(sim, train_labels, k, n_classes):
    nq = sim.shape[0]
    pred = np.empty(nq, dtype=np.int64)
    for i in range(nq):
        nbr = np.empty(k, dtype=np.int64)
        _topk_row(sim[i], k, nbr)
        counts = np.zeros(n_classes, dtype=np.int64)
        for j in range(k):
            counts[train_labels[nbr[j]]] += 1
        top = counts.max()
        for j in range(k):
            lab = train_labels[nbr[j]]
            if counts[lab] == top:
                pred[i] = lab
                break
    return pred


@njit(cache=True, nogil=True)
def average_precision_numba(scores, relevant):
    nq, nd = scores.shape
    ap = np.zeros(nq, dtype=np.float64)
    for i in range(nq):
        order = np.argsort(-scores[i], kind="mergesort")
        hits = 0
        acc = 0.0
        for r in range(nd):
            if relevant[i, order[r]]:
                hits += 1
                acc += hits / (r + 1.0)
        if hits > 0:
            ap[i] = acc / hits
    return ap


# ------------------------------------------------------------------ dispatch

def topk_indices(scores, k):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    k = int(min(k, scores.shape[1]))
    if USE_NUMBA:
        return topk_indices_numba(scores, k)
    return topk_indices_numpy(scores, k)


def knn_predict(sim, train_labels, k, n_classes):
    sim = np.ascontiguousarray(sim, dtype=np.float64)
    train_labels = np.ascontiguousarray(train_labels, dtype=np.int64)
    k = int(min(k, sim.shape[1]))
    if USE_NUMBA:
        return knn_predict_numba(sim, train_labels, k, int(n_classes))
    return knn_predict_numpy(sim, train_labels, k, int(n_classes))


def average_precision(scores, relevant):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    relevant = np.ascontiguousarray(relevant, dtype=np.bool_)
    if USE_NUMBA:
        return average_precision_numba(scores, relevant)
    return average_precision_numpy(scores, relevant)
