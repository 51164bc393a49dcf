"""Numpy fallback for the compiled kernels; same signatures and semantics."""

import numpy as np

NAME = "numpy"


def matmul(a, b):
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def _softmax64(x, mask):
    if mask is None:
        mx = x.max(axis=1, keepdims=True)
        e = np.exp(x - mx)
    else:
        keep = mask.astype(bool)
        mx = np.where(keep, x, -np.inf).max(axis=1, keepdims=True)
        e = np.where(keep, np.exp(np.where(keep, x, mx) - mx), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x, mask=None):
    if x.size == 0:
        return np.zeros(x.shape, dtype=np.float32)
    return _softmax64(x.astype(np.float64), mask).astype(np.float32)


def attention_head(q, k, v, scale, causal):
    nq, nk = q.shape[0], k.shape[0]
    if nq == 0 or nk == 0:
        return np.zeros((nq, nk), np.float32), np.empty((nq, v.shape[1]), np.float32)
    logits = (q.astype(np.float64) @ k.astype(np.float64).T) * scale
    mask = np.tril(np.ones((nq, nk), dtype=bool)) if causal else None
    p = _softmax64(logits, mask)
    return p.astype(np.float32), (p @ v.astype(np.float64)).astype(np.float32)


def dot_argmax(cands, refs):
    if cands.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    sims = cands.astype(np.float64) @ refs.astype(np.float64).T
    return np.argmax(sims, axis=1).astype(np.int64)
