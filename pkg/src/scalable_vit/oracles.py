"""Slow, direct NumPy reference implementations.

Nothing here touches the tape or the vectorised kernels; these loops exist
only to check them.
"""
from __future__ import annotations

import math

import numpy as np


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    p = b.shape[1]
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def softmax_naive(row: np.ndarray) -> np.ndarray:
    e = np.array([math.exp(v) for v in row])
    return e / e.sum()


def conv2d_loops(x: np.ndarray, w: np.ndarray, b=None, stride=1, pad=0, depthwise=False) -> np.ndarray:
    H, W, cin = x.shape
    k = w.shape[0]
    cout = cin if depthwise else w.shape[3]
    ho = (H + 2 * pad - k) // stride + 1
    wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((ho, wo, cout))
    for oy in range(ho):
        for ox in range(wo):
            for co in range(cout):
                acc = 0.0 if b is None else float(b[co])
                for i in range(k):
                    for j in range(k):
                        y, xx = oy * stride + i - pad, ox * stride + j - pad
                        if 0 <= y < H and 0 <= xx < W:
                            if depthwise:
                                acc += x[y, xx, co] * w[i, j, co]
                            else:
                                acc += float(x[y, xx, :] @ w[i, j, :, co])
                out[oy, ox, co] = acc
    return out


def layer_norm_two_pass(x: np.ndarray, gamma, beta, eps=1e-5) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    flat, o = x.reshape(-1, x.shape[-1]), out.reshape(-1, x.shape[-1])
    for i, row in enumerate(flat):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        o[i] = (row - mu) / math.sqrt(var + eps) * gamma + beta
    return out


def gelu_erf(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def attention_rows(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Single-head attention computed one query row at a time."""
    d = q.shape[1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        s = np.array([q[i] @ k[j] for j in range(k.shape[0])]) / math.sqrt(d)
        a = softmax_naive(s - s.max())
        out[i] = a @ v
    return out


def masked_global_attention(x: np.ndarray, h: int, w: int, m: int, heads: int, wq, bq, wk, bk, wv, bv,
                            wo, bo) -> np.ndarray:
    """Global multi-head attention where token i may attend to j only if both
    fall in the same ``m x m`` window of the (unpadded) grid."""
    n, c = x.shape
    q, k, v = x @ wq + bq, x @ wk + bk, x @ wv + bv
    win = np.array([(r // m) * 10_000 + (col // m) for r in range(h) for col in range(w)])
    d = c // heads
    z = np.zeros((n, c))
    for hd in range(heads):
        sl = slice(hd * d, (hd + 1) * d)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(d)
        s = np.where(win[:, None] == win[None, :], s, -np.inf)
        s = s - s.max(axis=1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=1, keepdims=True)
        z[:, sl] = a @ v[:, sl]
    return z @ wo + bo


def softmax_ce_grad(logits: np.ndarray, label: int) -> np.ndarray:
    p = np.exp(logits - logits.max())
    p /= p.sum()
    p[label] -= 1.0
    return p
