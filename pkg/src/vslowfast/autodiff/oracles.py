"""Explicit-loop reference kernels.

These are slow on purpose: each output element is produced by a visible loop
so the fast kernels in :mod:`ops` can be checked against them, and every
multiplication they perform is tallied in ``counter`` when one is given.
"""
from __future__ import annotations

import numpy as np


class Counter:
    def __init__(self):
        self.macs = 0

    def add(self, n: int) -> None:
        self.macs += int(n)


def _tally(counter, n):
    if counter is not None:
        counter.add(n)


def conv2d(x, w, bias=None, stride=1, pad=0, dilation=1, counter=None):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[b, ic, r * stride + i * dilation, s * stride + j * dilation] * w[oc, ic, i, j]
                    _tally(counter, c * k * k)
                    out[b, oc, r, s] = acc + (0.0 if bias is None else bias[oc])
    return out


def conv2d_counted(x, w, bias=None, stride=1, pad=0, dilation=1, counter=None):
    """Same loop structure as :func:`conv2d` with the innermost (C, K, K) sum vectorised."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    span = dilation * (k - 1) + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for r in range(ho):
            for s in range(wo):
                patch = xp[b, :, r * stride:r * stride + span:dilation, s * stride:s * stride + span:dilation]
                for oc in range(o):
                    prod = patch * w[oc]
                    _tally(counter, prod.size)
                    out[b, oc, r, s] = prod.sum() + (0.0 if bias is None else bias[oc])
    return out


def conv_transpose2d(x, w, bias=None, stride=1, pad=0, counter=None):
    """Scatter-accumulate: every input pixel adds a scaled kernel into the output."""
    n, c, h, wd = x.shape
    _, o, k, _ = w.shape
    ho, wo = (h - 1) * stride + k, (wd - 1) * stride + k
    full = np.zeros((n, o, ho, wo))
    for b in range(n):
        for ic in range(c):
            for r in range(h):
                for s in range(wd):
                    contrib = x[b, ic, r, s] * w[ic]
                    _tally(counter, contrib.size)
                    full[b, :, r * stride:r * stride + k, s * stride:s * stride + k] += contrib
    out = full[:, :, pad:ho - pad, pad:wo - pad] if pad else full
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def matmul(a, b, counter=None):
    if a.ndim == 3:
        return np.stack([matmul(a[i], b[i], counter) for i in range(a.shape[0])])
    m, kk = a.shape
    _, nn = b.shape
    out = np.zeros((m, nn))
    for i in range(m):
        for j in range(nn):
            acc = 0.0
            for t in range(kk):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    _tally(counter, m * kk * nn)
    return out


def outer(u, v, counter=None):
    out = np.zeros((u.size, v.size))
    for i in range(u.size):
        for j in range(v.size):
            out[i, j] = u[i] * v[j]
    _tally(counter, u.size * v.size)
    return out


def batchnorm_train(x, gamma, beta, eps=1e-5):
    """Two-pass per-channel statistics."""
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for ch in range(c):
        vals = x[:, ch].reshape(-1)
        total = 0.0
        for v in vals:
            total += v
        mu = total / vals.size
        sq = 0.0
        for v in vals:
            sq += (v - mu) ** 2
        var = sq / vals.size
        out[:, ch] = gamma[ch] * (x[:, ch] - mu) / np.sqrt(var + eps) + beta[ch]
    return out


def max_pool2d(x, k, stride):
    n, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.empty((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for r in range(ho):
                for s in range(wo):
                    best = -np.inf
                    for i in range(k):
                        for j in range(k):
                            best = max(best, x[b, ch, r * stride + i, s * stride + j])
                    out[b, ch, r, s] = best
    return out


def spatial_avg_pool(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c))
    for b in range(n):
        for ch in range(c):
            total = 0.0
            for r in range(h):
                for s in range(w):
                    total += x[b, ch, r, s]
            out[b, ch] = total / (h * w)
    return out


def avga(e, feats):
    """out[i] = sum_j e_i e_j F_j for one sample: e (C,), feats (C, H, W)."""
    c, h, w = feats.shape
    out = np.zeros_like(feats)
    for i in range(c):
        for j in range(c):
            out[i] += e[i] * e[j] * feats[j]
    return out
