"""Layers built on :mod:`achdistill.ndauto.tensor`: layer norm, dense,
L2 normalisation, 2-D convolution and weight initialisers."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _make, matmul, add

LN_EPS = 1e-5
L2_EPS = 1e-8


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm: feature size {d} does not match gain {gain.shape} / bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), fn)


def l2_normalize(x: Tensor, eps: float = L2_EPS) -> Tensor:
    """Row-wise ``x / sqrt(||x||^2 + eps)``."""
    xd = x.data
    r = np.sqrt((xd * xd).sum(axis=-1, keepdims=True) + eps)
    out = xd / r

    def fn(g):
        dot = (g * xd).sum(axis=-1, keepdims=True)
        return (g / r - xd * dot / r**3,)

    return _make(out, (x,), fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 convolution. ``x``: (N, C, H, W); ``weight``: (O, C, k, k)."""
    xd = x.data
    wd = weight.data
    n, c, h, w = xd.shape
    o, c2, k, k2 = wd.shape
    if c != c2 or k != k2:
        raise ValueError(f"conv2d: input channels {c} vs weight {wd.shape}")
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    ho = xp.shape[2] - k + 1
    wo = xp.shape[3] - k + 1
    # (N, C, Ho, Wo, k, k) -> (N, Ho, Wo, C*k*k)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = wd.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o)
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 3, 1, 2)

    def fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        dw = (gm.T @ cols).reshape(wd.shape)
        dcols = (gm @ wmat).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + ho, j : j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, fn)


# -- initialisers ----------------------------------------------------------
def fan_in_init(rng: np.random.Generator, fan_in: int, shape, scale: float = 1.0, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * (scale / np.sqrt(fan_in))).astype(dtype)


def orthogonal_init(rng: np.random.Generator, shape: tuple[int, int], gain: float = 1.0, dtype=np.float64) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return (gain * q[:rows, :cols]).astype(dtype)
