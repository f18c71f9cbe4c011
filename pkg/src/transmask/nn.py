"""Network-level differentiable ops built on :mod:`transmask.tensor`.

Convolutions are "valid" (no implicit padding) except ``conv2d``, which takes
an explicit symmetric zero padding. Layouts are channel-first and unbatched:
``conv1d`` expects ``[Cin, L]``, ``conv2d`` expects ``[Cin, H, W]``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    ShapeError,
    Tensor,
    _result,
    _sigmoid_np,
    as_tensor,
    getitem,
    linear,
    stack,
)

LN_EPS = 1e-5


class InputTooShortError(ValueError):
    """The input is shorter than one kernel."""


# ----------------------------------------------------------------- convolution
def conv1d(x, w, stride=1):
    """Valid cross-correlation. ``x``: [Cin, L], ``w``: [Cout, Cin, K]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 3 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1:
        raise ValueError("conv1d: stride must be positive")
    cin, length = x.shape
    cout, _, k = w.shape
    if length < k:
        raise InputTooShortError(f"conv1d: input length {length} shorter than kernel {k}")
    n_out = (length - k) // stride + 1
    cols = sliding_window_view(x.data, k, axis=1)[:, ::stride][:, :n_out]
    cols = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(n_out, cin * k)
    wmat = w.data.reshape(cout, cin * k)
    out = (cols @ wmat.T).T

    def bw(g):
        gx = gw = None
        if w.requires_grad:
            gw = (g @ cols).reshape(w.shape)
        if x.requires_grad:
            gcols = (g.T @ wmat).reshape(n_out, cin, k)
            gx = np.zeros_like(x.data)
            span = stride * (n_out - 1) + 1
            for j in range(k):
                gx[:, j:j + span:stride] += gcols[:, :, j].T
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, w), bw)


def conv_transpose1d(x, w, stride=1):
    """Adjoint of :func:`conv1d`. ``x``: [Cin, T], ``w``: [Cin, Cout, K] -> [Cout, (T-1)*stride+K]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 3 or x.shape[0] != w.shape[0]:
        raise ShapeError(f"conv_transpose1d: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1:
        raise ValueError("conv_transpose1d: stride must be positive")
    cin, steps = x.shape
    _, cout, k = w.shape
    if steps < 1:
        raise ShapeError("conv_transpose1d: need at least one input step")
    n_out = (steps - 1) * stride + k
    wmat = w.data.reshape(cin, cout * k)
    spread = (x.data.T @ wmat).reshape(steps, cout, k)
    out = np.zeros((cout, n_out), dtype=x.data.dtype)
    span = stride * (steps - 1) + 1
    for j in range(k):
        out[:, j:j + span:stride] += spread[:, :, j].T

    def bw(g):
        gcols = sliding_window_view(g, k, axis=1)[:, ::stride][:, :steps]
        gspread = np.ascontiguousarray(gcols.transpose(1, 0, 2)).reshape(steps, cout * k)
        gx = (gspread @ wmat.T).T if x.requires_grad else None
        gw = (x.data @ gspread).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    return _result(out, (x, w), bw)


def conv2d(x, w, padding=0):
    """Cross-correlation with symmetric zero padding. ``x``: [Cin, H, W], ``w``: [Cout, Cin, Kh, Kw]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    p = int(padding)
    hp, wp = h + 2 * p, wd + 2 * p
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {(hp, wp)} smaller than kernel {(kh, kw)}")
    ho, wo = hp - kh + 1, wp - kw + 1
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # [Cin, Ho, Wo, Kh, Kw]
    cols = np.ascontiguousarray(cols.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).reshape(ho, wo, cout).transpose(2, 0, 1)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(1, 2, 0)).reshape(ho * wo, cout)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(ho, wo, cin, kh, kw)
            gxp = np.zeros((cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + ho, j:j + wo] += gcols[:, :, :, i, j].transpose(2, 0, 1)
            gx = gxp[:, p:p + h, p:p + wd]
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, w), bw)


# -------------------------------------------------------------- normalization
def _normalize(x, gain, bias, axes, eps, gain_shape):
    v = x.data
    mu = v.mean(axis=axes, keepdims=True)
    centered = v - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=axes, keepdims=True) + eps)
    xhat = centered * inv
    gview = gain.data.reshape(gain_shape)
    out = xhat * gview + bias.data.reshape(gain_shape)
    affine_axes = tuple(i for i, n in enumerate(gain_shape) if n == 1)

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gview
            gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
        gg = (g * xhat).sum(axis=affine_axes).reshape(gain.shape) if gain.requires_grad else None
        gb = g.sum(axis=affine_axes).reshape(bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return _result(out, (x, gain, bias), bw)


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalize over the last axis, then apply a per-feature affine map."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match {x.shape}")
    return _normalize(x, gain, bias, (x.ndim - 1,), eps, (1,) * (x.ndim - 1) + (d,))


def global_layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalize over every element of a channel-first tensor; affine per channel (axis 0)."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    c = x.shape[0]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"global_layer_norm: gain {gain.shape} / bias {bias.shape} do not match {x.shape}")
    return _normalize(x, gain, bias, tuple(range(x.ndim)), eps, (c,) + (1,) * (x.ndim - 1))


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw)


# ----------------------------------------------------------------------- LSTM
def lstm_cell(zx, h, c, w_hh):
    """One recurrence step given the precomputed input projection ``zx = x @ w_ih + b``.

    Gate order along the last axis of ``zx`` is input, forget, cell, output.
    Returns the packed tensor ``[..., 2H]`` holding ``(h', c')``.
    """
    hidden = h.shape[-1]
    if zx.shape[-1] != 4 * hidden or w_hh.shape != (hidden, 4 * hidden) or c.shape != h.shape:
        raise ShapeError(f"lstm: projection {zx.shape}, state {h.shape}/{c.shape}, w_hh {w_hh.shape}")
    z = zx.data + h.data @ w_hh.data
    i = _sigmoid_np(z[..., :hidden])
    f = _sigmoid_np(z[..., hidden:2 * hidden])
    gg = np.tanh(z[..., 2 * hidden:3 * hidden])
    o = _sigmoid_np(z[..., 3 * hidden:])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc

    def bw(g):
        gh, gc = g[..., :hidden], g[..., hidden:]
        gc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            gc * gg * i * (1.0 - i),
            gc * c.data * f * (1.0 - f),
            gc * i * (1.0 - gg * gg),
            gh * tc * o * (1.0 - o),
        ], axis=-1)
        gh_prev = dz @ w_hh.data.T if h.requires_grad else None
        gw = None
        if w_hh.requires_grad:
            gw = h.data.reshape(-1, hidden).T @ dz.reshape(-1, 4 * hidden)
        return dz, gh_prev, gc * f if c.requires_grad else None, gw

    return _result(np.concatenate([h_new, c_new], axis=-1), (zx, h, c, w_hh), bw)


def lstm_step(x, h, c, w_ih, w_hh, b):
    """Standard LSTM cell. ``x``: [..., D]; ``h``, ``c``: [..., H]; ``w_ih``: [D, 4H]; ``w_hh``: [H, 4H]; ``b``: [4H]."""
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    packed = lstm_cell(linear(x, w_ih, b), h, c, w_hh)
    hidden = h.shape[-1]
    return packed[..., :hidden], packed[..., hidden:]


def lstm_sequence(x, w_ih, w_hh, b, reverse=False):
    """Run an LSTM over axis 1 of ``x`` ([B, T, D]) from a zero state; returns [B, T, H]."""
    batch, steps, _ = x.shape
    hidden = w_hh.shape[0]
    zx = linear(x, w_ih, b)  # one projection for every step
    h = Tensor(np.zeros((batch, hidden), dtype=x.data.dtype), dtype=x.data.dtype)
    c = h
    outputs = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        packed = lstm_cell(getitem(zx, (slice(None), t)), h, c, w_hh)
        h = getitem(packed, (Ellipsis, slice(0, hidden)))
        c = getitem(packed, (Ellipsis, slice(hidden, 2 * hidden)))
        outputs[t] = h
    return stack(outputs, axis=1)
