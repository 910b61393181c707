"""Numeric kernels with hand-written gradients.

Every layer is a pair of functions: ``*_forward`` returns the output and a
cache, ``*_backward`` consumes the upstream gradient and the cache.  Dense
and recurrent arrays put items on the leading axis; image batches are
channel-major (see the conv section).  Computations run in the dtype of the
inputs, so tests use float64 and training may use float32.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import BadTarget, NonFinite, ShapeMismatch

GRU_GATES = ("z", "r", "h")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                 dtype=np.float64) -> np.ndarray:
    a = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape).astype(dtype)


# ---------------------------------------------------------------- dense

def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """``x @ W.T + b`` for x of shape (N, in) or (in,)."""
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"linear: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W.T + b, (x, W)


def linear_backward(dout: np.ndarray, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dW = d2.T @ x2
    db = d2.sum(axis=0)
    dx = (d2 @ W).reshape(x.shape)
    return dx, dW, db


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


# ---------------------------------------------------------------- conv / pool
#
# Image batches are channel-major, (C, N, H, W): every im2col row is then a
# contiguous copy and the GEMM output needs no transpose.

def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[:, None], True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatch(f"expected C×H×W or C×N×H×W input, got shape {x.shape}")


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Valid cross-correlation, stride 1.

    ``x`` is (C_in, N, H, W) or a single C_in×H×W image; ``w`` is
    (C_out, C_in, k, k). Output is (C_out, N, H-k+1, W-k+1).
    """
    xb, squeeze = _as_batch(x)
    c, n, h, wd = xb.shape
    if w.ndim != 4 or w.shape[1] != c or w.shape[2] != w.shape[3] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv2d: x {x.shape}, w {w.shape}, b {b.shape}")
    o, _, k, _ = w.shape
    if h < k or wd < k:
        raise ShapeMismatch(f"conv2d: input {h}x{wd} smaller than kernel {k}x{k}")
    ho, wo = h - k + 1, wd - k + 1
    cols = np.empty((c, k, k, n, ho, wo), dtype=xb.dtype)
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                cols[ci, i, j] = xb[ci, :, i:i + ho, j:j + wo]
    cols = cols.reshape(c * k * k, n * ho * wo)
    out = w.reshape(o, -1) @ cols
    out += b[:, None]
    out = out.reshape(o, n, ho, wo)
    cache = (cols, xb.shape, w, squeeze)
    return (out[:, 0] if squeeze else out), cache


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    """Returns (dx, dw, db); dx is None when ``need_dx`` is false."""
    cols, xshape, w, squeeze = cache
    d = dout[:, None] if squeeze else dout
    c, n, h, wd = xshape
    o, _, k, _ = w.shape
    ho, wo = h - k + 1, wd - k + 1
    dmat = d.reshape(o, -1)
    dw = (dmat @ cols.T).reshape(w.shape)
    db = dmat.sum(axis=1)
    if not need_dx:
        return None, dw, db
    dcols = (w.reshape(o, -1).T @ dmat).reshape(c, k, k, n, ho, wo)
    dx = np.zeros(xshape, dtype=dcols.dtype)
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                dx[ci, :, i:i + ho, j:j + wo] += dcols[ci, i, j]
    return (dx[:, 0] if squeeze else dx), dw, db


def _pool_views(x: np.ndarray):
    h, w = x.shape[-2:]
    ho, wo = h // 2, w // 2
    return [x[..., di:2 * ho:2, dj:2 * wo:2] for di in (0, 1) for dj in (0, 1)]


def maxpool2d_forward(x: np.ndarray):
    """2×2 max pooling, stride 2, over the last two axes.

    Odd trailing rows/columns are dropped. Ties route to the first element
    of the window in row-major order.
    """
    if x.ndim < 2 or x.shape[-2] < 2 or x.shape[-1] < 2:
        raise ShapeMismatch(f"maxpool2d: input {x.shape} smaller than 2x2")
    a, b, c, d = _pool_views(x)
    out = np.maximum(np.maximum(a, b), np.maximum(c, d))
    idx = np.full(out.shape, 3, dtype=np.int8)
    idx[c == out] = 2
    idx[b == out] = 1
    idx[a == out] = 0
    return out, (idx, x.shape)


def maxpool2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    idx, xshape = cache
    dx = np.zeros(xshape, dtype=dout.dtype)
    for q, view in enumerate(_pool_views(dx)):
        view[...] = dout * (idx == q)
    return dx


# ---------------------------------------------------------------- GRU

def init_gru(rng: np.random.Generator, input_size: int, hidden_size: int,
             dtype=np.float64) -> dict[str, np.ndarray]:
    params = {}
    for g in GRU_GATES:
        params[f"W_{g}"] = uniform_init(rng, (hidden_size, input_size), input_size, dtype)
    for g in GRU_GATES:
        params[f"U_{g}"] = uniform_init(rng, (hidden_size, hidden_size), hidden_size, dtype)
    for g in GRU_GATES:
        params[f"b_{g}"] = np.zeros(hidden_size, dtype=dtype)
    return params


def _check_gru(params: dict[str, np.ndarray], input_size: int, hidden: int | None = None):
    H, I = params["W_z"].shape
    ok = all(params[f"W_{g}"].shape == (H, I) and params[f"U_{g}"].shape == (H, H)
             and params[f"b_{g}"].shape == (H,) for g in GRU_GATES)
    if not ok or I != input_size or (hidden is not None and hidden != H):
        raise ShapeMismatch("GRU parameter/input shapes disagree")
    return H, I


def gru_step(x_t: np.ndarray, h_prev: np.ndarray, params: dict[str, np.ndarray],
             mask=True) -> np.ndarray:
    """One GRU update. Where ``mask`` is false the previous state passes through.

    z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
    ĥ = tanh(W_h x + U_h (r⊙h) + b_h), h' = (1−z)⊙h + z⊙ĥ.
    """
    _check_gru(params, x_t.shape[-1], h_prev.shape[-1])
    p = params
    z = sigmoid(x_t @ p["W_z"].T + h_prev @ p["U_z"].T + p["b_z"])
    r = sigmoid(x_t @ p["W_r"].T + h_prev @ p["U_r"].T + p["b_r"])
    c = np.tanh(x_t @ p["W_h"].T + (r * h_prev) @ p["U_h"].T + p["b_h"])
    h_new = (1.0 - z) * h_prev + z * c
    m = np.asarray(mask, dtype=h_new.dtype)
    if m.ndim == 1:
        m = m[:, None]
    return m * h_new + (1.0 - m) * h_prev


def _sigmoid_(x: np.ndarray) -> np.ndarray:
    """In-place sigmoid (tanh form)."""
    x *= 0.5
    np.tanh(x, out=x)
    x += 1.0
    x *= 0.5
    return x


def gru_forward(xs: np.ndarray, mask: np.ndarray, params: dict[str, np.ndarray],
                h0: np.ndarray | None = None):
    """Run the GRU over (N, T, I) inputs; returns the final (N, H) state and a cache."""
    if xs.ndim != 3 or mask.shape != xs.shape[:2]:
        raise ShapeMismatch(f"gru: xs {xs.shape}, mask {mask.shape}")
    n, T, I = xs.shape
    H, _ = _check_gru(params, I)
    dt = xs.dtype
    p = params
    Wx = np.concatenate([p["W_z"], p["W_r"], p["W_h"]]).T  # (I, 3H)
    Uzr = np.ascontiguousarray(np.concatenate([p["U_z"], p["U_r"]]).T)  # (H, 2H)
    Uh = np.ascontiguousarray(p["U_h"].T)
    bias = np.concatenate([p["b_z"], p["b_r"], p["b_h"]])
    # input projections, time-major so each step reads a contiguous block
    xt = xs.transpose(1, 0, 2).reshape(T * n, I)
    ax = (xt @ Wx + bias).reshape(T, n, 3 * H)
    m = mask.T.astype(dt)  # (T, N)
    full = mask.all(axis=0)

    hprev = np.zeros((T, n, H), dt)
    ZR = np.zeros((T, n, 2 * H), dt)
    C = np.zeros((T, n, H), dt)
    rh = np.empty((n, H), dt)
    d = np.empty((n, H), dt)
    h = np.zeros((n, H), dt) if h0 is None else h0.astype(dt, copy=True)
    # leading steps padded for every row leave h unchanged
    active = np.flatnonzero(mask.any(axis=0))
    t0 = int(active[0]) if active.size else T
    hprev[:t0] = h
    for t in range(t0, T):
        hprev[t] = h
        zr = ZR[t]
        np.matmul(h, Uzr, out=zr)
        zr += ax[t, :, :2 * H]
        _sigmoid_(zr)
        np.multiply(zr[:, H:], h, out=rh)
        c = C[t]
        np.matmul(rh, Uh, out=c)
        c += ax[t, :, 2 * H:]
        np.tanh(c, out=c)
        # h += m * z * (c - h)
        np.subtract(c, h, out=d)
        d *= zr[:, :H]
        if not full[t]:
            d *= m[t][:, None]
        h += d
    cache = (xs, m, hprev, ZR, C, t0, Wx, Uzr, Uh)
    return h, cache


def gru_backward(dh: np.ndarray, cache, need_dx: bool = False):
    """BPTT. Returns (grads dict, dxs or None, dh0)."""
    xs, m, hprev, ZR, C, t0, Wx, Uzr, Uh = cache
    n, T, I = xs.shape
    H = dh.shape[1]
    dt = dh.dtype
    dA = np.zeros((T, n, 3 * H), dt)
    dh = dh.copy()
    UhT = np.ascontiguousarray(Uh.T)
    UzrT = np.ascontiguousarray(Uzr.T)
    dnew = np.empty((n, H), dt)
    tmp = np.empty((n, H), dt)
    drh = np.empty((n, H), dt)
    carry = np.empty((n, H), dt)
    for t in range(T - 1, t0 - 1, -1):
        hp, c = hprev[t], C[t]
        z, r = ZR[t, :, :H], ZR[t, :, H:]
        daz, dar, dah = dA[t, :, :H], dA[t, :, H:2 * H], dA[t, :, 2 * H:]
        mt = m[t][:, None]
        np.multiply(dh, mt, out=dnew)
        # candidate pre-activation: dnew * z * (1 - c^2)
        np.multiply(c, c, out=tmp)
        np.subtract(1.0, tmp, out=tmp)
        np.multiply(dnew, z, out=dah)
        dah *= tmp
        np.matmul(dah, UhT, out=drh)
        # update gate: dnew * (c - hp) * z * (1 - z)
        np.subtract(c, hp, out=daz)
        daz *= dnew
        np.subtract(1.0, z, out=tmp)
        tmp *= z
        daz *= tmp
        # reset gate: drh * hp * r * (1 - r)
        np.subtract(1.0, r, out=tmp)
        tmp *= r
        np.multiply(drh, hp, out=dar)
        dar *= tmp
        # state gradient through the skip path, the (1 - z) path, r⊙h and the gates
        np.matmul(dA[t, :, :2 * H], UzrT, out=carry)
        np.subtract(1.0, z, out=tmp)
        tmp *= dnew
        carry += tmp
        drh *= r
        carry += drh
        dh -= dnew  # (1 - m) * dh
        dh += carry
    dA2 = dA.reshape(T * n, 3 * H)
    xs_t = xs.transpose(1, 0, 2).reshape(T * n, I)
    dWx = dA2.T @ xs_t  # (3H, I)
    hp2 = hprev.reshape(T * n, H)
    dUzr = dA2[:, :2 * H].T @ hp2
    rh = (ZR[:, :, H:] * hprev).reshape(T * n, H)
    dUh = dA2[:, 2 * H:].T @ rh
    db = dA2.sum(axis=0)
    grads = {
        "W_z": dWx[:H], "W_r": dWx[H:2 * H], "W_h": dWx[2 * H:],
        "U_z": dUzr[:H], "U_r": dUzr[H:], "U_h": dUh,
        "b_z": db[:H], "b_r": db[H:2 * H], "b_h": db[2 * H:],
    }
    dxs = None
    if need_dx:
        dxs = (dA2 @ Wx.T).reshape(T, n, I).transpose(1, 0, 2)
    return grads, dxs, dh


# ---------------------------------------------------------------- loss

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax_nll(logits: np.ndarray, target):
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    Accepts a single logit vector with an integer target, or a batch
    (N, C) with N targets.
    """
    single = logits.ndim == 1
    lg = logits[None] if single else logits
    tg = np.atleast_1d(np.asarray(target))
    if tg.shape != (lg.shape[0],) or not np.issubdtype(tg.dtype, np.integer) \
            or np.any(tg < 0) or np.any(tg >= lg.shape[1]):
        raise BadTarget(f"targets {target!r} invalid for logits of shape {logits.shape}")
    logp = log_softmax(lg)
    rows = np.arange(lg.shape[0])
    loss = -logp[rows, tg].mean()
    grad = np.exp(logp)
    grad[rows, tg] -= 1.0
    grad /= lg.shape[0]
    return float(loss), (grad[0] if single else grad)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if params.keys() != grads.keys():
        raise ShapeMismatch("parameter and gradient names differ")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {grads[name].shape} vs param {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------- checking

def grad_check(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray,
               step: float = 1e-5) -> float:
    """Max relative error between ``fn``'s analytic gradient and central differences.

    ``fn(x)`` returns ``(value, grad)``. The error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    x = np.array(x, dtype=np.float64)
    _, analytic = fn(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeMismatch(f"gradient shape {analytic.shape} != point shape {x.shape}")
    numeric = np.empty_like(x)
    flat, nflat = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp, _ = fn(x.copy())
        flat[i] = old - step
        fm, _ = fn(x.copy())
        flat[i] = old
        nflat[i] = (fp - fm) / (2.0 * step)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NonFinite("non-finite value in gradient check")
    if x.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
