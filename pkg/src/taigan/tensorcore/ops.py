"""Differentiable primitives.

Layout conventions (no batch axis; batch size is always 1):

* volumes are ``(C, X, Y, Z)``; 3-D kernels are ``(Cout, Cin, k, k, k)``
* transposed-convolution kernels are ``(Cin, Cout, k, k, k)``
* sequences for :func:`conv1d` are ``(C, T)``

Convolution arithmetic, per spatial axis of extent ``n``::

    conv3d:            out = (n + 2*padding - k) // stride + 1
    conv_transpose3d:  out = (n - 1) * stride + k - 2*padding

Only bias addition broadcasts. Every other binary op demands equal shapes.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, record


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        bad = [i for i, (p, q) in enumerate(zip(a.shape, b.shape)) if p != q]
        if a.ndim != b.ndim:
            raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} on axes {bad}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    out = Tensor._wrap(a.data + b.data)
    record("add", (a, b), (out,), lambda g: (g[0], g[0]))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    out = Tensor._wrap(a.data - b.data)
    record("sub", (a, b), (out,), lambda g: (g[0], -g[0]))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    out = Tensor._wrap(a.data * b.data)
    record("mul", (a, b), (out,), lambda g: (g[0] * b.data, g[0] * a.data))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(a.data * c)
    record("scale", (a,), (out,), lambda g: (g[0] * c,))
    return out


def shift(a: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(a.data + c)
    record("shift", (a,), (out,), lambda g: (g[0],))
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor._wrap(a.data * a.data)
    record("square", (a,), (out,), lambda g: (2.0 * a.data * g[0],))
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor._wrap(np.maximum(a.data, 0.0))  # propagates NaN
    record("relu", (a,), (out,), lambda g: (g[0] * mask,))
    return out


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope)
    out = Tensor._wrap(a.data * factor)
    record("leaky_relu", (a,), (out,), lambda g: (g[0] * factor,))
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor._wrap(y)
    record("tanh", (a,), (out,), lambda g: (g[0] * (1.0 - y * y),))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    out = Tensor._wrap(y)
    record("sigmoid", (a,), (out,), lambda g: (g[0] * y * (1.0 - y),))
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    out = Tensor._wrap(np.clip(a.data, lo, hi))
    record("clamp", (a,), (out,), lambda g: (g[0] * inside,))
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    out = Tensor._wrap(np.log(a.data))
    record("log", (a,), (out,), lambda g: (g[0] / a.data,))
    return out


# ------------------------------------------------------------------ reductions


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size
        out = Tensor._wrap(np.array(a.data.mean()))
        record("mean", (a,), (out,), lambda g: (np.full(a.shape, float(g[0]) / n),))
        return out
    n = a.shape[axis]
    out = Tensor._wrap(a.data.mean(axis=axis))

    def bw(g):
        return (np.repeat(np.expand_dims(g[0], axis), n, axis=axis) / n,)

    record("mean", (a,), (out,), bw)
    return out


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = Tensor._wrap(np.array(a.data.sum()))
    record("sum", (a,), (out,), lambda g: (np.full(a.shape, float(g[0])),))
    return out


# --------------------------------------------------------------- shape shuffles


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor._wrap(a.data.reshape(shape))
    record("reshape", (a,), (out,), lambda g: (g[0].reshape(a.shape),))
    return out


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.size,))


def narrow(a: Tensor, lo: int, hi: int) -> Tensor:
    """Rows ``lo:hi`` along axis 0."""
    if not 0 <= lo < hi <= a.shape[0]:
        raise ShapeError(f"narrow: range [{lo}, {hi}) outside axis 0 of extent {a.shape[0]}")
    out = Tensor._wrap(a.data[lo:hi].copy())

    def bw(g):
        full = np.zeros(a.shape)
        full[lo:hi] = g[0]
        return (full,)

    record("narrow", (a,), (out,), bw)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default)."""
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ShapeError(f"concat: rank mismatch {ref} vs {t.shape}")
        bad = [i for i in range(len(ref)) if i != axis % len(ref) and t.shape[i] != ref[i]]
        if bad:
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ on axes {bad}")
    sizes = [t.shape[axis] for t in tensors]
    out = Tensor._wrap(np.concatenate([t.data for t in tensors], axis=axis))
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g[0], splits, axis=axis))

    record("concat", tensors, (out,), bw)
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)
    out = Tensor._wrap(np.stack([t.data for t in tensors], axis=axis))

    def bw(g):
        return tuple(np.moveaxis(g[0], axis, 0))

    record("stack", tensors, (out,), bw)
    return out


# ---------------------------------------------------------------- affine maps


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``w @ x + b`` for a vector ``x`` of shape ``(in,)``."""
    if x.ndim != 1 or w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"linear: weight {w.shape} incompatible with input {x.shape} (axis 1 vs 0)")
    y = w.data @ x.data
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match output {w.shape[0]}")
        y = y + b.data
    out = Tensor._wrap(y)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g0 = g[0]
        grads = [w.data.T @ g0, np.outer(g0, x.data)]
        if b is not None:
            grads.append(g0)
        return grads

    record("linear", inputs, (out,), bw)
    return out


def channel_affine(m: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel ``gamma[i] * m[i] + beta[i]`` for ``m`` of shape ``(C, ...)``."""
    c = m.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"channel_affine: feature map has {c} channels (axis 0) but "
            f"gamma {gamma.shape}, beta {beta.shape}"
        )
    bshape = (c,) + (1,) * (m.ndim - 1)
    out = Tensor._wrap(gamma.data.reshape(bshape) * m.data + beta.data.reshape(bshape))
    red = tuple(range(1, m.ndim))

    def bw(g):
        g0 = g[0]
        return (
            g0 * gamma.data.reshape(bshape),
            (g0 * m.data).sum(axis=red),
            g0.sum(axis=red),
        )

    record("channel_affine", (m, gamma, beta), (out,), bw)
    return out


# ---------------------------------------------------------------- convolutions

_OFFSETS = {}


def _offsets(k: int):
    if k not in _OFFSETS:
        _OFFSETS[k] = list(itertools.product(range(k), repeat=3))
    return _OFFSETS[k]


def _window(start: int, stride: int, count: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"conv3d: expected input (C,X,Y,Z) and kernel (O,C,k,k,k), got {x.shape}, {w.shape}")
    cin, *spatial = x.shape
    cout, wcin, k, k1, k2 = w.shape
    if wcin != cin:
        raise ShapeError(f"conv3d: input has {cin} channels (axis 0) but kernel expects {wcin} (axis 1)")
    if not (k == k1 == k2):
        raise ShapeError(f"conv3d: only cubic kernels supported, got {w.shape[2:]}")
    o = [(n + 2 * padding - k) // stride + 1 for n in spatial]
    if min(o) < 1:
        raise ShapeError(f"conv3d: spatial extents {tuple(spatial)} too small for kernel {k}")
    xp = np.pad(x.data, ((0, 0),) + ((padding, padding),) * 3) if padding else x.data
    offs = _offsets(k)
    cols = np.empty((cin, len(offs), *o))
    for n, (i, j, l) in enumerate(offs):
        cols[:, n] = xp[:, _window(i, stride, o[0]), _window(j, stride, o[1]), _window(l, stride, o[2])]
    cols = cols.reshape(cin * len(offs), -1)
    wmat = w.data.reshape(cout, -1)
    y = wmat @ cols
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv3d: bias {b.shape} does not match {cout} output channels")
        y += b.data[:, None]
    out = Tensor._wrap(y.reshape(cout, *o))
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g0 = g[0].reshape(cout, -1)
        grads = [None, (g0 @ cols.T).reshape(w.shape)]
        if x.requires_grad:
            dcols = (wmat.T @ g0).reshape(cin, len(offs), *o)
            dxp = np.zeros(xp.shape)
            for n, (i, j, l) in enumerate(offs):
                dxp[:, _window(i, stride, o[0]), _window(j, stride, o[1]), _window(l, stride, o[2])] += dcols[:, n]
            if padding:
                dxp = dxp[:, padding:-padding, padding:-padding, padding:-padding]
            grads[0] = dxp
        if b is not None:
            grads.append(g0.sum(axis=1))
        return grads

    record("conv3d", inputs, (out,), bw)
    return out


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, padding: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(
            f"conv_transpose3d: expected input (C,X,Y,Z) and kernel (C,O,k,k,k), got {x.shape}, {w.shape}"
        )
    cin, *spatial = x.shape
    wcin, cout, k, _, _ = w.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose3d: input has {cin} channels (axis 0) but kernel expects {wcin} (axis 0)")
    full = [(n - 1) * stride + k for n in spatial]
    if min(full) - 2 * padding < 1:
        raise ShapeError("conv_transpose3d: padding removes the whole output")
    offs = _offsets(k)
    wmat = w.data.reshape(cin, -1)  # (Cin, Cout*k^3)
    xmat = x.data.reshape(cin, -1)
    cols = (wmat.T @ xmat).reshape(cout, len(offs), *spatial)
    yf = np.zeros((cout, *full))
    for n, (i, j, l) in enumerate(offs):
        yf[:, _window(i, stride, spatial[0]), _window(j, stride, spatial[1]), _window(l, stride, spatial[2])] += cols[:, n]
    if padding:
        yf = yf[:, padding:-padding, padding:-padding, padding:-padding]
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv_transpose3d: bias {b.shape} does not match {cout} output channels")
        yf = yf + b.data[:, None, None, None]
    out = Tensor._wrap(np.ascontiguousarray(yf))
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g0 = g[0]
        if padding:
            gf = np.zeros((cout, *full))
            gf[:, padding:-padding, padding:-padding, padding:-padding] = g0
        else:
            gf = g0
        dcols = np.empty((cout, len(offs), *spatial))
        for n, (i, j, l) in enumerate(offs):
            dcols[:, n] = gf[:, _window(i, stride, spatial[0]), _window(j, stride, spatial[1]), _window(l, stride, spatial[2])]
        dcols = dcols.reshape(cout * len(offs), -1)
        grads = [(wmat @ dcols).reshape(x.shape), (xmat @ dcols.T).reshape(w.shape)]
        if b is not None:
            grads.append(g0.sum(axis=(1, 2, 3)))
        return grads

    record("conv_transpose3d", inputs, (out,), bw)
    return out


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 convolution over the last axis of ``x`` with shape ``(C, T)``."""
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected input (C,T) and kernel (O,C,k), got {x.shape}, {w.shape}")
    cin, t = x.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ShapeError(f"conv1d: input has {cin} channels (axis 0) but kernel expects {wcin} (axis 1)")
    o = t + 2 * padding - k + 1
    if o < 1:
        raise ShapeError(f"conv1d: sequence length {t} too short for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    cols = np.stack([xp[:, i : i + o] for i in range(k)], axis=1).reshape(cin * k, o)
    wmat = w.data.reshape(cout, -1)
    y = wmat @ cols
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv1d: bias {b.shape} does not match {cout} output channels")
        y = y + b.data[:, None]
    out = Tensor._wrap(y)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g0 = g[0]
        dcols = (wmat.T @ g0).reshape(cin, k, o)
        dxp = np.zeros(xp.shape)
        for i in range(k):
            dxp[:, i : i + o] += dcols[:, i]
        if padding:
            dxp = dxp[:, padding:-padding]
        grads = [dxp, (g0 @ cols.T).reshape(w.shape)]
        if b is not None:
            grads.append(g0.sum(axis=1))
        return grads

    record("conv1d", inputs, (out,), bw)
    return out


# ----------------------------------------------------------------------- LSTM


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step. Gate order in the stacked weights is (input, forget, cell, output).

    Shapes: ``x`` (I,), ``h``/``c`` (H,), ``w_ih`` (4H, I), ``w_hh`` (4H, H), ``b`` (4H,).
    """
    hsz = h.shape[0]
    if c.shape != (hsz,) or w_ih.shape != (4 * hsz, x.shape[0]) or w_hh.shape != (4 * hsz, hsz) or b.shape != (4 * hsz,):
        raise ShapeError(
            f"lstm_cell: inconsistent shapes x={x.shape} h={h.shape} c={c.shape} "
            f"w_ih={w_ih.shape} w_hh={w_hh.shape} b={b.shape}"
        )
    z = w_ih.data @ x.data + w_hh.data @ h.data + b.data
    zi, zf, zg, zo = np.split(z, 4)
    i, f, o = _sigmoid(zi), _sigmoid(zf), _sigmoid(zo)
    gg = np.tanh(zg)
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    h_out, c_out = Tensor._wrap(h_new), Tensor._wrap(c_new)

    def bw(g):
        dh, dc_up = g
        do = dh * tc
        dc = dc_up + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * c.data * f * (1.0 - f),
            dc * i * (1.0 - gg * gg),
            do * o * (1.0 - o),
        ])
        return (
            w_ih.data.T @ dz,
            w_hh.data.T @ dz,
            dc * f,
            np.outer(dz, x.data),
            np.outer(dz, h.data),
            dz,
        )

    record("lstm_cell", (x, h, c, w_ih, w_hh, b), (h_out, c_out), bw)
    return h_out, c_out


# ----------------------------------------------------------------------- resampling


def separable_expand(c: Tensor, b0: np.ndarray, b1: np.ndarray, b2: np.ndarray) -> Tensor:
    """``out[x, y, z, :] = sum_ijk b0[x, i] b1[y, j] b2[z, k] c[i, j, k, :]``.

    The basis matrices are constants; only ``c`` (n0, n1, n2, C) is differentiable.
    """
    if c.ndim != 4 or c.shape[:3] != (b0.shape[1], b1.shape[1], b2.shape[1]):
        raise ShapeError(f"separable_expand: coefficients {c.shape} do not match bases "
                         f"{b0.shape}/{b1.shape}/{b2.shape}")
    out = Tensor._wrap(np.einsum("xi,yj,zk,ijkc->xyzc", b0, b1, b2, c.data, optimize=True))

    def bw(g):
        return (np.einsum("xi,yj,zk,xyzc->ijkc", b0, b1, b2, g[0], optimize=True),)

    record("separable_expand", (c,), (out,), bw)
    return out


def warp3d(vol: Tensor, disp: Tensor) -> Tensor:
    """Backward warp ``out(x) = vol(x + disp(x))`` with trilinear sampling.

    ``vol`` is (X, Y, Z), ``disp`` (X, Y, Z, 3) in voxels. Sample positions are
    clamped to the volume, so outside samples take the border value (and the
    displacement gradient vanishes along clamped axes).
    """
    shape = vol.shape
    if vol.ndim != 3 or disp.shape != shape + (3,):
        raise ShapeError(f"warp3d: volume {shape} needs displacement {shape + (3,)}, got {disp.shape}")
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"), axis=-1)
    raw = grid + disp.data
    hi = np.asarray(shape, dtype=np.float64) - 1.0
    pos = np.clip(raw, 0.0, hi)
    inside = (raw >= 0.0) & (raw <= hi)
    base = np.minimum(np.floor(pos), np.maximum(hi - 1.0, 0.0)).astype(np.int64)
    fx, fy, fz = np.moveaxis(pos - base, -1, 0)
    top = np.asarray(shape) - 1
    ix = [np.minimum(base[..., 0] + c, top[0]) * (shape[1] * shape[2]) for c in (0, 1)]
    iy = [np.minimum(base[..., 1] + c, top[1]) * shape[2] for c in (0, 1)]
    iz = [np.minimum(base[..., 2] + c, top[2]) for c in (0, 1)]
    # corner values c[i][j][k], then interpolate along z, y, x in turn
    idx = np.array([[[ix[i] + iy[j] + iz[k] for k in (0, 1)] for j in (0, 1)] for i in (0, 1)])
    c = vol.data.ravel()[idx]
    cz = c[:, :, 0] * (1.0 - fz) + c[:, :, 1] * fz  # (2, 2, X, Y, Z)
    cyz = cz[:, 0] * (1.0 - fy) + cz[:, 1] * fy  # (2, X, Y, Z)
    out = Tensor._wrap(cyz[0] * (1.0 - fx) + cyz[1] * fx)

    def bw(g):
        g = g[0]
        gv = None
        if vol.requires_grad:
            wx = np.stack([1.0 - fx, fx])[:, None, None]
            wy = np.stack([1.0 - fy, fy])[None, :, None]
            wz = np.stack([1.0 - fz, fz])[None, None, :]
            w = wx * wy * wz * g
            gv = np.bincount(idx.ravel(), weights=w.ravel(), minlength=vol.data.size).reshape(shape)
        dz = c[:, :, 1] - c[:, :, 0]
        dyz = dz[:, 0] * (1.0 - fy) + dz[:, 1] * fy
        gd = np.stack(
            [
                cyz[1] - cyz[0],
                (cz[0, 1] - cz[0, 0]) * (1.0 - fx) + (cz[1, 1] - cz[1, 0]) * fx,
                dyz[0] * (1.0 - fx) + dyz[1] * fx,
            ],
            axis=-1,
        )
        gd *= g[..., None] * inside
        return gv, gd

    record("warp3d", (vol, disp), (out,), bw)
    return out
