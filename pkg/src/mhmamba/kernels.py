"""Forward kernels on dense rank-5 volumes, plus the adjoints the tape needs.

Every array here is laid out as (batch, channel, depth, height, width) in
row-major order. Functions are pure: they never mutate their inputs.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORM_EPS = 1e-5
SOFTPLUS_LINEAR_ABOVE = 20.0

_SPATIAL = ("depth", "height", "width")


class ShapeError(ValueError):
    """Raised when an array shape violates a kernel precondition.

    ``axis`` names the offending axis so callers can report it.
    """

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


def check_volume(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 5:
        raise ShapeError(f"{name} must be rank-5 (B, C, D, H, W), got shape {x.shape}", axis="rank")
    for ax, n in zip(("batch", "channel") + _SPATIAL, x.shape):
        if n < 1:
            raise ShapeError(f"{name} has empty {ax} axis", axis=ax)


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _check_conv(x, weight, bias, stride, padding, groups):
    check_volume(x)
    if weight.ndim != 5:
        raise ShapeError(f"weight must be rank-5, got {weight.shape}", axis="rank")
    c_out, c_in_g, kd, kh, kw = weight.shape
    if not kd == kh == kw:
        raise ShapeError(f"only cubic kernels are supported, got {weight.shape[2:]}", axis="kernel")
    if groups < 1 or x.shape[1] % groups or c_out % groups:
        raise ShapeError(
            f"channels ({x.shape[1]} in, {c_out} out) not divisible by groups={groups}", axis="channel")
    if x.shape[1] != c_in_g * groups:
        raise ShapeError(
            f"input has {x.shape[1]} channels, weight expects {c_in_g * groups}", axis="channel")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)", axis="channel")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}", axis="kernel")
    for ax, n in zip(_SPATIAL, x.shape[2:]):
        if n + 2 * padding < kd:
            raise ShapeError(
                f"kernel {kd} does not fit padded {ax} extent {n + 2 * padding}", axis=ax)


def _pad(x, padding):
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _window_slice(start, count, stride):
    return slice(start, start + stride * (count - 1) + 1, stride)


def conv3d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Cross-correlation of ``x`` with ``weight`` (C_out, C_in/groups, k, k, k)."""
    _check_conv(x, weight, bias, stride, padding, groups)
    B = x.shape[0]
    c_out, _, k = weight.shape[:3]
    out_dims = tuple(conv_output_size(n, k, stride, padding) for n in x.shape[2:])
    n_out = int(np.prod(out_dims))

    if k == 1 and stride == 1 and padding == 0 and groups == 1:
        w2 = weight.reshape(c_out, -1)
        out = np.matmul(w2, x.reshape(B, x.shape[1], -1))
    elif groups == 1:
        xp = _pad(x, padding)
        w2 = weight.reshape(c_out, -1)
        out = np.empty((B, c_out, n_out), dtype=np.result_type(x, weight))
        for b in range(B):
            out[b] = w2 @ _im2col(xp[b], k, stride, out_dims)
    else:
        out = _grouped_conv(_pad(x, padding), weight, stride, groups, out_dims)
    out = out.reshape((B, c_out) + out_dims)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1, 1)
    return out


def _im2col(xb: np.ndarray, k: int, stride: int, out_dims) -> np.ndarray:
    """(C, D, H, W) padded sample -> (C*k^3, N_out) column matrix."""
    v = sliding_window_view(xb, (k, k, k), axis=(1, 2, 3))
    v = v[:, ::stride, ::stride, ::stride][:, :out_dims[0], :out_dims[1], :out_dims[2]]
    # (C, Do, Ho, Wo, k, k, k) -> (C, k, k, k, Do, Ho, Wo)
    return v.transpose(0, 4, 5, 6, 1, 2, 3).reshape(xb.shape[0] * k ** 3, -1)


def _grouped_conv(xp, weight, stride, groups, out_dims):
    B, C = xp.shape[:2]
    c_out, cg, k = weight.shape[:3]
    og = c_out // groups
    out = np.zeros((B, groups, og) + out_dims, dtype=np.result_type(xp, weight))
    wg = weight.reshape(groups, og, cg, k, k, k)
    depthwise = og == 1 and cg == 1
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                xs = xp[:, :, _window_slice(kd, out_dims[0], stride),
                        _window_slice(kh, out_dims[1], stride),
                        _window_slice(kw, out_dims[2], stride)]
                xs = xs.reshape((B, groups, cg) + out_dims)
                if depthwise:
                    out += wg[:, :, :, kd, kh, kw].reshape(1, groups, 1, 1, 1, 1) * xs
                else:
                    out += np.einsum("goc,bgcdhw->bgodhw", wg[..., kd, kh, kw], xs)
    return out.reshape(B, c_out, -1)


def conv3d_backward(gout, x, weight, stride=1, padding=0, groups=1, need_x=True, need_w=True):
    """Adjoint of :func:`conv3d` w.r.t. input and weight (bias grad is a plain sum)."""
    B = x.shape[0]
    c_out, cg, k = weight.shape[:3]
    out_dims = gout.shape[2:]
    gx = gw = None

    if k == 1 and stride == 1 and padding == 0 and groups == 1:
        g2 = gout.reshape(B, c_out, -1)
        w2 = weight.reshape(c_out, -1)
        if need_w:
            gw = np.einsum("bon,bcn->oc", g2, x.reshape(B, x.shape[1], -1)).reshape(weight.shape)
        if need_x:
            gx = np.matmul(w2.T, g2).reshape(x.shape)
        return gx, gw

    xp = _pad(x, padding)
    gxp = np.zeros_like(xp) if need_x else None
    if groups == 1:
        w2 = weight.reshape(c_out, -1)
        gw2 = np.zeros_like(w2) if need_w else None
        for b in range(B):
            g2 = gout[b].reshape(c_out, -1)
            if need_w:
                gw2 += g2 @ _im2col(xp[b], k, stride, out_dims).T
            if need_x:
                gcols = (w2.T @ g2).reshape((x.shape[1], k, k, k) + tuple(out_dims))
                for kd in range(k):
                    for kh in range(k):
                        for kw in range(k):
                            gxp[b, :, _window_slice(kd, out_dims[0], stride),
                                _window_slice(kh, out_dims[1], stride),
                                _window_slice(kw, out_dims[2], stride)] += gcols[:, kd, kh, kw]
        if need_w:
            gw = gw2.reshape(weight.shape)
    else:
        og = c_out // groups
        wg = weight.reshape(groups, og, cg, k, k, k)
        gg = gout.reshape((B, groups, og) + tuple(out_dims))
        gwg = np.zeros_like(wg) if need_w else None
        depthwise = og == 1 and cg == 1
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    sl = (slice(None), slice(None), _window_slice(kd, out_dims[0], stride),
                          _window_slice(kh, out_dims[1], stride),
                          _window_slice(kw, out_dims[2], stride))
                    xs = xp[sl].reshape((B, groups, cg) + tuple(out_dims))
                    if depthwise:
                        if need_w:
                            gwg[:, 0, 0, kd, kh, kw] = np.einsum("bgdhw,bgdhw->g", gg[:, :, 0], xs[:, :, 0])
                        if need_x:
                            gxp[sl] += (wg[:, 0, 0, kd, kh, kw].reshape(1, groups, 1, 1, 1)
                                        * gg[:, :, 0]).reshape(gxp[sl].shape)
                    else:
                        if need_w:
                            gwg[..., kd, kh, kw] = np.einsum("bgodhw,bgcdhw->goc", gg, xs)
                        if need_x:
                            gxp[sl] += np.einsum("goc,bgodhw->bgcdhw", wg[..., kd, kh, kw],
                                                 gg).reshape(gxp[sl].shape)
        if need_w:
            gw = gwg.reshape(weight.shape)
    if need_x:
        p = padding
        gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3], p:p + x.shape[4]] if p else gxp
    return gx, gw


# --------------------------------------------------------------------------
# Sobel edge magnitude
# --------------------------------------------------------------------------

_SMOOTH = (1.0, 2.0, 1.0)
_DERIV = (-1.0, 0.0, 1.0)


def _reflect_index(n: int) -> np.ndarray:
    # mirror without repeating the edge; a singleton axis mirrors onto itself
    if n == 1:
        return np.zeros(3, dtype=np.intp)
    return np.concatenate(([1], np.arange(n), [n - 2]))


def reflect_pad1(x: np.ndarray) -> np.ndarray:
    for axis in (2, 3, 4):
        x = np.take(x, _reflect_index(x.shape[axis]), axis=axis)
    return x


def reflect_pad1_adjoint(g: np.ndarray, shape) -> np.ndarray:
    for axis in (4, 3, 2):
        n = shape[axis]
        idx = _reflect_index(n)
        moved = np.moveaxis(g, axis, 0)
        acc = np.zeros((n,) + moved.shape[1:], dtype=g.dtype)
        np.add.at(acc, idx, moved)
        g = np.moveaxis(acc, 0, axis)
    return g


def _stencil(a, axis, taps):
    n = a.shape[axis] - 2
    out = None
    for j, t in enumerate(taps):
        if t == 0.0:
            continue
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(j, j + n)
        term = a[tuple(sl)] if t == 1.0 else t * a[tuple(sl)]
        out = term if out is None else out + term
    return out


def _stencil_adjoint(g, axis, taps):
    shape = list(g.shape)
    n = shape[axis]
    shape[axis] = n + 2
    out = np.zeros(shape, dtype=g.dtype)
    for j, t in enumerate(taps):
        if t == 0.0:
            continue
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(j, j + n)
        out[tuple(sl)] += t * g
    return out


def _axis_taps(direction):
    return [(_DERIV if ax == direction else _SMOOTH) for ax in range(3)]


def sobel_components(x: np.ndarray):
    """Directional responses (Gd, Gh, Gw), each shaped like ``x``."""
    check_volume(x)
    xp = reflect_pad1(x)
    comps = []
    for direction in range(3):
        a = xp
        for ax, taps in enumerate(_axis_taps(direction)):
            a = _stencil(a, ax + 2, taps)
        comps.append(a)
    return tuple(comps)


def sobel3d(x: np.ndarray) -> np.ndarray:
    gd, gh, gw = sobel_components(x)
    return np.sqrt(gd * gd + gh * gh + gw * gw)


def sobel3d_backward(gout, x, comps, mag):
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(mag > 0, gout / mag, 0.0).astype(gout.dtype)
    gxp = None
    for direction, comp in enumerate(comps):
        g = scale * comp
        for ax, taps in reversed(list(enumerate(_axis_taps(direction)))):
            g = _stencil_adjoint(g, ax + 2, taps)
        gxp = g if gxp is None else gxp + g
    return reflect_pad1_adjoint(gxp, x.shape)


# --------------------------------------------------------------------------
# normalisation
# --------------------------------------------------------------------------

def _normalize(x, gamma, beta, axes, eps):
    check_volume(x)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"gamma/beta must have shape ({C},)", axis="channel")
    mean = x.mean(axis=axes, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.reshape(1, C, 1, 1, 1) + beta.reshape(1, C, 1, 1, 1)
    return out, xhat, rstd


def layer_norm(x, gamma, beta, eps=NORM_EPS, return_cache=False):
    """Normalise across channels independently at every voxel."""
    out, xhat, rstd = _normalize(x, gamma, beta, (1,), eps)
    return (out, xhat, rstd) if return_cache else out


def instance_norm(x, gamma, beta, eps=NORM_EPS, return_cache=False):
    """Normalise over (D, H, W) independently for every (batch, channel)."""
    out, xhat, rstd = _normalize(x, gamma, beta, (2, 3, 4), eps)
    return (out, xhat, rstd) if return_cache else out


def norm_backward(gout, xhat, rstd, gamma, axes):
    C = xhat.shape[1]
    ggamma = (gout * xhat).sum(axis=(0, 2, 3, 4))
    gbeta = gout.sum(axis=(0, 2, 3, 4))
    gxhat = gout * gamma.reshape(1, C, 1, 1, 1)
    gx = rstd * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                 - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
    return gx, ggamma, gbeta


# --------------------------------------------------------------------------
# pooling statistics
# --------------------------------------------------------------------------

POOL_KINDS = ("gap", "gmp", "mean", "std", "max", "min")


def pool_stats(x: np.ndarray, kind: str) -> np.ndarray:
    """Global spatial pooling (gap/gmp) or per-voxel channel statistics."""
    check_volume(x)
    if kind == "gap":
        return x.mean(axis=(2, 3, 4), keepdims=True)
    if kind == "gmp":
        return x.max(axis=(2, 3, 4), keepdims=True)
    if kind == "mean":
        return x.mean(axis=1, keepdims=True)
    if kind == "std":
        return x.std(axis=1, keepdims=True)
    if kind == "max":
        return x.max(axis=1, keepdims=True)
    if kind == "min":
        return x.min(axis=1, keepdims=True)
    raise ValueError(f"unknown pooling kind {kind!r}; expected one of {POOL_KINDS}")


def _arg_onehot(x, axis, reduce):
    # first index wins on ties
    idx = (np.argmax if reduce == "max" else np.argmin)(x, axis=axis)
    onehot = np.zeros_like(x)
    np.put_along_axis(onehot, np.expand_dims(idx, axis), 1.0, axis=axis)
    return onehot


def pool_stats_backward(gout, x, out, kind):
    if kind == "gap":
        n = x.shape[2] * x.shape[3] * x.shape[4]
        return np.broadcast_to(gout / n, x.shape).copy()
    if kind == "mean":
        return np.broadcast_to(gout / x.shape[1], x.shape).copy()
    if kind == "std":
        C = x.shape[1]
        mean = x.mean(axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(out > 0, gout / (C * out), 0.0)
        return (x - mean) * scale
    if kind == "gmp":
        B, C = x.shape[:2]
        flat = x.reshape(B, C, -1)
        return (_arg_onehot(flat, 2, "max") * gout.reshape(B, C, 1)).reshape(x.shape)
    if kind in ("max", "min"):
        return _arg_onehot(x, 1, kind) * gout
    raise ValueError(f"unknown pooling kind {kind!r}")


# --------------------------------------------------------------------------
# pointwise maps
# --------------------------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def relu(x):
    return np.maximum(x, 0)


def softplus(x):
    x = np.asarray(x)
    safe = np.minimum(x, SOFTPLUS_LINEAR_ABOVE)
    return np.where(x > SOFTPLUS_LINEAR_ABOVE, x, np.log1p(np.exp(safe))).astype(x.dtype, copy=False)


def check_broadcast(a_shape, b_shape) -> tuple:
    """Shape of ``a op b`` when only singleton axes (or a scalar) broadcast."""
    if len(a_shape) == 0 or len(b_shape) == 0:
        return tuple(a_shape) or tuple(b_shape)
    if len(a_shape) != len(b_shape):
        raise ShapeError(f"cannot broadcast {a_shape} with {b_shape}: rank differs", axis="rank")
    out = []
    for i, (m, n) in enumerate(zip(a_shape, b_shape)):
        if m != n and m != 1 and n != 1:
            raise ShapeError(f"cannot broadcast {a_shape} with {b_shape} on axis {i}", axis=str(i))
        out.append(max(m, n))
    return tuple(out)


def elementwise(x, f: str, y=None):
    """Pointwise ``f`` in {sigmoid, relu, softplus, add, mul, scale}.

    ``add``/``mul`` take a second array ``y``; ``scale`` takes a scalar ``y``.
    """
    if f == "sigmoid":
        return sigmoid(x)
    if f == "relu":
        return relu(x)
    if f == "softplus":
        return softplus(x)
    if f in ("add", "mul"):
        check_broadcast(np.shape(x), np.shape(y))
        return x + y if f == "add" else x * y
    if f == "scale":
        if np.ndim(y) != 0:
            raise ShapeError("scale expects a scalar factor", axis="rank")
        return x * y
    raise ValueError(f"unknown elementwise map {f!r}")


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------

def linear_resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) half-pixel-centred linear interpolation weights."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[i, i0] += 1.0 - w
        m[i, i1] += w
    return m


def resize_trilinear(x: np.ndarray, out_dims) -> np.ndarray:
    for axis, n_out in zip((2, 3, 4), out_dims):
        m = linear_resize_matrix(x.shape[axis], n_out, x.dtype)
        x = np.moveaxis(np.tensordot(m, x, axes=(1, axis)), 0, axis)
    return x


def resize_trilinear_adjoint(g: np.ndarray, in_dims) -> np.ndarray:
    for axis, n_in in zip((4, 3, 2), tuple(in_dims)[::-1]):
        m = linear_resize_matrix(n_in, g.shape[axis], g.dtype)
        g = np.moveaxis(np.tensordot(m.T, g, axes=(1, axis)), 0, axis)
    return g


# --------------------------------------------------------------------------
# linear recurrence h_t = a_t * h_{t-1} + u_t along axis 1
# --------------------------------------------------------------------------

def linear_scan_sequential(a: np.ndarray, u: np.ndarray, h0=None) -> np.ndarray:
    """Left-to-right recurrence scanning axis 1, from h_{-1} = h0 (default 0)."""
    h = np.empty_like(u)
    prev = np.zeros_like(u[:, 0]) if h0 is None else h0
    for t in range(u.shape[1]):
        prev = a[:, t] * prev + u[:, t]
        h[:, t] = prev
    return h


# elements per scan segment; keeps the working set of a segment cache-resident
SCAN_SEGMENT_ELEMENTS = 1 << 20


def _scan_chunks(a, u, chunk, h0=None):
    B, N = u.shape[:2]
    rest = u.shape[2:]
    m = -(-N // chunk)
    pad = m * chunk - N
    if pad:
        a = np.concatenate([a, np.ones((B, pad) + rest, dtype=a.dtype)], axis=1)
        u = np.concatenate([u, np.zeros((B, pad) + rest, dtype=u.dtype)], axis=1)
    # step-major layout (B, chunk, m, ...) so each lockstep update reads one contiguous slab
    a = np.ascontiguousarray(a.reshape((B, m, chunk) + rest).swapaxes(1, 2))
    # always a copy: with m == 1 the swapped view is already contiguous and would alias u
    h = np.array(u.reshape((B, m, chunk) + rest).swapaxes(1, 2), order="C")
    decay = np.empty_like(a)
    decay[:, 0] = a[:, 0]
    for i in range(1, chunk):
        hi = h[:, i]
        hi += a[:, i] * h[:, i - 1]
        np.multiply(a[:, i], decay[:, i - 1], out=decay[:, i])

    carry = np.zeros((B, m) + rest, dtype=u.dtype)
    if h0 is not None:
        carry[:, 0] = h0
    for j in range(1, m):
        carry[:, j] = decay[:, -1, j - 1] * carry[:, j - 1] + h[:, -1, j - 1]
    decay *= carry[:, None]
    h += decay
    return h.swapaxes(1, 2).reshape((B, m * chunk) + rest)[:, :N]


def linear_scan_blocked(a: np.ndarray, u: np.ndarray, chunk: int, h0=None) -> np.ndarray:
    """Same recurrence as :func:`linear_scan_sequential`, chunked.

    Each chunk is scanned locally from a zero state (all chunks advance in
    lockstep, vectorised), then boundary states are carried across chunks
    with the composition (a, u) o (a', u') = (a'a, a'u + u'), and finally
    each local state is corrected by its cumulative decay times the carry.
    Long sequences are processed in segments of whole chunks, passing the
    final state along, so memory traffic stays linear in N. ``h0`` is an
    optional incoming state (default zero).
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    B, N = u.shape[:2]
    if chunk >= N:
        return linear_scan_sequential(a, u, h0)
    m = -(-N // chunk)
    # equal segments of whole chunks, as many as the element budget requires
    segments = min(m, -(-N * u[:, 0].size // SCAN_SEGMENT_ELEMENTS))
    if segments <= 1:
        return _scan_chunks(a, u, chunk, h0)
    span = -(-m // segments) * chunk
    out = np.empty(u.shape, dtype=np.result_type(a, u))
    for s in range(0, N, span):
        out[:, s:s + span] = _scan_chunks(a[:, s:s + span], u[:, s:s + span], chunk, h0)
        h0 = out[:, min(s + span, N) - 1]
    return out


def linear_scan(a, u, chunk=None):
    return linear_scan_sequential(a, u) if chunk is None else linear_scan_blocked(a, u, chunk)


def linear_scan_adjoint(g, a, chunk=None):
    """Adjoint state lam_t = g_t + a_{t+1} lam_{t+1}, run as a reversed scan."""
    a_next = np.zeros_like(a)
    a_next[:, :-1] = a[:, 1:]
    lam = linear_scan(a_next[:, ::-1], g[:, ::-1], chunk)
    return np.ascontiguousarray(lam[:, ::-1])
