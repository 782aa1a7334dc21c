"""Network kernels on top of the tensor core: conv, pooling, norms, softmax.

Convolution (cross-correlation convention) goes through explicit im2col +
batched matmul; the column buffer is kept alive for the backward pass.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError
from .tensor import Tensor, _accum, _record


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Padded input [B,C,Hp,Wp] -> copy of windows [B,C,kh,kw,ho,wo]."""
    b, c, hp, wp = xp.shape
    sb, sc, srow, scol = xp.strides
    view = as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, srow, scol, srow * sh, scol * sw),
        writeable=False,
    )
    return np.ascontiguousarray(view)


def _col2im(dcols: np.ndarray, x_shape, kh, kw, sh, sw, ph, pw, ho, wo) -> np.ndarray:
    """Scatter-add window gradients [B,C,kh,kw,ho,wo] back to input shape."""
    b, c, h, w = x_shape
    dxp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), np.float32)
    for i in range(kh):
        hi = i + sh * ho
        for j in range(kw):
            wj = j + sw * wo
            dxp[:, :, i:hi:sh, j:wj:sw] += dcols[:, :, i, j]
    if ph or pw:
        return dxp[:, :, ph : ph + h, pw : pw + w]
    return dxp


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0,
           groups: int = 1) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x[B,C,H,W] and w[O,C/g,kh,kw]")
    b, c, h, ww = x.shape
    o, cg, kh, kw = w.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if c % groups or o % groups:
        raise ShapeError(f"channels ({c}) and filters ({o}) must divide groups ({groups})")
    if cg != c // groups:
        raise ShapeError(f"weight expects {cg} input channels per group, input has {c // groups}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (ww + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty: input {h}x{ww}, kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = _im2col(xp, kh, kw, sh, sw, ho, wo)  # [B,C,kh,kw,ho,wo]
    gsz = c // groups
    k = gsz * kh * kw
    cols = win.reshape(b, groups, k, ho * wo)
    wm = w.data.reshape(groups, o // groups, k)
    out4 = np.matmul(wm[None], cols)  # [B,g,O/g,ho*wo]
    y = out4.reshape(b, o, ho, wo)
    if bias is not None:
        y = y + bias.data.reshape(1, o, 1, 1)
    out = Tensor(y)

    def bwd(g):
        g4 = g.reshape(b, groups, o // groups, ho * wo)
        if w.requires_grad:
            dw = np.matmul(g4, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            _accum(w, dw.reshape(w.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(wm.transpose(0, 2, 1)[None], g4)  # [B,g,k,ho*wo]
            dcols = dcols.reshape(b, c, kh, kw, ho, wo)
            _accum(x, _col2im(dcols, x.shape, kh, kw, sh, sw, ph, pw, ho, wo))

    parents = (x, w) if bias is None else (x, w, bias)
    return _record(out, parents, bwd, "conv2d")


def conv_transpose2x(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2 transposed conv with a 2x2 kernel (exact 2x upsampling tower step).

    w has shape [C_in, C_out, 2, 2]; output is [B,C_out,2H,2W].
    """
    if w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ShapeError("conv_transpose2x expects w[Cin,Cout,2,2]")
    b, c, h, ww = x.shape
    cin, cout = w.shape[:2]
    if cin != c:
        raise ShapeError(f"conv_transpose2x channel mismatch: {cin} vs {c}")
    # y[:, :, 2i+a, 2j+b] = sum_c x[:,c,i,j] * w[c,:,a,b]
    xm = x.data.reshape(b, c, h * ww)
    wm = w.data.reshape(c, cout * 4)
    y4 = np.matmul(xm.transpose(0, 2, 1), wm)  # [B, h*w, cout*4]
    y4 = y4.reshape(b, h, ww, cout, 2, 2).transpose(0, 3, 1, 4, 2, 5)
    y = np.ascontiguousarray(y4).reshape(b, cout, 2 * h, 2 * ww)
    if bias is not None:
        y = y + bias.data.reshape(1, cout, 1, 1)
    out = Tensor(y)

    def bwd(g):
        g6 = g.reshape(b, cout, h, 2, ww, 2).transpose(0, 2, 4, 1, 3, 5)
        g2 = np.ascontiguousarray(g6).reshape(b, h * ww, cout * 4)
        if w.requires_grad:
            dw = np.matmul(xm, g2).sum(axis=0)  # [c, cout*4]
            _accum(w, dw.reshape(w.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = np.matmul(g2, wm.T)  # [B, h*w, c]
            _accum(x, np.ascontiguousarray(dx.transpose(0, 2, 1)).reshape(x.shape))

    parents = (x, w) if bias is None else (x, w, bias)
    return _record(out, parents, bwd, "conv_transpose2x")


def max_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    b, c, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"pool kernel {kh}x{kw} larger than input {h}x{w}")
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    win = _im2col(x.data, kh, kw, sh, sw, ho, wo)  # [B,C,kh,kw,ho,wo]
    flat = win.reshape(b, c, kh * kw, ho, wo)
    idx = flat.argmax(axis=2)
    out = Tensor(np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0])

    def bwd(g):
        ki, kj = np.divmod(idx, kw)
        ii = ki + sh * np.arange(ho)[None, None, :, None]
        jj = kj + sw * np.arange(wo)[None, None, None, :]
        dx = np.zeros_like(x.data)
        bb = np.arange(b)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(dx, (bb, cc, ii, jj), g)
        _accum(x, dx)

    return _record(out, (x,), bwd, "max_pool2d")


def avg_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    b, c, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"pool kernel {kh}x{kw} larger than input {h}x{w}")
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    win = _im2col(x.data, kh, kw, sh, sw, ho, wo)
    out = Tensor(win.mean(axis=(2, 3)))
    inv = np.float32(1.0 / (kh * kw))

    def bwd(g):
        dcols = np.broadcast_to((g * inv)[:, :, None, None], (b, c, kh, kw, ho, wo))
        _accum(x, _col2im(np.ascontiguousarray(dcols), x.shape, kh, kw, sh, sw, 0, 0, ho, wo))

    return _record(out, (x,), bwd, "avg_pool2d")


def adaptive_avg_pool2d(x: Tensor, out_hw) -> Tensor:
    """Average pool to a fixed output grid; bins have near-equal width."""
    oh, ow = _pair(out_hw)
    b, c, h, w = x.shape
    hb = [(i * h // oh, (i + 1) * h // oh) for i in range(oh)]
    wb = [(j * w // ow, (j + 1) * w // ow) for j in range(ow)]
    y = np.empty((b, c, oh, ow), np.float32)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            y[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))
    out = Tensor(y)

    def bwd(g):
        dx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                dx[:, :, h0:h1, w0:w1] += g[:, :, i : i + 1, j : j + 1] / ((h1 - h0) * (w1 - w0))
        _accum(x, dx)

    return _record(out, (x,), bwd, "adaptive_avg_pool2d")


def upsample_nearest2x(x: Tensor, scale: int = 2) -> Tensor:
    s = int(scale)
    b, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, s, axis=2), s, axis=3)
    out = Tensor(y)

    def bwd(g):
        _accum(x, g.reshape(b, c, h, s, w, s).sum(axis=(3, 5)))

    return _record(out, (x,), bwd, "upsample_nearest")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, momentum: float = 0.9, eps: float = 1e-5,
               training: bool = True) -> Tensor:
    """Per-channel batch norm over [B,C,H,W]; running stats updated in place."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    axes = (0, 2, 3)
    shp = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    xhat = (x.data - mu.reshape(shp)) * inv.reshape(shp)
    out = Tensor(gamma.data.reshape(shp) * xhat + beta.data.reshape(shp))

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            gi = g * gamma.data.reshape(shp)
            if training:
                n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
                t1 = gi.sum(axis=axes).reshape(shp)
                t2 = (gi * xhat).sum(axis=axes).reshape(shp)
                dx = inv.reshape(shp) * (gi - t1 / n - xhat * t2 / n)
            else:
                dx = gi * inv.reshape(shp)
            _accum(x, dx.astype(np.float32))

    return _record(out, (x, gamma, beta), bwd, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer norm over the last axis with affine (gamma, beta)."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    xhat = (x.data - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gi = g * gamma.data
            t1 = gi.mean(axis=-1, keepdims=True)
            t2 = (gi * xhat).mean(axis=-1, keepdims=True)
            _accum(x, (inv * (gi - t1 - xhat * t2)).astype(np.float32))

    return _record(out, (x, gamma, beta), bwd, "layer_norm")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
               eps: float = 1e-5) -> Tensor:
    """Group norm over [B,C,H,W]: per-sample statistics on channel groups.

    No running state, so train and eval forwards are identical; the
    recognizer relies on this for its train/infer bit-equality contract.
    """
    b, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"channels ({c}) not divisible by groups ({groups})")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    xhat = ((xg - mu) * inv).reshape(b, c, h, w)
    shp = (1, c, 1, 1)
    out = Tensor(gamma.data.reshape(shp) * xhat + beta.data.reshape(shp))

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gi = (g * gamma.data.reshape(shp)).reshape(b, groups, -1)
            xh = xhat.reshape(b, groups, -1)
            t1 = gi.mean(axis=2, keepdims=True)
            t2 = (gi * xh).mean(axis=2, keepdims=True)
            dx = (inv * (gi - t1 - xh * t2)).reshape(b, c, h, w)
            _accum(x, dx.astype(np.float32))

    return _record(out, (x, gamma, beta), bwd, "group_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - dot))

    return _record(out, (x,), bwd, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(z - lse)
    sm = np.exp(out.data)

    def bwd(g):
        _accum(x, g - sm * g.sum(axis=axis, keepdims=True))

    return _record(out, (x,), bwd, "log_softmax")
