"""Differentiable tensor operations used by the generator, discriminator and U-Net.

Every op is a pure function of its inputs. When a :class:`Tape` is active and
an input requires a gradient, the op records a closure that maps the output
gradient to input gradients.

Convolutions are computed as chunked im2col products, split into row blocks
so that no intermediate exceeds ``CHUNK_ELEMS`` elements; stride-1 kernels of
width ``FFT_MIN_KERNEL`` or more are evaluated with FFTs instead. Both choices
depend only on shapes, so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from itertools import product
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft

from volshift.errors import PreconditionError, ShapeError
from volshift.voltensor.tensor import Tensor, active_tape

CHUNK_ELEMS = 1 << 23
# stride-1 kernels at least this wide go through the FFT path
FFT_MIN_KERNEL = 5

LEAKY_SLOPE = 0.2
INSTANCE_NORM_EPS = 1e-5
BCE_CLAMP = 1e-7


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        tape.record(op, inputs, out, backward)
    return out


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_5d(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{what}: expected [N, C, D, H, W] tensor, got shape {x.shape}")


# ----------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    return _result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    return _result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    return _result(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def sum_all(x: Tensor) -> Tensor:
    return _result("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _result("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def detach(x: Tensor) -> Tensor:
    return x.detach()


# ----------------------------------------------------------------------------
# padding, cropping, resampling


@dataclass(frozen=True)
class PadSpec:
    """Symmetric spatial padding of ``n`` voxels, zero-filled or mirrored."""

    mode: str = "zero"
    n: int = 0

    def __post_init__(self):
        if self.mode not in ("zero", "reflect"):
            raise PreconditionError(f"unknown padding mode {self.mode!r}")
        if self.n < 0:
            raise PreconditionError("padding must be non-negative")

    @classmethod
    def zero(cls, n: int) -> "PadSpec":
        return cls("zero", n)

    @classmethod
    def reflect(cls, n: int) -> "PadSpec":
        return cls("reflect", n)


Pads3 = tuple[tuple[int, int], tuple[int, int], tuple[int, int]]


def _norm_pads(pads) -> Pads3:
    if isinstance(pads, (int, np.integer)):
        return ((int(pads), int(pads)),) * 3
    out = tuple((int(p[0]), int(p[1])) for p in pads)
    if len(out) != 3:
        raise PreconditionError(f"need three (before, after) pad pairs, got {pads!r}")
    return out  # type: ignore[return-value]


def _fold_reflect(g: np.ndarray, axis: int, n: int, p0: int, p1: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    res = g[p0:p0 + n].copy()
    if p0:
        res[1:p0 + 1] += g[:p0][::-1]
    if p1:
        res[n - 1 - p1:n - 1] += g[p0 + n:][::-1]
    return np.moveaxis(res, 0, axis)


def pad3d(x: Tensor, pads, mode: str = "zero") -> Tensor:
    """Pad the three spatial axes. ``pads`` is an int or three (before, after) pairs."""
    _check_5d(x, "pad3d")
    pp = _norm_pads(pads)
    if all(a == 0 and b == 0 for a, b in pp):
        return x
    spatial = x.shape[2:]
    if mode == "reflect":
        for ax, ((a, b), n) in enumerate(zip(pp, spatial)):
            if a >= n or b >= n:
                raise PreconditionError(
                    f"reflection pad ({a}, {b}) must be smaller than extent {n} on spatial axis {ax}")
        data = np.pad(x.data, ((0, 0), (0, 0)) + pp, mode="reflect")
    elif mode == "zero":
        data = np.pad(x.data, ((0, 0), (0, 0)) + pp, mode="constant")
    else:
        raise PreconditionError(f"unknown padding mode {mode!r}")

    def backward(g):
        if mode == "zero":
            sl = tuple(slice(a, a + n) for (a, _), n in zip(pp, spatial))
            return (np.ascontiguousarray(g[(slice(None), slice(None)) + sl]),)
        for ax, ((a, b), n) in enumerate(zip(pp, spatial)):
            g = _fold_reflect(g, ax + 2, n, a, b)
        return (np.ascontiguousarray(g),)

    return _result(f"pad3d[{mode}]", data, (x,), backward)


def reflection_pad3d(x: Tensor, n: int) -> Tensor:
    """Mirror-pad by ``n`` voxels without repeating the edge voxel."""
    return pad3d(x, n, "reflect")


def crop3d(x: Tensor, starts: Sequence[int], sizes: Sequence[int]) -> Tensor:
    _check_5d(x, "crop3d")
    sl = tuple(slice(s, s + n) for s, n in zip(starts, sizes))
    for s, n, e in zip(starts, sizes, x.shape[2:]):
        if s < 0 or n < 1 or s + n > e:
            raise ShapeError(f"crop [{s}, {s + n}) outside extent {e}")
    full = (slice(None), slice(None)) + sl

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[full] = g
        return (gx,)

    return _result("crop3d", np.ascontiguousarray(x.data[full]), (x,), backward)


def upsample_nearest3d(x: Tensor, factor: int) -> Tensor:
    """Replicate every voxel ``factor`` times along each spatial axis."""
    _check_5d(x, "upsample_nearest3d")
    if factor < 1:
        raise PreconditionError("upsampling factor must be >= 1")
    if factor == 1:
        return x
    n, c, d, h, w = x.shape
    f = factor
    data = np.broadcast_to(
        x.data[:, :, :, None, :, None, :, None], (n, c, d, f, h, f, w, f)
    ).reshape(n, c, d * f, h * f, w * f)

    def backward(g):
        return (g.reshape(n, c, d, f, h, f, w, f).sum(axis=(3, 5, 7)),)

    return _result("upsample_nearest3d", np.ascontiguousarray(data), (x,), backward)


def maxpool3d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first voxel in scan order."""
    _check_5d(x, "maxpool3d")
    if size < 1:
        raise PreconditionError("pool size must be >= 1")
    if size == 1:
        return x
    n, c, d, h, w = x.shape
    for ax, e in zip("DHW", (d, h, w)):
        if e % size:
            raise PreconditionError(f"maxpool3d: extent {ax}={e} not divisible by {size}")
    s = size
    blocks = x.data.reshape(n, c, d // s, s, h // s, s, w // s, s).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(n, c, d // s, h // s, w // s, s ** 3)
    arg = blocks.argmax(axis=-1)
    data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, d // s, h // s, w // s, s, s, s).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gb.reshape(n, c, d, h, w),)

    return _result("maxpool3d", np.ascontiguousarray(data), (x,), backward)


# ----------------------------------------------------------------------------
# convolution


def _out_extent(e: int, k: int, s: int) -> int:
    return (e - k) // s + 1


def _row_blocks(c: int, k: int, cols_per_row: int) -> list[tuple]:
    """Index keys into the leading ``[C, k]`` axes of the column tensor, one per block."""
    if c * k ** 3 * cols_per_row <= CHUNK_ELEMS:
        return [(slice(None),)]
    per = CHUNK_ELEMS // (k ** 3 * cols_per_row)
    if per >= 1:
        return [(slice(i, min(i + per, c)),) for i in range(0, c, per)]
    return [(ci, slice(a, a + 1)) for ci in range(c) for a in range(k)]


class _Corr:
    """Strided cross-correlation ``(N,C,...) x (O,C,k,k,k) -> (N,O,...)`` of a padded input.

    Columns are built from a ``[C, k, k, k, N, D', H', W']`` window view; the
    column blocks are kept when ``keep`` is set so the weight gradient can
    reuse them.
    """

    def __init__(self, xp: np.ndarray, w: np.ndarray, s: int, keep: bool = False):
        n, c = xp.shape[:2]
        o, k = w.shape[0], w.shape[2]
        self.k, self.s, self.w_shape = k, s, w.shape
        view = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
        if s > 1:
            view = view[:, :, ::s, ::s, ::s]
        self.out_sp = view.shape[2:5]
        self.view = view.transpose(1, 5, 6, 7, 0, 2, 3, 4)
        m = n * int(np.prod(self.out_sp))
        self.blocks = _row_blocks(c, k, m)
        acc = None
        self.cols = [] if keep else None
        for key in self.blocks:
            cols = np.ascontiguousarray(self.view[key]).reshape(-1, m)
            part = w[(slice(None),) + key].reshape(o, -1) @ cols
            if acc is None:
                acc = part
            else:
                acc += part
            if keep:
                self.cols.append(cols)
        self.out = np.ascontiguousarray(acc.reshape((o, n) + self.out_sp).transpose(1, 0, 2, 3, 4))

    def wgrad(self, g: np.ndarray) -> np.ndarray:
        o = g.shape[1]
        gmat = g.transpose(1, 0, 2, 3, 4).reshape(o, -1)
        gw = np.empty(self.w_shape, dtype=g.dtype)
        for i, key in enumerate(self.blocks):
            if self.cols is not None:
                cols = self.cols[i]
            else:
                cols = np.ascontiguousarray(self.view[key]).reshape(gmat.shape[1], -1).T  # pragma: no cover
            dst = (slice(None),) + key
            gw[dst] = (gmat @ cols.T).reshape(gw[dst].shape)
        return gw


def _corr(xp: np.ndarray, w: np.ndarray, s: int) -> np.ndarray:
    return _Corr(xp, w, s).out


def _corr_xgrad(g: np.ndarray, w: np.ndarray, s: int, in_spatial: Sequence[int]) -> np.ndarray:
    """Adjoint of :func:`_corr` with respect to its input.

    Stride 1 uses a full correlation with the flipped, channel-swapped kernel;
    larger strides scatter-add one kernel offset at a time.
    """
    n, o, do, ho, wo = g.shape
    c, k = w.shape[1], w.shape[2]
    if s == 1 and tuple(in_spatial) == (do + k - 1, ho + k - 1, wo + k - 1):
        gp = np.pad(g, ((0, 0), (0, 0)) + ((k - 1, k - 1),) * 3)
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        return _Corr(gp, wf, 1).out
    m = do * ho * wo
    gx = np.zeros((c, n) + tuple(in_spatial), dtype=g.dtype)
    gmat = g.transpose(1, 0, 2, 3, 4).reshape(o, n * m)
    wt = w.reshape(o, c * k ** 3).T
    cols = (wt @ gmat).reshape(c, k, k, k, n, do, ho, wo)
    for a, b, cc in product(range(k), repeat=3):
        gx[:, :, a:a + s * (do - 1) + 1:s, b:b + s * (ho - 1) + 1:s, cc:cc + s * (wo - 1) + 1:s] += \
            cols[:, a, b, cc]
    return np.ascontiguousarray(gx.transpose(1, 0, 2, 3, 4))


class _FFTCorr:
    """Stride-1 cross-correlation evaluated in the Fourier domain.

    Used for large kernels, where im2col would replicate every voxel ``k**3``
    times. With transform size equal to the padded extent none of the three
    products (forward, input gradient, weight gradient) wraps around.
    """

    def __init__(self, xp: np.ndarray, w: np.ndarray):
        self.k = w.shape[2]
        self.size = xp.shape[2:]
        self.out_sp = tuple(e - self.k + 1 for e in self.size)
        self.dtype = xp.dtype
        self.xf = sp_fft.rfftn(xp, s=self.size, axes=(2, 3, 4))
        self.wf = sp_fft.rfftn(w, s=self.size, axes=(2, 3, 4))
        prod = np.einsum("ncxyz,ocxyz->noxyz", self.xf, self.wf.conj(), optimize=False)
        self.out = self._inverse(prod, self.out_sp)

    def _inverse(self, f: np.ndarray, keep: Sequence[int]) -> np.ndarray:
        full = sp_fft.irfftn(f, s=self.size, axes=(2, 3, 4))
        a, b, c = keep
        return np.ascontiguousarray(full[:, :, :a, :b, :c], dtype=self.dtype)

    def _gf(self, g: np.ndarray) -> np.ndarray:
        return sp_fft.rfftn(g, s=self.size, axes=(2, 3, 4))

    def xgrad(self, g: np.ndarray) -> np.ndarray:
        prod = np.einsum("noxyz,ocxyz->ncxyz", self._gf(g), self.wf, optimize=False)
        return self._inverse(prod, self.size)

    def wgrad(self, g: np.ndarray) -> np.ndarray:
        prod = np.einsum("ncxyz,noxyz->ocxyz", self.xf, self._gf(g).conj(), optimize=False)
        return self._inverse(prod, (self.k,) * 3)


def _check_conv_args(x: Tensor, weight: Tensor, bias: Tensor | None, in_axis: int, what: str) -> int:
    _check_5d(x, what)
    if weight.ndim != 5:
        raise ShapeError(f"{what}: weight must be 5-D, got shape {weight.shape}")
    k = weight.shape[2]
    if weight.shape[3] != k or weight.shape[4] != k:
        raise ShapeError(f"{what}: kernel axes must be cubic, got {weight.shape[2:]}")
    if x.shape[1] != weight.shape[in_axis]:
        raise ShapeError(
            f"{what}: input channel axis (size {x.shape[1]}) does not match weight axis {in_axis} "
            f"(size {weight.shape[in_axis]})")
    out_ch = weight.shape[1 - in_axis]
    if bias is not None and bias.shape != (out_ch,):
        raise ShapeError(f"{what}: bias axis 0 has size {bias.shape}, expected ({out_ch},)")
    return k


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad=0) -> Tensor:
    """3-D cross-correlation (no kernel flip).

    ``pad`` is an int (zero padding), a :class:`PadSpec`, or explicit
    ``((d0, d1), (h0, h1), (w0, w1))`` zero padding.
    """
    if stride < 1:
        raise PreconditionError("stride must be >= 1")
    k = _check_conv_args(x, weight, bias, 1, "conv3d")
    if isinstance(pad, PadSpec):
        x = pad3d(x, pad.n, "reflect" if pad.mode == "reflect" else "zero")
    else:
        x = pad3d(x, pad, "zero")
    for ax, e in zip("DHW", x.shape[2:]):
        if k > e:
            raise ShapeError(f"conv3d: kernel {k} larger than padded extent {ax}={e}")
    xp = x.data
    w = weight.data.astype(xp.dtype, copy=False)
    if stride == 1 and k >= FFT_MIN_KERNEL:
        corr = _FFTCorr(xp, w)
        xgrad = corr.xgrad
    else:
        corr = _Corr(xp, w, stride, keep=active_tape() is not None and weight.requires_grad)
        xgrad = partial(_corr_xgrad, w=w, s=stride, in_spatial=xp.shape[2:])
    out = corr.out
    if bias is not None:
        out += bias.data.astype(xp.dtype, copy=False)[None, :, None, None, None]

    def backward(g):
        gx = xgrad(g) if x.requires_grad else None
        gw = corr.wgrad(g) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv3d", out, inputs, backward)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution; weight is ``[Cin, Cout, k, k, k]``.

    Output extent per axis is ``(D - 1) * stride + k``. The forward map is the
    adjoint of :func:`conv3d` (same weight, same stride) with respect to its input.
    """
    if stride < 1:
        raise PreconditionError("stride must be >= 1")
    k = _check_conv_args(x, weight, bias, 0, "conv_transpose3d")
    xd = x.data
    w = weight.data.astype(xd.dtype, copy=False)
    out_spatial = tuple((e - 1) * stride + k for e in x.shape[2:])
    out = _corr_xgrad(xd, w, stride, out_spatial)
    if bias is not None:
        out += bias.data.astype(xd.dtype, copy=False)[None, :, None, None, None]

    def backward(g):
        corr = _Corr(g, w, stride, keep=weight.requires_grad)
        gx = corr.out if x.requires_grad else None
        gw = corr.wgrad(xd) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv_transpose3d", out, inputs, backward)


# ----------------------------------------------------------------------------
# normalization and activations


def instance_norm3d(x: Tensor, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Per-sample, per-channel standardization over spatial voxels (no affine)."""
    _check_5d(x, "instance_norm3d")
    m = int(np.prod(x.shape[2:]))
    if m < 2:
        raise PreconditionError("instance_norm3d needs at least 2 spatial voxels")
    axes = (2, 3, 4)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _result("instance_norm3d", xhat.astype(x.dtype, copy=False), (x,), backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return _result("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    s = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def activation(x: Tensor, kind: str | None, slope: float = LEAKY_SLOPE) -> Tensor:
    if kind is None or kind == "none":
        return x
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise PreconditionError(f"unknown activation {kind!r}")


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1, computed with max subtraction."""
    if x.ndim < 2:
        raise ShapeError(f"softmax_channels needs a channel axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result("softmax_channels", s, (x,), backward)


# ----------------------------------------------------------------------------
# losses


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        diff = [i for i, (p, q) in enumerate(zip(a.shape, b.shape)) if p != q]
        if len(a.shape) != len(b.shape):
            diff = ["rank"]
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ on axes {diff}")


def l1_loss(a: Tensor, b) -> Tensor:
    """Mean absolute difference."""
    b = _const(b, a)
    _same_shape(a, b, "l1_loss")
    d = a.data - b.data
    n = d.size
    sgn = np.sign(d)

    def backward(g):
        ga = (g / n) * sgn
        return (ga, -ga)

    return _result("l1_loss", np.asarray(np.abs(d).mean(), dtype=a.dtype), (a, b), backward)


def bce_loss(p: Tensor, target) -> Tensor:
    """Binary cross-entropy of probabilities ``p`` against targets in [0, 1].

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]``; clamped voxels pass no gradient.
    """
    t = np.broadcast_to(np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.dtype), p.shape)
    pc = np.clip(p.data, BCE_CLAMP, 1 - BCE_CLAMP)
    inside = (p.data >= BCE_CLAMP) & (p.data <= 1 - BCE_CLAMP)
    n = p.size
    val = -(t * np.log(pc) + (1 - t) * np.log1p(-pc)).mean()

    def backward(g):
        return ((g / n) * inside * ((1 - t) / (1 - pc) - t / pc),)

    return _result("bce_loss", np.asarray(val, dtype=p.dtype), (p,), backward)


def cross_entropy(prob: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of ``-log p[true class]`` for a probability map ``[N, K, ...]`` and integer labels ``[N, ...]``."""
    labels = np.asarray(labels)
    if prob.ndim < 2 or labels.shape != prob.shape[:1] + prob.shape[2:]:
        raise ShapeError(f"cross_entropy: labels {labels.shape} incompatible with probabilities {prob.shape}")
    idx = labels.astype(np.intp)[:, None]
    picked = np.take_along_axis(prob.data, idx, axis=1)
    pc = np.clip(picked, BCE_CLAMP, None)
    n = picked.size
    val = -np.log(pc).mean()

    def backward(g):
        gp = np.zeros_like(prob.data)
        np.put_along_axis(gp, idx, (-(g / n) / pc) * (picked >= BCE_CLAMP), axis=1)
        return (gp,)

    return _result("cross_entropy", np.asarray(val, dtype=prob.dtype), (prob,), backward)


def soft_dice_loss(prob: Tensor, labels: np.ndarray, channel: int = 1, smooth: float = 1.0) -> Tensor:
    """``1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`` on one class channel of a probability map."""
    labels = np.asarray(labels)
    if prob.ndim < 2 or labels.shape != prob.shape[:1] + prob.shape[2:]:
        raise ShapeError(f"soft_dice_loss: labels {labels.shape} incompatible with probabilities {prob.shape}")
    p = prob.data[:, channel].astype(np.float64)
    t = (labels == channel).astype(np.float64)
    inter, denom = float((p * t).sum()), float(p.sum() + t.sum()) + smooth
    val = 1.0 - (2 * inter + smooth) / denom

    def backward(g):
        gp = np.zeros_like(prob.data)
        gp[:, channel] = (g * -(2 * t * denom - (2 * inter + smooth)) / denom ** 2).astype(prob.dtype)
        return (gp,)

    return _result("soft_dice_loss", np.asarray(val, dtype=prob.dtype), (prob,), backward)


def losses(a: Tensor, b, kind: str) -> Tensor:
    """Dispatch to ``l1``, ``bce``, ``cross_entropy`` or ``soft_dice``."""
    if kind == "l1":
        return l1_loss(a, b)
    if kind == "bce":
        if isinstance(b, Tensor):
            _same_shape(a, b, "bce_loss")
        return bce_loss(a, b)
    if kind == "cross_entropy":
        return cross_entropy(a, b.data if isinstance(b, Tensor) else b)
    if kind == "soft_dice":
        return soft_dice_loss(a, b.data if isinstance(b, Tensor) else b)
    raise PreconditionError(f"unknown loss {kind!r}")
