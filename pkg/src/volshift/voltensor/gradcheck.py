"""Finite-difference verification of the tape's gradients.

``gradcheck`` evaluates a function twice per input coordinate (central
differences, float64) and compares against the reverse-mode gradient of the
same scalar projection ``sum(out * R)`` with a fixed random ``R``.

``OP_CASES`` is the per-op suite run by the test-suite and by the
``volshift gradcheck`` command. Inputs to non-smooth ops (relu, maxpool, l1,
clamped bce) are drawn at least ``KINK_MARGIN`` away from their kinks, since
central differences are meaningless across a kink.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from volshift.voltensor import ops
from volshift.voltensor.tensor import Tape, Tensor

KINK_MARGIN = 0.05


def _projected(fn, arrays, proj_seed):
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
        r = np.random.default_rng([proj_seed, 0x5EED]).standard_normal(out.shape) if out.size > 1 else np.ones(out.shape)
        loss = ops.sum_all(ops.mul(out, Tensor(r, dtype=np.float64))) if out.size > 1 else ops.sum_all(out)
    return tensors, tape, loss, r


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3,
              proj_seed: int = 0, coords: int | None = None, coord_seed: int = 0) -> list[float]:
    """Relative error of the analytic gradient for each input array.

    ``coords`` limits the check to that many randomly chosen coordinates per
    input (for larger composites); by default every coordinate is perturbed.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors, tape, loss, r = _projected(fn, arrays, proj_seed)
    tape.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def scalar(arrs) -> float:
        out = fn(*[Tensor(a, dtype=np.float64) for a in arrs])
        return float((out.data * r).sum())

    rng = np.random.default_rng(coord_seed)
    errors = []
    for i, a in enumerate(arrays):
        flat_idx = np.arange(a.size)
        if coords is not None and coords < a.size:
            flat_idx = np.sort(rng.choice(a.size, size=coords, replace=False))
        num = np.empty(len(flat_idx))
        for j, fi in enumerate(flat_idx):
            idx = np.unravel_index(fi, a.shape)
            orig = a[idx]
            a[idx] = orig + h
            fp = scalar(arrays)
            a[idx] = orig - h
            fm = scalar(arrays)
            a[idx] = orig
            num[j] = (fp - fm) / (2 * h)
        errors.append(relative_error(num, analytic[i].reshape(-1)[flat_idx]))
    return errors


def directional_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-6,
                      seed: int = 0) -> float:
    """Compare <grad, v> with a central difference along a random direction ``v``."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors, tape, loss, r = _projected(fn, arrays, seed)
    tape.backward(loss)
    rng = np.random.default_rng([seed, 0xD1EC])
    dirs = [rng.standard_normal(a.shape) for a in arrays]
    analytic = sum(float((t.grad * v).sum()) for t, v in zip(tensors, dirs) if t.grad is not None)

    def scalar(sign):
        out = fn(*[Tensor(a + sign * h * v, dtype=np.float64) for a, v in zip(arrays, dirs)])
        return float((out.data * r).sum())

    numeric = (scalar(1.0) - scalar(-1.0)) / (2 * h)
    return abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-12)


# ----------------------------------------------------------------------------
# per-op suite


def _away_from_zero(rng, shape, margin=KINK_MARGIN):
    z = rng.standard_normal(shape)
    return np.sign(z) * (np.abs(z) + margin)


def _distinct(rng, shape, spacing=KINK_MARGIN):
    n = int(np.prod(shape))
    vals = np.arange(n) * spacing
    return rng.permutation(vals).reshape(shape) - vals.mean()


Case = tuple[Callable[..., Tensor], list[np.ndarray]]


def _conv_zero(rng) -> Case:
    return (lambda x, w, b: ops.conv3d(x, w, b, stride=1, pad=1),
            [rng.standard_normal((2, 2, 4, 4, 4)), rng.standard_normal((3, 2, 3, 3, 3)), rng.standard_normal(3)])


def _conv_reflect_strided(rng) -> Case:
    return (lambda x, w, b: ops.conv3d(x, w, b, stride=2, pad=ops.PadSpec.reflect(1)),
            [rng.standard_normal((2, 2, 4, 4, 4)), rng.standard_normal((3, 2, 3, 3, 3)), rng.standard_normal(3)])


def _conv_asym(rng) -> Case:
    pads = ((1, 2), (1, 2), (1, 2))
    return (lambda x, w: ops.conv3d(x, w, None, stride=2, pad=pads),
            [rng.standard_normal((2, 2, 4, 4, 4)), rng.standard_normal((2, 2, 4, 4, 4))])


def _conv_wide(rng) -> Case:
    # kernel wide enough to take the FFT path
    return (lambda x, w, b: ops.conv3d(x, w, b, stride=1, pad=ops.PadSpec.reflect(2)),
            [rng.standard_normal((1, 2, 5, 5, 5)), rng.standard_normal((2, 2, 5, 5, 5)), rng.standard_normal(2)])


def _convt(rng) -> Case:
    return (lambda x, w, b: ops.conv_transpose3d(x, w, b, stride=2),
            [rng.standard_normal((2, 2, 4, 4, 4)), rng.standard_normal((2, 3, 3, 3, 3)), rng.standard_normal(3)])


def _convt_k2(rng) -> Case:
    return (lambda x, w: ops.conv_transpose3d(x, w, None, stride=2),
            [rng.standard_normal((2, 2, 4, 4, 4)), rng.standard_normal((2, 2, 2, 2, 2))])


def _upsample(rng) -> Case:
    return (lambda x: ops.upsample_nearest3d(x, 2), [rng.standard_normal((2, 2, 4, 4, 4))])


def _reflect(rng) -> Case:
    return (lambda x: ops.reflection_pad3d(x, 2), [rng.standard_normal((2, 2, 4, 4, 4))])


def _reflect_asym(rng) -> Case:
    return (lambda x: ops.pad3d(x, ((1, 3), (0, 2), (3, 1)), "reflect"), [rng.standard_normal((2, 2, 4, 4, 4))])


def _zero_pad(rng) -> Case:
    return (lambda x: ops.pad3d(x, ((1, 0), (0, 2), (2, 1)), "zero"), [rng.standard_normal((2, 2, 4, 4, 4))])


def _crop(rng) -> Case:
    return (lambda x: ops.crop3d(x, (1, 0, 2), (3, 2, 2)), [rng.standard_normal((2, 2, 4, 4, 4))])


def _inorm(rng) -> Case:
    return (ops.instance_norm3d, [rng.standard_normal((2, 2, 4, 4, 4)) * 2 + 1])


def _relu(rng) -> Case:
    return (ops.relu, [_away_from_zero(rng, (2, 2, 4, 4, 4))])


def _leaky(rng) -> Case:
    return (lambda x: ops.leaky_relu(x, 0.2), [_away_from_zero(rng, (2, 2, 4, 4, 4))])


def _sigmoid(rng) -> Case:
    return (ops.sigmoid, [rng.standard_normal((2, 2, 4, 4, 4)) * 2])


def _softmax(rng) -> Case:
    return (ops.softmax_channels, [rng.standard_normal((2, 3, 4, 4, 4)) * 2])


def _maxpool(rng) -> Case:
    return (lambda x: ops.maxpool3d(x, 2), [_distinct(rng, (2, 2, 4, 4, 4))])


def _l1(rng) -> Case:
    b = rng.standard_normal((2, 2, 4, 4, 4))
    a = b + _away_from_zero(rng, b.shape)
    return (lambda a_: ops.l1_loss(a_, Tensor(b, dtype=np.float64)), [a])


def _bce(rng) -> Case:
    p = rng.uniform(0.1, 0.9, (2, 1, 4, 4, 4))
    t = rng.uniform(0, 1, p.shape)
    return (lambda p_: ops.bce_loss(p_, t), [p])


def _ce(rng) -> Case:
    labels = rng.integers(0, 2, (2, 4, 4, 4))
    return (lambda z: ops.cross_entropy(ops.softmax_channels(z), labels), [rng.standard_normal((2, 2, 4, 4, 4))])


def _soft_dice(rng) -> Case:
    labels = rng.integers(0, 2, (2, 4, 4, 4))
    return (lambda z: ops.soft_dice_loss(ops.softmax_channels(z), labels), [rng.standard_normal((2, 2, 4, 4, 4))])


def _arith(rng) -> Case:
    return (lambda a, b: ops.mean_all(ops.mul(ops.sub(a, b), ops.add(a, b))),
            [rng.standard_normal((2, 2, 4, 4, 4)), rng.standard_normal((2, 2, 4, 4, 4))])


OP_CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "conv3d_zero_pad": _conv_zero,
    "conv3d_reflect_stride2": _conv_reflect_strided,
    "conv3d_asymmetric_pad": _conv_asym,
    "conv3d_wide_kernel": _conv_wide,
    "conv_transpose3d_k3s2": _convt,
    "conv_transpose3d_k2s2": _convt_k2,
    "upsample_nearest3d": _upsample,
    "reflection_pad3d": _reflect,
    "reflection_pad3d_asymmetric": _reflect_asym,
    "zero_pad3d": _zero_pad,
    "crop3d": _crop,
    "instance_norm3d": _inorm,
    "relu": _relu,
    "leaky_relu": _leaky,
    "sigmoid": _sigmoid,
    "softmax_channels": _softmax,
    "maxpool3d": _maxpool,
    "l1_loss": _l1,
    "bce_loss": _bce,
    "cross_entropy": _ce,
    "soft_dice_loss": _soft_dice,
    "arithmetic": _arith,
}


def run_suite(seeds: Sequence[int] = (0, 1, 2, 3, 4), h: float = 1e-3,
              names: Sequence[str] | None = None) -> dict[str, list[float]]:
    """Worst relative error per op and seed."""
    results: dict[str, list[float]] = {}
    for name in names or OP_CASES:
        errs = []
        for seed in seeds:
            fn, inputs = OP_CASES[name](np.random.default_rng(seed))
            errs.append(max(gradcheck(fn, inputs, h=h, proj_seed=seed)))
        results[name] = errs
    return results
