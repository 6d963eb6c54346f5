"""Adam optimizer over lists of :class:`Tensor` parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from volshift.errors import PreconditionError, ShapeError
from volshift.voltensor.tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter moment accumulators plus hyperparameters.

    Defaults follow the usual Adam settings (beta1=0.9, beta2=0.999,
    eps=1e-8) with the 2e-4 learning rate used for all networks here.
    """

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        st = cls(**hyper)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float | None = None) -> Sequence[Tensor]:
    """Apply one bias-corrected Adam update in place and return ``params``.

    A ``None`` gradient is treated as zero. ``lr`` overrides ``state.lr`` for
    this step only (used by learning-rate schedules).
    """
    lr = state.lr if lr is None else lr
    if lr <= 0:
        raise PreconditionError("learning rate must be positive")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        if m.shape != p.shape:
            raise ShapeError(f"adam_step: moment shape {m.shape} != parameter shape {p.shape}")
        if g is None:
            m *= b1
            v *= b2
        else:
            if g.shape != p.shape:
                raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)
    return params
