"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    step: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)


def _default_decay(p: Tensor) -> bool:
    # biases, norms and single vectors (mask token, probe query) are not decayed
    return p.ndim >= 2 and p.shape[0] > 1


class AdamW:
    def __init__(
        self,
        params: Sequence[Tensor],
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        decay_filter: Callable[[Tensor], bool] = _default_decay,
    ):
        self.params = list(params)
        self.state = OptimState(beta1=betas[0], beta2=betas[1], eps=eps)
        self.state.exp_avg = [np.zeros_like(p.data) for p in self.params]
        self.state.exp_avg_sq = [np.zeros_like(p.data) for p in self.params]
        self.decay_mask = [decay_filter(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float, weight_decay: float = 0.0) -> None:
        st = self.state
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"adamw_step: parameter {p.name or i!r} has no gradient")
            if st.exp_avg[i].shape != p.data.shape:
                raise RuntimeError(f"adamw_step: optimizer state for {p.name or i!r} does not match parameter shape")
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        bc1 = 1.0 - b1 ** st.step
        bc2 = 1.0 - b2 ** st.step
        for i, p in enumerate(self.params):
            g = p.grad
            m, v = st.exp_avg[i], st.exp_avg_sq[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if weight_decay and self.decay_mask[i]:
                p.data *= p.data.dtype.type(1.0 - lr * weight_decay)
            denom = np.sqrt(v / bc2) + st.eps
            p.data -= (lr / bc1) * m / denom

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"optim.step": np.asarray([self.state.step], dtype=np.float64)}
        for i, p in enumerate(self.params):
            out[f"optim.m.{p.name or i}"] = self.state.exp_avg[i]
            out[f"optim.v.{p.name or i}"] = self.state.exp_avg_sq[i]
        return out


def adamw_step(opt: AdamW, lr: float, weight_decay: float) -> None:
    opt.step(lr, weight_decay)
