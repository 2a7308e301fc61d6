"""Named parameter store, warmup learning-rate schedule, and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NotBackpropagatedError, ShapeError
from .tensor import Tensor


class ParameterStore:
    """Ordered map of dotted names to grad-tracked tensors."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self.step_count = 0

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self):
        for name in self.names():
            yield name, self._entries[name]

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine, theirs = set(self._entries), set(state)
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise ShapeError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, arr in state.items():
            t = self._entries[name]
            if t.data.shape != arr.shape:
                raise ShapeError(f"shape mismatch for {name!r}: {t.data.shape} vs {arr.shape}")
            t.data = arr.astype(t.data.dtype).copy()

    def clone_frozen(self) -> "ParameterStore":
        """Deep copy with gradients dropped; used for teacher snapshots."""
        out = ParameterStore()
        for name, t in self.items():
            out.add(name, Tensor(t.data.copy(), requires_grad=True))
        out.step_count = self.step_count
        return out


def warmup_lr(step: int, scale: float, d_att: int, warmup_steps: int) -> float:
    """Noam-style rate: scale * d_att^-1/2 * min(step^-1/2, step * warmup^-3/2)."""
    if step < 1:
        raise ValueError(f"schedule step must be >= 1, got {step}")
    return scale * d_att ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


@dataclass
class AdamState:
    """Adam moments plus either a warmup schedule or a fixed rate."""

    scale: float = 5.0
    d_att: int = 256
    warmup_steps: int = 25000
    fixed_lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def learning_rate(self, step: int) -> float:
        if self.fixed_lr is not None:
            return self.fixed_lr
        return warmup_lr(step, self.scale, self.d_att, self.warmup_steps)


def adam_step(params: ParameterStore, state: AdamState) -> None:
    """One Adam update with bias correction; zeroes gradients afterwards."""
    step = params.step_count + 1
    lr = state.learning_rate(step)
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    for name, t in params.items():
        if t.grad is None:
            raise NotBackpropagatedError(f"parameter {name!r} has no gradient")
        g = t.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1.0 - b1 ** step)
        vhat = v / (1.0 - b2 ** step)
        t.data = t.data - (lr * mhat / (np.sqrt(vhat) + eps)).astype(t.data.dtype)
        t.grad = None
    params.step_count = step
