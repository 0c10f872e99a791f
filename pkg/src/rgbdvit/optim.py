"""SGD-with-momentum and AdamW with constant or linear-decay schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["TrainingError", "Schedule", "OptimizerState", "optimizer_step", "zero_grads"]


class TrainingError(RuntimeError):
    """Raised when training hits a non-finite gradient or loss."""


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule: constant, or linear decay hitting 0 at the last step."""

    kind: str = "constant"  # "constant" | "linear-decay"
    horizon: int = 0        # total optimizer steps for linear-decay

    def __post_init__(self):
        if self.kind not in ("constant", "linear-decay"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "linear-decay" and self.horizon < 1:
            raise ValueError("linear-decay schedule needs a positive horizon")

    def scale(self, step: int) -> float:
        """Multiplier applied to the base lr at 0-indexed ``step``."""
        if self.kind == "constant":
            return 1.0
        if self.horizon == 1:
            return 1.0
        return max(0.0, 1.0 - step / (self.horizon - 1))


@dataclass
class OptimizerState:
    """Hyperparameters plus per-parameter moment tensors for one optimizer."""

    kind: str                      # "sgd-momentum" | "adamw"
    lr: float
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    schedule: Schedule = field(default_factory=Schedule)
    step_count: int = 0
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def current_lr(self) -> float:
        return self.lr * self.schedule.scale(self.step_count)


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                   state: OptimizerState) -> None:
    """Apply one in-place update; raises TrainingError on non-finite gradients."""
    lr = state.current_lr()
    for path, tensor in params.items():
        if path not in grads:
            continue
        g = grads[path]
        if g.shape != tensor.shape:
            raise ValueError(f"gradient shape {g.shape} mismatches parameter "
                             f"{path} {tensor.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {path!r} "
                                f"at step {state.step_count}")
        if state.kind == "sgd-momentum":
            v = state.moments.get(path)
            if v is None:
                v = np.zeros_like(tensor.data)
            v = state.momentum * v + g
            state.moments[path] = v
            tensor.data -= (lr * v).astype(tensor.data.dtype, copy=False)
        else:  # adamw, decoupled weight decay
            b1, b2 = state.betas
            t = state.step_count + 1
            m = state.moments.get(path)
            v = state.second_moments.get(path)
            if m is None:
                m = np.zeros_like(tensor.data)
                v = np.zeros_like(tensor.data)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            state.moments[path] = m
            state.second_moments[path] = v
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * tensor.data
            tensor.data -= (lr * update).astype(tensor.data.dtype, copy=False)
    state.step_count += 1
