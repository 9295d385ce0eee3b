import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from app.core.errors import NonFiniteGradientError, ShapeError
from app.schemas.config import OptimSettings

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moment buffers and hyperparameters of Adam with decoupled weight decay"""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    # parameter-name prefix -> multiplier on lr; first matching prefix wins
    lr_scales: Dict[str, float] = field(default_factory=dict)
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_settings(
        cls, optim: OptimSettings, lr_scales: Optional[Mapping[str, float]] = None
    ) -> "AdamState":
        return cls(
            lr=optim.lr,
            beta1=optim.beta1,
            beta2=optim.beta2,
            eps=optim.eps,
            weight_decay=optim.weight_decay,
            lr_scales=dict(lr_scales or {}),
        )

    def lr_for(self, name: str) -> float:
        for prefix, scale in self.lr_scales.items():
            if name.startswith(prefix):
                return self.lr * scale
        return self.lr


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> Dict[str, np.ndarray]:
    """
    One bias-corrected Adam update with decoupled weight decay.

    p <- p - lr_p * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)

    lr_p is ``state.lr`` times the multiplier of the first matching prefix in
    ``state.lr_scales`` (1 when none matches).

    Args:
        params: Current values of the trainable parameters
        grads: Gradient per parameter name (same shapes)
        state: Optimizer state, updated in place

    Returns:
        New parameter values keyed like ``params``

    Raises:
        NonFiniteGradientError: If any gradient holds NaN or Inf; nothing is updated
    """
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape:
            raise ShapeError(f"gradient shape differs for '{name}'", [value.shape, grad.shape])
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(name)

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    updated = {}
    for name, value in params.items():
        grad = grads[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        m = (1.0 - state.beta1) * grad if m is None else state.beta1 * m + (1.0 - state.beta1) * grad
        v = (1.0 - state.beta2) * grad * grad if v is None else state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        updated[name] = value - state.lr_for(name) * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * value)
    return updated
