"""Softmax-confidence baselines: maximum softmax probability and ODIN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from m2d import autodiff as ad
from m2d.nets import Network


@dataclass(frozen=True)
class BaselineConfig:
    temperature: float = 1000.0
    epsilon: float = 0.001

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


def msp_from_logits(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return ad.softmax(np.asarray(logits, dtype=np.float64) / temperature).max(axis=1)


def msp_score(classifier: Network, x, temperature: float = 1.0) -> np.ndarray:
    """Maximum softmax probability at the given temperature, one per row."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return msp_from_logits(classifier.forward(x).data, temperature)


def odin_score(classifier: Network, x, cfg: BaselineConfig = BaselineConfig()) -> np.ndarray:
    """Temperature-scaled MSP after a signed-gradient input perturbation.

    The input moves by ``epsilon`` in the direction that raises the
    temperature-scaled log max-softmax of the predicted class.
    """
    x = np.asarray(x, dtype=np.float64)
    xt = ad.Tensor(x, requires_grad=True)
    logits = classifier.forward(xt)
    pred = logits.data.argmax(axis=1)
    scaled = ad.mul(logits, ad.Tensor(1.0 / cfg.temperature))
    # mean CE of the predicted class == -mean log max-softmax
    loss = ad.cross_entropy_loss(scaled, pred)
    ad.backward(loss)
    x_tilde = x - cfg.epsilon * np.sign(xt.grad)
    return msp_score(classifier, x_tilde, cfg.temperature)
