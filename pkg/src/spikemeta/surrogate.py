"""Smooth stand-ins for the spike threshold derivative.

The hard threshold has a useless analytic derivative (zero almost
everywhere), so the backward pass substitutes either a boxcar or the
derivative of a sigmoid.  Each surrogate also has a matching soft spike
function whose exact derivative equals the surrogate, used when the whole
forward pass must be differentiable (gradient checking).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SurrogateConfig", "surrogate_derivative", "soft_spike"]


@dataclass(frozen=True)
class SurrogateConfig:
    kind: str = "boxcar"  # "boxcar" | "sigmoid"
    width: float = 1.0
    slope: float = 4.0

    def __post_init__(self) -> None:
        if self.kind not in ("boxcar", "sigmoid"):
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if self.width <= 0 or self.slope <= 0:
            raise ValueError("surrogate width and slope must be positive")

    def scaled(self, threshold: float) -> "SurrogateConfig":
        """Express threshold-normalized width/slope in raw potential units."""
        return SurrogateConfig(
            kind=self.kind, width=self.width * threshold, slope=self.slope / threshold
        )


def surrogate_derivative(v, threshold: float, cfg: SurrogateConfig):
    """Surrogate of d(spike)/d(potential) at potential v."""
    v = np.asarray(v, dtype=np.float64)
    if cfg.kind == "boxcar":
        return (np.abs(v - threshold) <= cfg.width / 2.0) / cfg.width
    z = 1.0 / (1.0 + np.exp(-cfg.slope * (v - threshold)))
    return cfg.slope * z * (1.0 - z)


def soft_spike(v, threshold: float, cfg: SurrogateConfig):
    """Smooth spike whose exact derivative is `surrogate_derivative`."""
    v = np.asarray(v, dtype=np.float64)
    if cfg.kind == "boxcar":
        return np.clip((v - threshold) / cfg.width + 0.5, 0.0, 1.0)
    return 1.0 / (1.0 + np.exp(-cfg.slope * (v - threshold)))
