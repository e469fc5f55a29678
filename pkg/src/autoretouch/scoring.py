"""Closed-form label formulas: the spatial rationality score and a tanh GELU."""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = ["GELU_CUBIC", "SpatialScoreSpec", "gelu", "spatial_score"]

# Cubic coefficient of the tanh-form GELU used throughout this package.
# Deliberately 0.0447 (not the 0.044715 found in most libraries).
GELU_CUBIC = 0.0447
_GELU_ROOT = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class SpatialScoreSpec:
    """Constants of the spatial rationality formula."""

    a: float = 10.0
    b: float = 20.0

    def __post_init__(self) -> None:
        if self.b <= 0:
            raise ValueError(f"b must be positive, got {self.b}")


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def spatial_score(
    x: float, x_max: float, r: float, spec: SpatialScoreSpec = SpatialScoreSpec()
) -> float:
    """Plausibility of a displaced, rescaled foreground pose.

    ``x`` is how far the pose has moved from its origin (pixels), ``x_max``
    the largest displacement the canvas allows, and ``r`` the scaling ratio.
    Returns sigmoid(a - b*x/x_max) shrunk by max(r, 1/r): close to 1 at the
    origin pose, close to 0 at the farthest corner, symmetric in r <-> 1/r,
    and always strictly inside (0, 1).
    """
    if x_max <= 0:
        raise ValueError(f"x_max must be positive, got {x_max}")
    if r <= 0:
        raise ValueError(f"scaling ratio must be positive, got {r}")
    if x < 0 or x > x_max:
        raise ValueError(f"displacement {x} outside [0, {x_max}]")
    z = spec.a - spec.b * (x / x_max)
    return _sigmoid(z) / max(r, 1.0 / r)


def gelu(x: float) -> float:
    """Tanh-form GELU, 0.5*x*(1 + tanh(sqrt(2/pi)*(x + GELU_CUBIC*x^3)))."""
    return 0.5 * x * (1.0 + math.tanh(_GELU_ROOT * (x + GELU_CUBIC * x**3)))
