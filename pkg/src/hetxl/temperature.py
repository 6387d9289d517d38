"""Bounded trainable softmax/sigmoid temperature.

The temperature is parametrized as

    tau(t) = (tau_max - tau_min) * sigmoid(t) + tau_min

with an unconstrained parameter t, so gradient steps can never push tau
outside (tau_min, tau_max).  t = 0 sits at the midpoint of the bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

DEFAULT_TAU_MIN = 0.05
DEFAULT_TAU_MAX = 5.0


def _sigmoid(x: float) -> float:
    # Stable for any float including +/-inf.
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass
class Temperature:
    """Trainable temperature with hard bounds.

    t = +/-inf pins tau exactly at a bound (sigmoid saturates to 0/1 and
    the gradient vanishes), which is how fixed values at the bounds are
    represented.
    """

    t: float = 0.0
    tau_min: float = DEFAULT_TAU_MIN
    tau_max: float = DEFAULT_TAU_MAX

    def __post_init__(self):
        self.t = float(self.t)
        self.tau_min = float(self.tau_min)
        self.tau_max = float(self.tau_max)
        if math.isnan(self.t):
            raise ValueError("t must not be NaN")
        if not self.tau_min > 0.0:
            raise ValueError(f"tau_min must be positive, got {self.tau_min}")
        if not self.tau_max > self.tau_min:
            raise ValueError(
                f"tau_max ({self.tau_max}) must exceed tau_min ({self.tau_min})"
            )

    def value(self) -> float:
        return temperature_value(self)

    def grad_t(self) -> float:
        """d tau / d t at the current t."""
        s = _sigmoid(self.t)
        return (self.tau_max - self.tau_min) * s * (1.0 - s)

    @classmethod
    def from_tau(
        cls,
        tau: float,
        tau_min: float = DEFAULT_TAU_MIN,
        tau_max: float = DEFAULT_TAU_MAX,
    ) -> "Temperature":
        """Temperature pinned at a given tau within [tau_min, tau_max]."""
        tau = float(tau)
        if not tau_min <= tau <= tau_max:
            raise ValueError(f"tau={tau} outside [{tau_min}, {tau_max}]")
        if tau == tau_min:
            t = -math.inf
        elif tau == tau_max:
            t = math.inf
        else:
            t = math.log((tau - tau_min) / (tau_max - tau))
        return cls(t=t, tau_min=tau_min, tau_max=tau_max)


def temperature_value(temp: Temperature) -> float:
    """Map the unconstrained parameter to the bounded temperature."""
    return (temp.tau_max - temp.tau_min) * _sigmoid(temp.t) + temp.tau_min
