"""Parametric valuation families.

Three strictly concave, strictly increasing families are supported:

``scaled-log``   v(x) = a ln x           (domain x > 0, v(0) = -inf)
``shifted-log``  v(x) = a ln(1 + x)      (domain x >= 0, v'(0) = a)
``power``        v(x) = a x**alpha       (domain x >= 0, 0 < alpha < 1)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

FAMILIES = ("scaled-log", "shifted-log", "power")


class DomainError(ValueError):
    """Raised when a valuation is evaluated outside its domain."""


@dataclass(frozen=True)
class ValuationSpec:
    family: str
    a: float
    alpha: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown valuation family {self.family!r}; expected one of {FAMILIES}")
        if not (self.a > 0 and math.isfinite(self.a)):
            raise ValueError(f"valuation parameter a must be positive, got {self.a}")
        if self.family == "power":
            if self.alpha is None or not (0.0 < self.alpha < 1.0):
                raise ValueError(f"power valuation needs 0 < alpha < 1, got {self.alpha}")
        elif self.alpha is not None:
            raise ValueError(f"alpha is only meaningful for the power family, not {self.family}")

    def _check(self, x: float) -> None:
        if self.family == "scaled-log":
            if not x > 0:
                raise DomainError(f"scaled-log valuation needs x > 0, got {x}")
        elif not x >= 0:
            raise DomainError(f"{self.family} valuation needs x >= 0, got {x}")

    def eval(self, x: float) -> float:
        self._check(x)
        if self.family == "scaled-log":
            return self.a * math.log(x)
        if self.family == "shifted-log":
            return self.a * math.log1p(x)
        return self.a * x**self.alpha

    def grad(self, x: float) -> float:
        """First derivative; ``inf`` at x = 0 for the power family."""
        self._check(x)
        if self.family == "scaled-log":
            return self.a / x
        if self.family == "shifted-log":
            return self.a / (1.0 + x)
        if x == 0:
            return math.inf
        return self.a * self.alpha * x ** (self.alpha - 1.0)

    def hess(self, x: float) -> float:
        self._check(x)
        if self.family == "scaled-log":
            return -self.a / (x * x)
        if self.family == "shifted-log":
            return -self.a / ((1.0 + x) ** 2)
        if x == 0:
            return -math.inf
        return self.a * self.alpha * (self.alpha - 1.0) * x ** (self.alpha - 2.0)

    def grad_inverse(self, p: float) -> float:
        """Return x with grad(x) = p.

        Raises DomainError if no such x exists in the domain (for
        shifted-log that is any p > a).
        """
        if not p > 0:
            raise DomainError(f"grad_inverse needs p > 0, got {p}")
        if self.family == "scaled-log":
            return self.a / p
        if self.family == "shifted-log":
            if p > self.a:
                raise DomainError(f"shifted-log gradient never reaches {p} (max is a={self.a})")
            return self.a / p - 1.0
        return (p / (self.a * self.alpha)) ** (1.0 / (self.alpha - 1.0))

    def demand(self, price: float) -> float:
        """argmax_{x >= 0} v(x) - price * x, for price > 0."""
        if self.family == "shifted-log" and price >= self.a:
            return 0.0
        return self.grad_inverse(price)

    def value_at_zero(self) -> float:
        """v(0); ``-inf`` for scaled-log (see ``finite_at_zero``)."""
        if self.family == "scaled-log":
            return -math.inf
        return 0.0

    @property
    def finite_at_zero(self) -> bool:
        return self.family != "scaled-log"

    @property
    def grad_at_zero(self) -> float:
        """v'(0), ``inf`` when the marginal value is unbounded at zero."""
        if self.family == "shifted-log":
            return self.a
        return math.inf

    def to_dict(self) -> dict:
        d = {"family": self.family, "a": self.a}
        if self.alpha is not None:
            d["alpha"] = self.alpha
        return d
