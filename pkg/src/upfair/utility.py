"""Application utility functions mapping a bandwidth rate to satisfaction.

Two families are supported:

  sigmoidal    U(r) = c * (1 / (1 + exp(-a*(r - b))) - d)
               with c = (1 + exp(a*b)) / exp(a*b) and d = 1 / (1 + exp(a*b)),
               so that U(0) = 0 and U(r) -> 1.  Models rate-adaptive media:
               satisfaction jumps around the inflection rate b.
  logarithmic  U(r) = ln(1 + k*r) / ln(1 + k*r_max)
               with U(r_max) = 1.  Models elastic traffic (downloads).

Both are normalized, increasing and vanish at r = 0, so ln U(r) is concave
and its derivative d/dr ln U(r) is strictly positive and strictly decreasing.
That derivative ("marginal log-utility") is what price-based allocation
equalizes across applications.

Rates are in kbps throughout; a is 1/kbps, b, r_max are kbps, k is 1/kbps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

# Direct use of exp(a*b) overflows for steep sigmoids (a*b > ~709), so every
# formula below is arranged so exponent arguments are <= 0.


@dataclass(frozen=True)
class SigmoidalUtility:
    """Sigmoidal utility with slope a (1/kbps) and inflection b (kbps)."""

    a: float
    b: float

    @property
    def c(self) -> float:
        """Normalization c = (1 + exp(a*b)) / exp(a*b) = 1 + exp(-a*b)."""
        return 1.0 + math.exp(-self.a * self.b)

    @property
    def d(self) -> float:
        """Offset d = 1 / (1 + exp(a*b)) = exp(-a*b) / (1 + exp(-a*b))."""
        e = math.exp(-self.a * self.b)
        return e / (1.0 + e)

    def value(self, r: float) -> float:
        """U(r) = c * (S(r) - d) with S the logistic centered at b.

        Evaluated as
            r <  b:  (exp(a*(r-b)) - exp(-a*b)) / (1 + exp(a*(r-b)))
            r >= b:  (1 - exp(-a*r)) / (1 + exp(-a*(r-b)))
        which are algebraically identical to the definition but keep all
        exponents non-positive.  U(0) = 0 holds exactly in the first branch.
        """
        if r < 0:
            raise ValueError("rate must be >= 0")
        a, b = self.a, self.b
        if r < b:
            x = math.exp(a * (r - b))
            return (x - math.exp(-a * b)) / (1.0 + x)
        return -math.expm1(-a * r) / (1.0 + math.exp(-a * (r - b)))

    def log_value(self, r: float) -> float:
        """ln U(r), stable for rates where U underflows to 0."""
        if r <= 0:
            raise ValueError("rate must be > 0")
        a, b = self.a, self.b
        if r < b:
            # ln U = -a*b + ln(expm1(a*r)) - ln(1 + exp(a*(r-b)))
            t = a * r
            log_expm1 = t + math.log(-math.expm1(-t)) if t > 36 else math.log(math.expm1(t))
            return -a * b + log_expm1 - math.log1p(math.exp(a * (r - b)))
        return math.log(-math.expm1(-a * r)) - math.log1p(math.exp(-a * (r - b)))

    def marginal_log(self, r: float) -> float:
        """d/dr ln U(r) = a * S(r) * (1 - S(r)) / (S(r) - d).

        With x = exp(a*(r-b)): S(1-S) = x/(1+x)^2 and S - d =
        x*(1 - exp(-a*r)) / ((1+x)*(1+exp(-a*b))), so the ratio collapses to

            a * (1 + exp(-a*b)) / ((1 + x) * (1 - exp(-a*r)))

        which is strictly decreasing in r and free of cancellation.
        """
        if r <= 0:
            raise ValueError("rate must be > 0")
        a, b = self.a, self.b
        num = a * (1.0 + math.exp(-a * b))
        den_r = -math.expm1(-a * r)
        t = a * (r - b)
        if t > 500.0:
            # 1 + exp(t) would overflow; exp(-t) is exact to double precision.
            return num * math.exp(-t) / den_r
        return num / ((1.0 + math.exp(t)) * den_r)

    def inflection(self) -> float:
        """Rate of steepest utility growth (the sigmoid midpoint b)."""
        return self.b


@dataclass(frozen=True)
class LogarithmicUtility:
    """Logarithmic utility with curvature k (1/kbps), full rate r_max (kbps)."""

    k: float
    r_max: float

    def value(self, r: float) -> float:
        """U(r) = ln(1 + k*r) / ln(1 + k*r_max)."""
        if r < 0:
            raise ValueError("rate must be >= 0")
        return math.log1p(self.k * r) / math.log1p(self.k * self.r_max)

    def log_value(self, r: float) -> float:
        """ln U(r) for r > 0."""
        if r <= 0:
            raise ValueError("rate must be > 0")
        return math.log(math.log1p(self.k * r)) - math.log(math.log1p(self.k * self.r_max))

    def marginal_log(self, r: float) -> float:
        """d/dr ln U(r) = k / ((1 + k*r) * ln(1 + k*r)); diverges as r -> 0."""
        if r <= 0:
            raise ValueError("rate must be > 0")
        kr = self.k * r
        return self.k / ((1.0 + kr) * math.log1p(kr))

    def inflection(self) -> float:
        """Concave everywhere, so steepest growth is at the origin."""
        return 0.0


UtilityFunction = SigmoidalUtility | LogarithmicUtility


@dataclass(frozen=True)
class QoEObservation:
    """A measured (rate cap, satisfaction fraction) point from rate limiting."""

    rate_cap: float
    satisfaction: float

    def __post_init__(self):
        if not (self.rate_cap > 0 and math.isfinite(self.rate_cap)):
            raise ValueError("rate_cap must be positive and finite")
        if not (0.0 <= self.satisfaction <= 1.0):
            raise ValueError("satisfaction must be within [0, 1]")


def fit_sigmoidal(low: QoEObservation, high: QoEObservation) -> SigmoidalUtility:
    """Fit a sigmoidal utility to a low and a high satisfaction observation.

    The inflection sits midway between the two rate caps and the slope is the
    satisfaction change in percentage points per kbps:

        b = (low.rate_cap + high.rate_cap) / 2
        a = 100 * (high.satisfaction - low.satisfaction)
            / (high.rate_cap - low.rate_cap)
    """
    if high.rate_cap == low.rate_cap:
        raise ValueError("observations must have distinct rate caps")
    if high.rate_cap < low.rate_cap:
        raise ValueError("high observation must have the larger rate cap")
    if high.satisfaction <= low.satisfaction:
        raise ValueError("satisfaction must increase with the rate cap")
    b = 0.5 * (low.rate_cap + high.rate_cap)
    a = (high.satisfaction * 100.0 - low.satisfaction * 100.0) / (high.rate_cap - low.rate_cap)
    return SigmoidalUtility(a=a, b=b)


def validate(u: UtilityFunction) -> list[str]:
    """Check a utility against its defining properties.

    Returns a list of violated property names; an empty list means valid.
    Checks parameter positivity/finiteness, U(0) = 0, monotonicity and
    boundedness on a 1000-point grid of the meaningful rate range.
    """
    problems: list[str] = []
    if isinstance(u, SigmoidalUtility):
        params = {"a": u.a, "b": u.b}
        span = 10.0 * u.b if u.b > 0 else 1.0
        bound_hi = span  # sigmoid stays below 1 for all rates
    elif isinstance(u, LogarithmicUtility):
        params = {"k": u.k, "r_max": u.r_max}
        span = 10.0 * u.r_max if u.r_max > 0 else 1.0
        bound_hi = u.r_max  # normalized to 1 only up to r_max
    else:
        return ["unknown utility variant"]

    for name, v in params.items():
        if not math.isfinite(v):
            problems.append(f"non-finite parameter {name}")
        elif v <= 0:
            problems.append(f"positivity violation: {name}")
    if problems:
        return problems

    if abs(u.value(0.0)) > 1e-12:
        problems.append("value at zero rate is not 0")
    grid = [span * i / 999.0 for i in range(1000)]
    values = [u.value(r) for r in grid]
    if any(hi < lo for lo, hi in zip(values, values[1:])):
        problems.append("not nondecreasing")
    if any(v > 1.0 + 1e-9 for r, v in zip(grid, values) if r <= bound_hi):
        problems.append("exceeds normalized bound")
    return problems
