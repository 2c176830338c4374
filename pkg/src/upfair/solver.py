"""Utility proportional-fair rate allocation by shadow-price bisection.

Splits a shared link of R kbps across applications by maximizing

    sum_i beta_i * sum_j alpha_ij * ln U_ij(r_ij)   s.t.  sum r_ij <= R

where U_ij is the app's utility, alpha_ij its activity share within user i
and beta_i the user's subscription weight.  Because every ln U is strictly
concave with strictly decreasing derivative, each app's best response to a
link price p is the unique root of

    beta * alpha * marginal_log(r) = p

and aggregate demand is strictly decreasing in p, so the market-clearing
price is found by plain bisection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .utility import LogarithmicUtility, SigmoidalUtility, UtilityFunction

R_LO = 1e-9  # kbps; lower edge of the best-response bracket
P_FLOOR = 1e-9  # near-zero price probed for the abundance case
MAX_PRICE_BISECTIONS = 200
MAX_CEIL_DOUBLINGS = 60
RESPONSE_BISECTIONS = 52  # cap * 2^-52 is far inside the 1e-7*cap tolerance


class ValidationError(ValueError):
    """A problem or profile fails its structural checks."""


class SolverError(RuntimeError):
    """The price search could not bracket or clear the capacity."""


@dataclass(frozen=True)
class AppDescriptor:
    """One application's utility, activity share and demand ceiling."""

    app_id: str
    utility: UtilityFunction
    alpha: float
    rate_cap: float


@dataclass(frozen=True)
class UserProfile:
    """A user's subscription weight and its registered applications."""

    ue_id: str
    beta: float = 1.0
    apps: tuple[AppDescriptor, ...] = ()


@dataclass(frozen=True)
class AllocationProblem:
    users: tuple[UserProfile, ...]
    capacity_kbps: float
    tolerance_kbps: float = 1e-4  # clearing tolerance on |demand - R|


@dataclass(frozen=True)
class AllocationResult:
    rates: dict[str, float]  # app_id -> kbps, in problem order
    shadow_price: float
    iterations: int
    residual_kbps: float
    objective: float


def default_rate_cap(utility: UtilityFunction, capacity_kbps: float) -> float:
    """Demand ceiling when none is configured.

    Logarithmic apps are fully satisfied at r_max.  Sigmoids have no natural
    ceiling, so cap demand at max(10*b, link capacity), far beyond the region
    where their utility still grows noticeably.
    """
    if isinstance(utility, LogarithmicUtility):
        return utility.r_max
    return max(10.0 * utility.b, capacity_kbps)


def validate_problem(problem: AllocationProblem) -> None:
    if not (math.isfinite(problem.capacity_kbps) and problem.capacity_kbps > 0):
        raise ValidationError("capacity_kbps must be positive and finite")
    if not (math.isfinite(problem.tolerance_kbps) and problem.tolerance_kbps > 0):
        raise ValidationError("tolerance_kbps must be positive and finite")
    seen_ue: set[str] = set()
    seen_app: set[str] = set()
    for user in problem.users:
        if user.ue_id in seen_ue:
            raise ValidationError(f"duplicate ue_id {user.ue_id!r}")
        seen_ue.add(user.ue_id)
        if not (math.isfinite(user.beta) and user.beta > 0):
            raise ValidationError(f"{user.ue_id}: beta must be positive and finite")
        alpha_sum = 0.0
        for app in user.apps:
            if app.app_id in seen_app:
                raise ValidationError(f"duplicate app_id {app.app_id!r}")
            seen_app.add(app.app_id)
            if not (0.0 <= app.alpha <= 1.0) or not math.isfinite(app.alpha):
                raise ValidationError(f"{app.app_id}: alpha must be within [0, 1]")
            if not (math.isfinite(app.rate_cap) and app.rate_cap > 0):
                raise ValidationError(f"{app.app_id}: rate_cap must be positive and finite")
            u = app.utility
            params = (u.a, u.b) if isinstance(u, SigmoidalUtility) else (u.k, u.r_max)
            if not all(math.isfinite(v) and v > 0 for v in params):
                raise ValidationError(f"{app.app_id}: utility parameters must be positive and finite")
            alpha_sum += app.alpha
        # Per-user shares describe how attention splits across its apps: they
        # must fill up to 1, or be all zero for an idle user.
        if user.apps and alpha_sum != 0.0 and abs(alpha_sum - 1.0) > 1e-9:
            raise ValidationError(f"{user.ue_id}: per-user alphas must sum to 1 (or all be 0)")


def best_response(app: AppDescriptor, beta: float, price: float) -> float:
    """Rate maximizing beta*alpha*ln U(r) - price*r over (0, rate_cap].

    Solves marginal_log(r) = price / (beta*alpha) by bisection on
    (R_LO, rate_cap]; the marginal is strictly decreasing so the root is
    unique.  Returns rate_cap when even the cap's marginal beats the price,
    and R_LO (effectively zero) when the price exceeds the near-origin
    marginal.
    """
    if price <= 0 or not math.isfinite(price):
        raise ValueError("price must be positive and finite")
    if app.alpha == 0.0:
        return 0.0
    target = price / (beta * app.alpha)
    m = app.utility.marginal_log
    if m(app.rate_cap) >= target:
        return app.rate_cap
    if m(R_LO) <= target:
        return R_LO
    lo, hi = R_LO, app.rate_cap
    for _ in range(RESPONSE_BISECTIONS):
        mid = 0.5 * (lo + hi)
        if m(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def aggregate_demand(problem: AllocationProblem, price: float) -> float:
    """Total best-response demand at a price (alpha = 0 apps excluded)."""
    total = 0.0
    for user in problem.users:
        for app in user.apps:
            if app.alpha > 0.0:
                total += best_response(app, user.beta, price)
    return total


def _objective(problem: AllocationProblem, rates: dict[str, float]) -> float:
    total = 0.0
    for user in problem.users:
        for app in user.apps:
            if app.alpha > 0.0:
                r = rates[app.app_id]
                total += user.beta * app.alpha * app.utility.log_value(max(r, R_LO))
    return total


def _rates_at(problem: AllocationProblem, price: float) -> dict[str, float]:
    rates: dict[str, float] = {}
    for user in problem.users:
        for app in user.apps:
            rates[app.app_id] = best_response(app, user.beta, price) if app.alpha > 0.0 else 0.0
    return rates


def solve(problem: AllocationProblem) -> AllocationResult:
    """Allocate the link capacity at the market-clearing shadow price.

    If demand at a near-zero price already fits in R (abundance) those
    demands are returned with zero residual.  Otherwise the price is
    bisected until |aggregate demand - R| falls within half the clearing
    tolerance (half, so that the returned rates are stable within the full
    tolerance under reformulations such as rescaling every beta).
    """
    validate_problem(problem)
    active = [(u, a) for u in problem.users for a in u.apps if a.alpha > 0.0]
    if not active:
        raise ValidationError("no app with alpha > 0")
    R = problem.capacity_kbps
    clear = 0.5 * problem.tolerance_kbps

    if aggregate_demand(problem, P_FLOOR) <= R:
        rates = _rates_at(problem, P_FLOOR)
        return AllocationResult(rates, P_FLOOR, 0, 0.0, _objective(problem, rates))

    # Price high enough to push every response to the bracket edge.
    p_ceil = max(u.beta * a.alpha * a.utility.marginal_log(2.0 * R_LO) for u, a in active)
    doublings = 0
    while aggregate_demand(problem, p_ceil) > R:
        p_ceil *= 2.0
        doublings += 1
        if doublings > MAX_CEIL_DOUBLINGS:
            raise SolverError("demand exceeds capacity at every probed price")

    lo, hi = P_FLOOR, p_ceil  # demand(lo) > R >= demand(hi)
    price = hi
    iterations = 0
    while iterations < MAX_PRICE_BISECTIONS:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            # The bracket is one ulp wide: demand jumps over R between two
            # adjacent prices and no representable price clears the link.
            # Keep the feasible side and report the shortfall honestly.
            price = hi
            break
        demand = aggregate_demand(problem, mid)
        iterations += 1
        if abs(demand - R) <= clear:
            price = mid
            break
        if demand > R:
            lo = mid
        else:
            hi = mid
    else:
        price = hi

    rates = _rates_at(problem, price)
    residual = abs(sum(rates.values()) - R)
    return AllocationResult(rates, price, iterations, residual, _objective(problem, rates))


@dataclass(frozen=True)
class SweepPoint:
    capacity_kbps: float
    rates: dict[str, float]
    shadow_price: float


def sweep(users: tuple[UserProfile, ...], capacities, tolerance_kbps: float = 1e-4) -> list[SweepPoint]:
    """Solve the same user set across a series of link capacities."""
    points = []
    for R in capacities:
        result = solve(AllocationProblem(users=users, capacity_kbps=float(R), tolerance_kbps=tolerance_kbps))
        points.append(SweepPoint(float(R), result.rates, result.shadow_price))
    return points


def _log_utility_grid(app: AppDescriptor, rates: np.ndarray) -> np.ndarray:
    """ln U over a rate grid, written out from the defining formulas.

    Kept independent of utility.log_value on purpose: this is the reference
    path the solver is checked against.
    """
    u = app.utility
    out = np.full(rates.shape, -np.inf)
    pos = rates > 0
    r = rates[pos]
    if isinstance(u, SigmoidalUtility):
        t = u.a * r
        # ln(expm1(t)) = t + ln(1 - exp(-t)) avoids overflow for large t.
        log_expm1 = t + np.log1p(-np.exp(-t))
        out[pos] = -u.a * u.b + log_expm1 - np.logaddexp(0.0, u.a * (r - u.b))
    else:
        out[pos] = np.log(np.log1p(u.k * r)) - math.log(math.log1p(u.k * u.r_max))
    return out


def brute_force_oracle(problem: AllocationProblem, grid_step: float = 1.0) -> dict[str, float]:
    """Exhaustive grid search over the simplex sum(r) <= R (up to 3 apps).

    Maximizes the weighted log-utility sum on a grid of grid_step kbps,
    breaking ties toward the lexicographically smallest rate vector (in
    problem order).  Apps with alpha = 0 get 0.  Intended as a slow
    reference for small instances only.
    """
    validate_problem(problem)
    if grid_step <= 0:
        raise ValueError("grid_step must be > 0")
    entries = [(u, a) for u in problem.users for a in u.apps if a.alpha > 0.0]
    if len(entries) > 3:
        raise ValueError("oracle supports at most 3 active apps")
    budget = int(math.floor(problem.capacity_kbps / grid_step + 1e-9))

    values = []  # per app: weighted ln U at 0, g, 2g, ... up to its cap
    for user, app in entries:
        n = min(budget, int(math.floor(app.rate_cap / grid_step + 1e-9)))
        grid = np.arange(n + 1, dtype=float) * grid_step
        values.append(user.beta * app.alpha * _log_utility_grid(app, grid))

    best_idx: tuple[int, ...] = ()
    if len(entries) == 1:
        v1 = values[0][: budget + 1]
        best_idx = (int(np.argmax(v1)),)
    elif len(entries) == 2:
        v1, v2 = values
        pm2 = np.maximum.accumulate(v2)
        pam2 = _running_argmax(v2)
        lim2 = np.minimum(budget - np.arange(len(v1)), len(v2) - 1)
        keep = lim2 >= 0
        totals = np.where(keep, v1 + pm2[np.maximum(lim2, 0)], -np.inf)
        j1 = int(np.argmax(totals))
        best_idx = (j1, int(pam2[min(budget - j1, len(v2) - 1)]))
    else:
        v1, v2, v3 = values
        pm3 = np.maximum.accumulate(v3)
        pam3 = _running_argmax(v3)
        n23 = min(budget, (len(v2) - 1) + (len(v3) - 1))
        best23 = np.full(n23 + 1, -np.inf)
        arg23 = np.zeros(n23 + 1, dtype=int)
        for m in range(n23 + 1):
            j2 = np.arange(min(m, len(v2) - 1) + 1)
            cand = v2[j2] + pm3[np.minimum(m - j2, len(v3) - 1)]
            k = int(np.argmax(cand))
            best23[m] = cand[k]
            arg23[m] = j2[k]
        lim23 = np.minimum(budget - np.arange(len(v1)), n23)
        keep = lim23 >= 0
        totals = np.where(keep, v1 + best23[np.maximum(lim23, 0)], -np.inf)
        j1 = int(np.argmax(totals))
        m = min(budget - j1, n23)
        j2 = int(arg23[m])
        j3 = int(pam3[min(m - j2, len(v3) - 1)])
        best_idx = (j1, j2, j3)

    rates = {a.app_id: 0.0 for u in problem.users for a in u.apps}
    for (user, app), j in zip(entries, best_idx):
        rates[app.app_id] = j * grid_step
    return rates


def _running_argmax(v: np.ndarray) -> np.ndarray:
    """Index of the first maximum over each prefix of v."""
    arg = np.zeros(len(v), dtype=int)
    best = v[0]
    k = 0
    for i in range(1, len(v)):
        if v[i] > best:
            best = v[i]
            k = i
        arg[i] = k
    return arg
