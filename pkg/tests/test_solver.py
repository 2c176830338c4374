import math
import random

import pytest

from upfair.solver import (
    P_FLOOR,
    R_LO,
    AllocationProblem,
    AppDescriptor,
    UserProfile,
    ValidationError,
    aggregate_demand,
    best_response,
    brute_force_oracle,
    default_rate_cap,
    solve,
    sweep,
    validate_problem,
)
from upfair.utility import LogarithmicUtility, SigmoidalUtility

SIG = SigmoidalUtility(a=0.148, b=470.0)
LOG = LogarithmicUtility(k=17.0, r_max=1000.0)


def reference_users():
    return (
        UserProfile(ue_id="ue1", apps=(AppDescriptor("video", SIG, 1.0, 1000.0),)),
        UserProfile(ue_id="ue2", apps=(AppDescriptor("download", LOG, 1.0, 1000.0),)),
    )


def reference_problem(capacity=1000.0):
    return AllocationProblem(users=reference_users(), capacity_kbps=capacity)


def weighted_log_objective(users, rates):
    # Independent evaluator: weighted ln U from the defining formulas.
    total = 0.0
    for u in users:
        for app in u.apps:
            if app.alpha == 0.0:
                continue
            r = max(rates[app.app_id], R_LO)
            f = app.utility
            if isinstance(f, SigmoidalUtility):
                t = f.a * r
                log_expm1 = t + math.log1p(-math.exp(-t)) if t > 36 else math.log(math.expm1(t))
                ln_u = -f.a * f.b + log_expm1 - _log1pexp(f.a * (r - f.b))
            else:
                ln_u = math.log(math.log1p(f.k * r)) - math.log(math.log1p(f.k * f.r_max))
            total += u.beta * app.alpha * ln_u
    return total


def _log1pexp(t):
    return t + math.log1p(math.exp(-t)) if t > 0 else math.log1p(math.exp(t))


def random_users(rng, n_ues, max_apps, scale):
    # Sigmoid draws keep a*b <= 40: past ~73 the log-marginal is flat at `a`
    # to the last bit of a double, making rates set-valued for any solver.
    users = []
    serial = 0
    for i in range(n_ues):
        n_apps = rng.randint(1, max_apps)
        shares = [rng.uniform(0.2, 1.0) for _ in range(n_apps)]
        total = sum(shares)
        apps = []
        for s in shares:
            serial += 1
            if rng.random() < 0.5:
                a = rng.uniform(0.02, 0.5)
                b = rng.uniform(30.0, min(0.8 * scale, 40.0 / a))
                utility = SigmoidalUtility(a=a, b=b)
            else:
                utility = LogarithmicUtility(k=rng.uniform(0.5, 30.0),
                                             r_max=rng.uniform(0.3, 1.5) * scale)
            cap = rng.uniform(0.3, 1.2) * scale
            apps.append(AppDescriptor(f"app{serial}", utility, s / total, cap))
        users.append(UserProfile(f"ue{i}", beta=rng.uniform(0.5, 2.0), apps=tuple(apps)))
    return tuple(users)


def random_problem(rng, n_ues, max_apps, r_lo, r_hi):
    capacity = rng.uniform(r_lo, r_hi)
    return AllocationProblem(users=random_users(rng, n_ues, max_apps, capacity),
                             capacity_kbps=capacity)


def random_scarce_problem(rng, n_ues, max_apps, scale_lo, scale_hi):
    # Capacity below the demand at a vanishing price, so the optimum is pinned
    # by the constraint; with free capacity a sigmoid's objective is flat at 0
    # past saturation and grid rates become arbitrary.
    users = random_users(rng, n_ues, max_apps, rng.uniform(scale_lo, scale_hi))
    floor_demand = aggregate_demand(
        AllocationProblem(users=users, capacity_kbps=1.0), P_FLOOR)
    capacity = min(max(rng.uniform(0.35, 0.8) * floor_demand, 50.0), 1500.0)
    return AllocationProblem(users=users, capacity_kbps=capacity)


def test_best_response_inverts_the_marginal():
    app = AppDescriptor("d", LOG, 1.0, 1000.0)
    p = LOG.marginal_log(250.0)
    assert best_response(app, 1.0, p) == pytest.approx(250.0, abs=1e-3)
    vid = AppDescriptor("v", SIG, 1.0, 1000.0)
    p = SIG.marginal_log(500.0)
    assert best_response(vid, 1.0, p) == pytest.approx(500.0, abs=1e-3)


def test_best_response_weights_scale_the_price():
    # beta*alpha*marginal(r) = p, so halving alpha halves the affordable rate.
    app = AppDescriptor("d", LOG, 0.5, 1000.0)
    p = 0.5 * LOG.marginal_log(250.0)
    assert best_response(app, 1.0, p) == pytest.approx(250.0, abs=1e-3)
    p = 2.0 * 0.5 * LOG.marginal_log(250.0)
    assert best_response(app, 2.0, p) == pytest.approx(250.0, abs=1e-3)


def test_best_response_huge_price_gives_nothing():
    app = AppDescriptor("d", LOG, 1.0, 1000.0)
    p = 2.0 * LOG.marginal_log(R_LO)
    assert best_response(app, 1.0, p) == R_LO


def test_best_response_saturates_at_explicit_cap():
    # At a vanishing price the sigmoid's demand passes 500, so the cap binds.
    app = AppDescriptor("v", SIG, 1.0, 500.0)
    assert best_response(app, 1.0, 1e-6) == 500.0


def test_best_response_idle_and_errors():
    app = AppDescriptor("v", SIG, 0.0, 1000.0)
    assert best_response(app, 1.0, 1.0) == 0.0
    live = AppDescriptor("v", SIG, 1.0, 1000.0)
    with pytest.raises(ValueError):
        best_response(live, 1.0, 0.0)
    with pytest.raises(ValueError):
        best_response(live, 1.0, -1.0)


def test_aggregate_demand_monotone_and_degenerate():
    prob = reference_problem()
    assert aggregate_demand(prob, 1e-5) >= aggregate_demand(prob, 1e-3)
    single = AllocationProblem(users=(reference_users()[1],), capacity_kbps=1000.0)
    p = 3e-4
    assert aggregate_demand(single, p) == best_response(reference_users()[1].apps[0], 1.0, p)
    idle = AllocationProblem(
        users=(UserProfile("u", apps=(AppDescriptor("a", LOG, 0.0, 100.0),)),),
        capacity_kbps=100.0)
    assert aggregate_demand(idle, p) == 0.0


def test_solve_reference_instance():
    res = solve(reference_problem())
    assert res.rates["video"] > res.rates["download"]
    assert res.rates["video"] > 470.0
    assert abs(sum(res.rates.values()) - 1000.0) <= 1e-4
    assert res.residual_kbps <= 1e-4
    assert res.iterations <= 200
    assert 2.0e-4 < res.shadow_price < 2.6e-4
    # Interior optimum: both weighted marginals equal the shadow price.
    for app_id, rate in res.rates.items():
        u = SIG if app_id == "video" else LOG
        assert u.marginal_log(rate) / res.shadow_price == pytest.approx(1.0, rel=1e-3)
    # Values pinned by the 1-kbps brute-force oracle: (514, 486).
    assert res.rates["video"] == pytest.approx(514.0, abs=2.0)
    assert res.rates["download"] == pytest.approx(486.0, abs=2.0)


def test_solve_symmetric_split():
    dl = LogarithmicUtility(k=17.0, r_max=1000.0)
    users = (
        UserProfile("u1", apps=(AppDescriptor("d1", dl, 1.0, 1000.0),)),
        UserProfile("u2", apps=(AppDescriptor("d2", dl, 1.0, 1000.0),)),
    )
    res = solve(AllocationProblem(users=users, capacity_kbps=1000.0))
    assert res.rates["d1"] == pytest.approx(500.0, abs=1e-4)
    assert res.rates["d2"] == pytest.approx(500.0, abs=1e-4)


def test_solve_abundant_capacity_caps_at_rmax():
    users = (UserProfile("u", apps=(AppDescriptor("d", LOG, 1.0, 1000.0),)),)
    res = solve(AllocationProblem(users=users, capacity_kbps=5000.0))
    assert res.rates["d"] == 1000.0
    assert res.residual_kbps == 0.0
    assert res.shadow_price == P_FLOOR


def test_solve_matches_oracle_on_small_instances():
    rng = random.Random(11)
    checked = 0
    while checked < 25:
        prob = random_scarce_problem(rng, n_ues=rng.randint(1, 2), max_apps=2,
                                     scale_lo=100.0, scale_hi=1000.0)
        if sum(len(u.apps) for u in prob.users) > 3:
            continue
        if aggregate_demand(prob, P_FLOOR) <= prob.capacity_kbps:
            continue
        checked += 1
        res = solve(prob)
        oracle = brute_force_oracle(prob, grid_step=1.0)
        for app_id, rate in oracle.items():
            assert abs(res.rates[app_id] - rate) <= 2.0, (prob, res.rates, oracle)
        gap = weighted_log_objective(prob.users, res.rates) - \
            weighted_log_objective(prob.users, oracle)
        assert gap >= -1e-6


def test_solve_feasibility_clearing_and_kkt():
    rng = random.Random(23)
    for _ in range(40):
        prob = random_problem(rng, n_ues=rng.randint(1, 10), max_apps=3,
                              r_lo=100.0, r_hi=5000.0)
        res = solve(prob)
        total = sum(res.rates.values())
        assert total <= prob.capacity_kbps + prob.tolerance_kbps
        if aggregate_demand(prob, P_FLOOR) > prob.capacity_kbps:
            assert abs(total - prob.capacity_kbps) <= prob.tolerance_kbps
        assert res.iterations <= 200
        for u in prob.users:
            for app in u.apps:
                r = res.rates[app.app_id]
                if 2.0 * R_LO < r < app.rate_cap * (1.0 - 1e-6):
                    ratio = u.beta * app.alpha * app.utility.marginal_log(r) / res.shadow_price
                    assert 1.0 - 1e-3 <= ratio <= 1.0 + 1e-3


def test_solve_beta_rescaling_keeps_rates():
    base = solve(reference_problem())
    scaled_users = tuple(
        UserProfile(u.ue_id, beta=u.beta * 3.7, apps=u.apps) for u in reference_users())
    scaled = solve(AllocationProblem(users=scaled_users, capacity_kbps=1000.0))
    for app_id in base.rates:
        assert abs(base.rates[app_id] - scaled.rates[app_id]) <= 1e-4
    assert scaled.shadow_price == pytest.approx(3.7 * base.shadow_price, rel=1e-2)


def test_solve_is_deterministic():
    a = solve(reference_problem())
    b = solve(reference_problem())
    assert a.rates == b.rates
    assert a.shadow_price == b.shadow_price
    assert a.iterations == b.iterations


def test_steep_sigmoid_plateau_stays_feasible():
    # A steep sigmoid's weighted log-marginal is constant below its inflection
    # at double precision, so demand jumps discontinuously over R and no price
    # clears the link.  The solver must then stay feasible and report the
    # shortfall rather than pretend the market cleared.
    steep = SigmoidalUtility(a=0.5, b=900.0)  # a*b = 450, flat plateau
    users = (
        UserProfile("u1", apps=(AppDescriptor("v", steep, 1.0, 1000.0),)),
        UserProfile("u2", apps=(AppDescriptor("d", LOG, 1.0, 1000.0),)),
    )
    res = solve(AllocationProblem(users=users, capacity_kbps=500.0))
    assert sum(res.rates.values()) <= 500.0 + 1e-4
    assert res.residual_kbps > 1.0
    assert res.iterations <= 200


def test_solve_requires_an_active_app():
    users = (UserProfile("u", apps=(AppDescriptor("a", LOG, 0.0, 100.0),)),)
    with pytest.raises(ValidationError):
        solve(AllocationProblem(users=users, capacity_kbps=100.0))


def test_sweep_monotone_with_single_inflection_crossing():
    capacities = [100.0 * i for i in range(1, 21)]
    points = sweep(reference_users(), capacities)
    assert len(points) == 20
    prev = {app_id: 0.0 for app_id in points[0].rates}
    crossings = 0
    below = True
    for pt in points:
        for app_id, rate in pt.rates.items():
            assert rate >= prev[app_id] - 1e-6
        if below and pt.rates["video"] >= 470.0:
            crossings += 1
            below = False
        prev = pt.rates
    assert crossings == 1
    assert sweep(reference_users(), []) == []


def test_sweep_single_app_total_is_min_of_cap_and_capacity():
    users = (UserProfile("u", apps=(AppDescriptor("d", LOG, 1.0, 1000.0),)),)
    points = sweep(users, [200.0, 500.0, 1500.0])
    assert points[0].rates["d"] == pytest.approx(200.0, abs=1e-4)
    assert points[1].rates["d"] == pytest.approx(500.0, abs=1e-4)
    assert points[2].rates["d"] == 1000.0


def test_oracle_symmetric_split():
    dl = LogarithmicUtility(k=17.0, r_max=1000.0)
    users = (
        UserProfile("u1", apps=(AppDescriptor("d1", dl, 1.0, 1000.0),)),
        UserProfile("u2", apps=(AppDescriptor("d2", dl, 1.0, 1000.0),)),
    )
    rates = brute_force_oracle(AllocationProblem(users=users, capacity_kbps=1000.0))
    assert rates == {"d1": 500.0, "d2": 500.0}


def test_oracle_budget_below_grid_step():
    users = (UserProfile("u", apps=(AppDescriptor("d", LOG, 1.0, 100.0),)),)
    rates = brute_force_oracle(AllocationProblem(users=users, capacity_kbps=0.5),
                               grid_step=1.0)
    assert rates == {"d": 0.0}


def test_oracle_rejects_large_instances():
    users = tuple(UserProfile(f"u{i}", apps=(AppDescriptor(f"d{i}", LOG, 1.0, 100.0),))
                  for i in range(4))
    with pytest.raises(ValueError):
        brute_force_oracle(AllocationProblem(users=users, capacity_kbps=100.0))


def test_default_rate_cap():
    assert default_rate_cap(LOG, 1000.0) == 1000.0
    assert default_rate_cap(SIG, 1000.0) == 4700.0
    assert default_rate_cap(SIG, 10000.0) == 10000.0


def test_validate_problem_names_the_offender():
    good = AppDescriptor("a1", LOG, 1.0, 100.0)
    cases = [
        (AllocationProblem(users=(), capacity_kbps=0.0), "capacity"),
        (AllocationProblem(users=(UserProfile("u", apps=(good,)),),
                           capacity_kbps=100.0, tolerance_kbps=0.0), "tolerance"),
        (AllocationProblem(users=(UserProfile("u"), UserProfile("u")),
                           capacity_kbps=100.0), "duplicate ue_id"),
        (AllocationProblem(users=(UserProfile("u", apps=(good, good)),),
                           capacity_kbps=100.0), "duplicate app_id"),
        (AllocationProblem(users=(UserProfile("u", beta=0.0, apps=(good,)),),
                           capacity_kbps=100.0), "beta"),
        (AllocationProblem(users=(UserProfile("u", apps=(
            AppDescriptor("a1", LOG, 1.5, 100.0),)),), capacity_kbps=100.0), "alpha"),
        (AllocationProblem(users=(UserProfile("u", apps=(
            AppDescriptor("a1", LOG, 1.0, 0.0),)),), capacity_kbps=100.0), "rate_cap"),
        (AllocationProblem(users=(UserProfile("u", apps=(
            AppDescriptor("a1", LogarithmicUtility(k=math.nan, r_max=100.0), 1.0, 100.0),)),),
            capacity_kbps=100.0), "utility parameters"),
        (AllocationProblem(users=(UserProfile("u", apps=(
            AppDescriptor("a1", LOG, 0.7, 100.0),
            AppDescriptor("a2", LOG, 0.7, 100.0))),), capacity_kbps=100.0), "sum to 1"),
    ]
    for problem, fragment in cases:
        with pytest.raises(ValidationError) as err:
            validate_problem(problem)
        assert fragment in str(err.value)
