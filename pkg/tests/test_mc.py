import numpy as np
import pytest

from mgmlmc import mc, randfield, solver


def brute_force_cost(v, C, e, M=200):
    """Cheapest integer N <= M per level meeting sum v/N <= e."""
    n = np.arange(1, M + 1, dtype=float)
    N0, N1 = np.meshgrid(n, n, indexing="ij")
    rem = e - v[0] / N0 - v[1] / N1
    with np.errstate(divide="ignore", invalid="ignore"):
        N2 = np.where(rem > 0, np.maximum(1, np.ceil(v[2] / rem)), np.inf)
    N2[N2 > M] = np.inf
    return float((N0 * C[0] + N1 * C[1] + N2 * C[2]).min())


def random_instance(rng):
    v = np.sort(rng.uniform(0.05, 1, 3))[::-1]
    C = np.sort(rng.uniform(1, 10, 3))
    e = np.max(np.sqrt(v / C)) * np.sum(np.sqrt(v * C)) / rng.uniform(120, 190)
    return v, C, e


def plan_of(N):
    N = tuple(N)
    one = np.ones(len(N))
    return mc.MlmcPlan(e_L=1.0, N=N, v=one, C=one, N_real=np.array(N, float), predicted_cost=0.0)


def test_allocation_hand_instance():
    p = mc.allocate([1, 0.25, 1 / 16], [1, 4, 16], 3 / 16)
    assert p.N == (16, 4, 1)
    assert np.allclose(p.N_real, [16, 4, 1], rtol=1e-14)


def test_single_level_allocation():
    assert mc.allocate([1.0], [1.0], 0.1).N == (10,)


def test_allocation_constraint_and_kkt():
    rng = np.random.default_rng(0)
    for _ in range(50):
        v, C, e = random_instance(rng)
        p = mc.allocate(v, C, e)
        assert np.sum(v / np.array(p.N)) <= e
        assert np.sum(v / p.N_real) == pytest.approx(e, rel=1e-13)
        ratio = p.N_real * np.sqrt(C / v)
        assert np.allclose(ratio, ratio[0], rtol=1e-13)


def test_relaxation_is_a_lower_bound():
    rng = np.random.default_rng(5)
    for _ in range(10):
        v, C, e = random_instance(rng)
        p = mc.allocate(v, C, e)
        best = brute_force_cost(v, C, e)
        assert p.predicted_cost <= best * (1 + 1e-12)
        assert float(np.dot(p.N, C)) >= best * (1 - 1e-12)


@pytest.mark.parametrize("args", [([1.0], [1.0], 0.0), ([1.0, 1.0], [1.0], 0.1), ([0.0], [1.0], 0.1)])
def test_allocation_errors(args):
    with pytest.raises(ValueError):
        mc.allocate(*args)


def test_models():
    h = np.array([0.25, 0.125, 0.0625])
    assert np.allclose(mc.VarianceModel(2.0, 2.0, h).v, [2.0, 0.5, 0.125])
    assert np.allclose(mc.CostModel(h, 2.0).C, [1.0, 4.0, 16.0])
    fit = mc.CostModel.fit(h, [3.0, 12.0, 48.0])
    assert fit.gamma == pytest.approx(2.0, abs=1e-12)
    assert mc.sampling_error_target(1e-5, 100) == pytest.approx(1e-7)
    assert mc.required_N_SL(1e-7, 1e-5) == 100
    with pytest.raises(ValueError):
        mc.sampling_error_target(0.0, 10)


def test_telescoping_toy_matches_closed_form():
    a = 0.5

    def q(level, Y):
        return np.exp(a * Y[0]) * (1 + 2.0 ** -level * Y[1] ** 2)

    def pair(level, Y):
        return q(level, Y), (q(level - 1, Y) if level > 0 else 0.0)

    est, means, var = mc.telescoping_mean(pair, (4000, 1000, 250), 3, 2)
    exact = np.exp(a * a / 2) * (1 + 2.0 ** -2)
    se = np.sqrt(sum(v / n for v, n in zip(var, (4000, 1000, 250))))
    assert abs(est - exact) <= 4 * se
    assert var[1] > var[2]


def test_slmc_single_sample_is_one_solve(exp1):
    est = mc.slmc(exp1, 1, 1, base_seed=5)
    vec, _, _ = mc._solve_term_sample(exp1, 5, 0, 0, 1, False, False)
    assert np.array_equal(est.mean, vec)
    assert all(v == 0.0 for v in est.terms[0].variance.values())


def test_deterministic_field_has_zero_variance():
    exp = mc.setup(L=0, cov=randfield.CovarianceSpec(variance=1e-300))
    est = mc.slmc(exp, 0, 4, base_seed=1)
    assert all(v == 0.0 for v in est.terms[0].variance.values())


def test_one_level_mlmc_equals_slmc(exp1):
    a = mc.mlmc(exp1, plan_of([6]), base_seed=2)
    b = mc.slmc(exp1, 0, 6, base_seed=2)
    assert np.array_equal(a.mean, b.mean)
    assert a.terms[0].variance == b.terms[0].variance


@pytest.fixture(scope="module")
def runs2(exp2):
    plan = plan_of([10, 20, 20])
    return mc.mlmc(exp2, plan, base_seed=4), mc.mgmlmc(exp2, plan, base_seed=4)


def test_telescoping_sum_identity(runs2):
    for est in runs2:
        total = est.level_means[0].copy()
        for m in est.level_means[1:]:
            total = total + m
        assert np.array_equal(total, est.mean)
        assert est.N == (10, 20, 20)


def test_correction_variances_decay(runs2):
    v = [t.variance["L2"] for t in runs2[0].terms]
    assert v[0] > v[1] > v[2]


def test_warm_start_matches_cold_start(runs2, exp2):
    ml, mg = runs2
    tol = exp2.cfg.tol
    assert np.max(np.abs(ml.mean - mg.mean)) <= 10 * tol * np.max(np.abs(ml.mean))
    for a, b in zip(ml.terms[1:], mg.terms[1:]):
        assert b.cycles <= a.cycles
    assert mg.flops < ml.flops


def test_parallel_run_is_bitwise_identical(exp1):
    a = mc.mgmlmc(exp1, plan_of([6, 6]), base_seed=8, workers=1)
    b = mc.mgmlmc(exp1, plan_of([6, 6]), base_seed=8, workers=2)
    assert np.array_equal(a.mean, b.mean)
    assert a.flops == b.flops
    assert [t.variance for t in a.terms] == [t.variance for t in b.terms]


def test_pilot_variance(exp1):
    v1, stats, reps = mc.pilot_variance(exp1, 1, 6, "L2", base_seed=0)
    v2, _, _ = mc.pilot_variance(exp1, 1, 6, "L2", base_seed=0)
    assert v1 == v2 and v1 > 0 and len(reps) == 6
    with pytest.raises(ValueError):
        mc.pilot_variance(exp1, 1, 1, "L2", 0)
    with pytest.raises(ValueError):
        mc.pilot_variance(exp1, 1, 4, "L3", 0)


def test_plan_deeper_than_hierarchy(exp1):
    with pytest.raises(ValueError):
        mc.mlmc(exp1, plan_of([2, 2, 2]), 0)


def test_solver_failure_names_the_sample():
    exp = mc.setup(L=1, cfg=solver.CycleConfig(tol=1e-15, max_cycles=1))
    with pytest.raises(mc.SampleFailure) as err:
        mc.mlmc(exp, plan_of([1, 2]), base_seed=0)
    assert err.value.index == 0 and "sample 0" in str(err.value)


def test_cost_report_and_relative_difference(exp1):
    a = mc.slmc(exp1, 1, 2, base_seed=1)
    rep = mc.cost_report({"slmc": a, "mlmc": a, "mgmlmc": a}, beta=2.0)
    assert rep["mlmc/slmc"] == 1.0 and rep["mgmlmc/mlmc"] == 1.0
    assert rep["theory_factor"] == pytest.approx(2.0 ** 2 / 2)
    d = mc.relative_difference(a.mean, a.mean, exp1.hier, 1)
    assert set(d) == {"phi", "ux", "uy", "p"} and all(x == 0.0 for x in d.values())
    b = a.mean.copy()
    s = exp1.hier.levels[1].field_slices()["p"]
    b[s] *= 1.01
    d = mc.relative_difference(a.mean, b, exp1.hier, 1)
    assert d["p"] == pytest.approx(0.01) and d["phi"] == 0.0
