import os

import numpy as np
import pytest

from benchmark import theorem_bound
from core import effective_linear_term
from errors import ConfigError, DataError
from experiments import (
    RegretCurve,
    check_theorem_bound,
    fit_loglog_slope,
    fit_power_law,
    lcb_exploration_counts,
    random_instance,
    regret_scan,
    slope_histogram,
    worker_pool,
)
from rng import derive_seed

HORIZONS = [2 ** e for e in range(7, 15)]


class TestInstances:
    def test_counterexample(self, counterexample):
        np.testing.assert_array_equal(counterexample.a.entries, [[1.0, 1.0], [1.0, 2.0]])
        assert counterexample.noise.kind == 'none'

    def test_linear_regret_instance(self, linear_regret):
        np.testing.assert_array_equal(effective_linear_term(linear_regret), [0.0, 0.0])

    def test_random_instance(self):
        inst = random_instance(3, seed=12)
        assert inst.k == 3
        assert inst.a.psd_certified
        assert np.max(np.abs(inst.a.entries)) == 1.0
        assert inst.noise.kind == 'gaussian' and inst.noise.param == 1.0

    def test_random_instance_is_seeded(self):
        first, second = random_instance(4, seed=3), random_instance(4, seed=3)
        np.testing.assert_array_equal(first.a.entries, second.a.entries)
        np.testing.assert_array_equal(first.initial_losses, second.initial_losses)
        assert not np.array_equal(random_instance(4, seed=4).a.entries, first.a.entries)

    def test_random_instance_needs_two_arms(self):
        with pytest.raises(ConfigError):
            random_instance(1, seed=0)


class TestRegretScan:
    def test_optimal_policy_has_no_regret(self, counterexample):
        curve = regret_scan(counterexample, 'fixed:1', [10, 100, 1000], seeds=[0, 1])
        assert curve.regrets == [0.0, 0.0, 0.0]
        assert curve.n_seeds == 2

    def test_prefix_matches_fresh_runs(self, linear_regret):
        scanned = regret_scan(linear_regret, 'fixed:1', [8, 64], seeds=[0])
        for t, value in zip(scanned.horizons, scanned.regrets):
            single = regret_scan(linear_regret, 'fixed:1', [t], seeds=[0])
            assert single.regrets[0] == pytest.approx(value)

    def test_rejects_bad_horizons(self, counterexample):
        with pytest.raises(ConfigError):
            regret_scan(counterexample, 'ilcb', [100, 10], seeds=[0])
        with pytest.raises(ConfigError):
            regret_scan(counterexample, 'ilcb', [], seeds=[0])
        with pytest.raises(ConfigError):
            regret_scan(counterexample, 'ilcb', [10], seeds=[])

    def test_pool_matches_serial(self):
        inst = random_instance(3, seed=6)
        seeds = [derive_seed(0, "run", s) for s in range(4)]
        serial = regret_scan(inst, 'ilcb', [50, 200], seeds)
        with worker_pool(2) as pool:
            parallel = regret_scan(inst, 'ilcb', [50, 200], seeds, pool=pool)
        assert parallel.regrets == serial.regrets
        assert parallel.stderr == serial.stderr

    def test_seed_order_does_not_matter(self):
        inst = random_instance(3, seed=9)
        seeds = [derive_seed(0, 'run', s) for s in range(6)]
        forward = regret_scan(inst, 'ilcb', [20, 80, 160], seeds)
        shuffled = regret_scan(inst, 'ilcb', [20, 80, 160], [seeds[i] for i in (3, 0, 5, 1, 4, 2)])
        assert shuffled.regrets == pytest.approx(forward.regrets, rel=1e-12, abs=1e-12)
        assert shuffled.stderr == pytest.approx(forward.stderr, rel=1e-12, abs=1e-12)
        assert shuffled.max_run_regrets == forward.max_run_regrets

    def test_curve_shape_checked(self):
        with pytest.raises(ValueError):
            RegretCurve(horizons=[1, 2], regrets=[0.0], stderr=[0.0], max_run_regrets=[0.0],
                        n_seeds=1, policy_name='x')


class TestSlopes:
    def test_linear_power_law(self):
        t = np.array(HORIZONS, dtype=float)
        fit = fit_power_law(t, 3.0 * t)
        assert fit.slope == pytest.approx(1.0, abs=1e-9)
        assert fit.r_squared == pytest.approx(1.0)

    def test_quadratic_power_law(self):
        t = np.array(HORIZONS, dtype=float)
        assert fit_power_law(t, 0.5 * t ** 2).slope == pytest.approx(2.0, abs=1e-9)

    def test_non_positive_points_excluded(self):
        fit = fit_power_law([10, 100, 1000, 10000], [-1.0, 0.0, 1000.0, 10000.0])
        assert fit.n_points == 2 and fit.n_excluded == 2
        assert fit.slope == pytest.approx(1.0)

    @pytest.mark.parametrize('factor', [1e-3, 0.5, 7.0, 1e4])
    def test_slope_ignores_regret_scale(self, factor):
        curve = RegretCurve(horizons=[64, 128, 256, 512], regrets=[3.1, 9.7, 22.0, 80.5], stderr=[0.0] * 4,
                            max_run_regrets=[3.1, 9.7, 22.0, 80.5], n_seeds=1, policy_name='lcb')
        scaled = curve.model_copy(update={'regrets': [factor * r for r in curve.regrets]})
        assert fit_loglog_slope(scaled).slope == pytest.approx(fit_loglog_slope(curve).slope, rel=1e-9, abs=1e-12)
        assert fit_loglog_slope(scaled).intercept == pytest.approx(fit_loglog_slope(curve).intercept + np.log(factor))

    def test_too_few_points(self):
        with pytest.raises(DataError):
            fit_power_law([10, 100], [0.0, 5.0])

    def test_lcb_superlinear_on_counterexample(self, counterexample):
        lcb = fit_loglog_slope(regret_scan(counterexample, 'lcb', HORIZONS, seeds=[0]))
        ilcb_curve = regret_scan(counterexample, 'ilcb', HORIZONS, seeds=[0])
        ilcb = fit_loglog_slope(ilcb_curve)
        assert 1.55 <= lcb.slope <= 1.95
        assert 0.85 <= ilcb.slope <= 1.20
        assert ilcb_curve.regrets[-1] < regret_scan(counterexample, 'lcb', HORIZONS[-1:], seeds=[0]).regrets[0]

    def test_ilcb_within_guarantee(self, counterexample):
        curve = regret_scan(counterexample, 'ilcb', HORIZONS, seeds=[0])
        check = check_theorem_bound(counterexample, curve)
        assert check.checked == len(HORIZONS)
        assert check.violations == 0
        assert not check.advisory

    def test_lcb_exploration_lower_bound(self):
        counts = lcb_exploration_counts(HORIZONS)
        assert [c.horizon for c in counts] == HORIZONS
        for c in counts:
            assert c.n_arm2 >= c.lower_bound

    def test_lcb_exploration_has_no_bound_at_one_round(self):
        counts = lcb_exploration_counts([1, 2, 4])
        assert counts[0].lower_bound is None
        assert counts[1].lower_bound == pytest.approx(2 / (20 * np.log(2)))


def test_gaussian_noise_makes_bound_check_advisory():
    inst = random_instance(3, seed=0)
    curve = regret_scan(inst, 'ilcb', [64, 128], seeds=[0])
    check = check_theorem_bound(inst, curve)
    assert check.advisory
    l1_inf = float(np.max(np.abs(inst.initial_losses)))
    expected = sum(1 for t, r in zip(curve.horizons, curve.max_run_regrets) if r > theorem_bound(3, l1_inf, t))
    assert check.violations == expected


def test_histogram_counts_every_fit():
    hist = slope_histogram(3, 4, [64, 128, 256], master_seed=1, bins=5)
    assert int(hist.counts.sum()) == len(hist.fits)
    assert len(hist.edges) == 6
    assert len(hist.instance_ids) == len(hist.seeds) == len(hist.fits)
    assert set(hist.instance_ids) <= {'1', '2', '3', '4'}


@pytest.mark.slow
def test_ilcb_slope_histogram_has_two_clusters():
    hist = slope_histogram(3, 100, HORIZONS, 'ilcb', master_seed=0)
    slopes = np.array([f.slope for f in hist.fits])
    assert np.any(slopes < 0.5)
    assert np.any((slopes >= 0.8) & (slopes <= 1.3))


@pytest.mark.slow
def test_random_instance_mean_slopes():
    curves = {}
    with worker_pool(os.cpu_count() or 1) as pool:
        for spec in ('lcb', 'ilcb'):
            regrets = []
            for index in range(100):
                inst = random_instance(3, derive_seed(0, "instance", index))
                seeds = [derive_seed(0, "run", index, s) for s in range(10)]
                regrets.append(regret_scan(inst, spec, HORIZONS, seeds, pool=pool).regrets)
            curves[spec] = np.mean(regrets, axis=0)
    assert 1.5 <= fit_power_law(HORIZONS, curves['lcb']).slope <= 1.95
    assert 0.9 <= fit_power_law(HORIZONS, curves['ilcb']).slope <= 1.35
