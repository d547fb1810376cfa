import csv

import numpy as np
import pytest

from conftest import noiseless_log, phased_arms
from core import Instance, InteractionMatrix, NoiseModel, symmetric_eigenvalues
from env import Environment
from errors import ArmIndexError, BudgetError, ConfigError, DataError
from estimation import (
    FitHyperparams,
    InteractionModel,
    RatingLog,
    analyze_fits,
    estimate_from_probe,
    fit_interaction_model,
    ingest_rating_csv,
    load_arm_map,
    matrix_norm,
    prior_counts,
    probe_schedule,
    probing_estimator,
    simulate_rating_log,
    stationary_baseline,
    summarize_errors,
    write_matrix_csv,
    write_rating_csv,
)

PSD_A = [[1.0, 0.5, 0.2], [0.5, 1.0, 0.3], [0.2, 0.3, 0.8]]
INDEFINITE_A = [[0.6, 0.2, 0.0], [0.2, -0.5, 0.1], [0.0, 0.1, 0.8]]


def write_ratings(path, rows, header=('user', 'timestamp', 'arms', 'rating')):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


class TestIngestion:
    def test_loss_is_distance_from_max_rating(self, tmp_path):
        write_ratings(tmp_path / "r.csv", [['u1', 1, '0', 5], ['u1', 2, '1', 1]])
        logs = ingest_rating_csv(tmp_path / "r.csv", k=2, min_events=2)
        np.testing.assert_array_equal(logs['u1'].losses, [0.0, 4.0])
        np.testing.assert_array_equal(logs['u1'].arms, [0, 1])

    def test_events_sorted_by_timestamp(self, tmp_path):
        write_ratings(tmp_path / "r.csv", [['u1', 3, '1', 2], ['u1', 1, '0', 4], ['u1', 2, '0', 3]])
        logs = ingest_rating_csv(tmp_path / "r.csv", k=2, min_events=1)
        np.testing.assert_array_equal(logs['u1'].arms, [0, 0, 1])
        np.testing.assert_array_equal(logs['u1'].losses, [1.0, 2.0, 3.0])

    def test_min_events_filter(self, tmp_path):
        sizes = {'a': 5, 'b': 4, 'c': 6, 'd': 1}
        rows = [[user, t, '0', 3] for user, n in sizes.items() for t in range(n)]
        write_ratings(tmp_path / "r.csv", rows)
        logs = ingest_rating_csv(tmp_path / "r.csv", k=1, min_events=5)
        assert sorted(logs) == ['a', 'c']

    def test_missing_column(self, tmp_path):
        write_ratings(tmp_path / "r.csv", [['u1', 1, 3]], header=('user', 'timestamp', 'rating'))
        with pytest.raises(ConfigError, match='arms'):
            ingest_rating_csv(tmp_path / "r.csv", k=2, min_events=1)

    def test_malformed_rows_skipped(self, tmp_path):
        write_ratings(tmp_path / "r.csv", [['u1', 1, '0', 'five'], ['u1', 2, '0', 4], ['u1', 'x', '1', 3]])
        logs = ingest_rating_csv(tmp_path / "r.csv", k=2, min_events=1)
        assert len(logs['u1']) == 1

    def test_arm_out_of_range(self, tmp_path):
        write_ratings(tmp_path / "r.csv", [['u1', 1, '7', 4]])
        with pytest.raises(ArmIndexError):
            ingest_rating_csv(tmp_path / "r.csv", k=2, min_events=1)

    def test_arm_names(self, tmp_path):
        (tmp_path / "arms.txt").write_text("Drama\nComedy\n")
        names = load_arm_map(tmp_path / "arms.txt")
        write_ratings(tmp_path / "r.csv", [['u1', 1, 'Comedy', 4], ['u1', 2, 'Drama', 3]])
        logs = ingest_rating_csv(tmp_path / "r.csv", k=2, min_events=1, arm_names=names)
        np.testing.assert_array_equal(logs['u1'].arms, [1, 0])

    def test_duplicate_arm_names(self, tmp_path):
        (tmp_path / "arms.txt").write_text("Drama\nDrama\n")
        with pytest.raises(ConfigError):
            load_arm_map(tmp_path / "arms.txt")

    def test_candidate_choice_is_seeded(self, tmp_path):
        rows = [['u1', t, '0;1;2', 3] for t in range(50)]
        write_ratings(tmp_path / "r.csv", rows)
        first = ingest_rating_csv(tmp_path / "r.csv", k=3, seed=4, min_events=1)
        second = ingest_rating_csv(tmp_path / "r.csv", k=3, seed=4, min_events=1)
        np.testing.assert_array_equal(first['u1'].arms, second['u1'].arms)
        assert len(set(first['u1'].arms.tolist())) > 1

    def test_synthetic_corpus_roundtrip(self, tmp_path):
        inst = Instance(a=InteractionMatrix.certify(PSD_A), initial_losses=[0.0, 0.0, 0.0])
        logs = [simulate_rating_log(inst, 30, seed=s, user_id=f"u{s}") for s in range(3)]
        write_rating_csv(logs, tmp_path / "r.csv", rating_max=5.0)
        loaded = ingest_rating_csv(tmp_path / "r.csv", k=3, min_events=30)
        for log in logs:
            np.testing.assert_array_equal(loaded[log.user_id].arms, log.arms)
            np.testing.assert_allclose(loaded[log.user_id].losses, log.losses)


def test_prior_counts():
    counts = prior_counts(np.array([0, 1, 0, 2]), 3)
    np.testing.assert_array_equal(counts, [[0, 0, 0], [1, 0, 0], [1, 1, 0], [2, 1, 0]])


class TestGradient:
    @pytest.mark.parametrize('parametrization', ['psd', 'indefinite'])
    def test_matches_finite_differences(self, parametrization):
        rng = np.random.default_rng(1)
        arms = rng.integers(3, size=200)
        losses = rng.standard_normal(200) + 0.01 * np.arange(200)
        model = InteractionModel(arms, losses, 3, parametrization)
        h = 1e-5
        for _ in range(10):
            theta = rng.standard_normal(model.size)
            numeric = np.empty_like(theta)
            for i in range(theta.size):
                step = np.zeros_like(theta)
                step[i] = h
                numeric[i] = (model.objective(theta + step) - model.objective(theta - step)) / (2 * h)
            np.testing.assert_allclose(model.gradient(theta), numeric, rtol=1e-5, atol=1e-6)

    def test_matrix_is_symmetric(self):
        model = InteractionModel(np.array([0, 1, 2]), np.array([1.0, 2.0, 3.0]), 3, 'indefinite')
        m = model.matrix(np.arange(9.0).reshape(3, 3))
        np.testing.assert_array_equal(m, m.T)


class TestFit:
    @pytest.mark.slow
    def test_recovers_psd_matrix(self):
        inst = Instance(a=InteractionMatrix.certify(PSD_A), initial_losses=[1.0, 2.0, 0.5])
        log = noiseless_log(inst, phased_arms(3, 2000, seed=0))
        fit = fit_interaction_model(log, 3, 'psd', FitHyperparams(max_iterations=100_000))
        assert np.max(np.abs(fit.a_hat.entries - inst.a.entries)) <= 1e-2
        assert fit.loo_squared_error < 1e-3
        assert fit.train_mse <= fit.initial_train_mse

    @pytest.mark.parametrize('parametrization', ['psd', 'indefinite'])
    def test_recovers_matrix_from_uniform_arms(self, parametrization):
        inst = Instance(a=InteractionMatrix.certify(PSD_A), initial_losses=[1.0, 2.0, 0.5])
        log = simulate_rating_log(inst, 2000, seed=0)
        fit = fit_interaction_model(log, 3, parametrization, FitHyperparams())
        assert np.max(np.abs(fit.a_hat.entries - inst.a.entries)) <= 1e-2
        assert fit.loo_squared_error < 1e-3
        assert fit.converged

    def test_least_squares_start_is_exact_on_noiseless_log(self):
        inst = Instance(a=InteractionMatrix.certify(INDEFINITE_A), initial_losses=[1.0, 2.0, 0.5])
        log = simulate_rating_log(inst, 2000, seed=1)
        model = InteractionModel(log.arms, log.losses, 3, 'indefinite')
        l1, a = model.unscale(model.warm_theta(FitHyperparams()))
        np.testing.assert_allclose(a, INDEFINITE_A, atol=1e-6)
        np.testing.assert_allclose(l1, [1.0, 2.0, 0.5], atol=1e-6)

    def test_cold_start_still_descends(self):
        inst = Instance(a=InteractionMatrix.certify(PSD_A), initial_losses=[1.0, 2.0, 0.5])
        log = noiseless_log(inst, phased_arms(3, 300, seed=6))
        fit = fit_interaction_model(log, 3, 'psd', FitHyperparams(max_iterations=2000, warm_start=False))
        assert fit.train_mse < fit.initial_train_mse

    @pytest.mark.slow
    def test_indefinite_recovers_negative_eigenvalue(self):
        inst = Instance(a=InteractionMatrix.certify(INDEFINITE_A), initial_losses=[1.0, 2.0, 0.5])
        log = noiseless_log(inst, phased_arms(3, 2000, seed=1))
        fit = fit_interaction_model(log, 3, 'indefinite', FitHyperparams(max_iterations=100_000))
        assert symmetric_eigenvalues(inst.a)[0] < 0
        assert fit.eigenvalues[0] < 0
        assert fit.eigenvalues[-1] > 0

    def test_psd_fit_stays_psd(self):
        inst = Instance(a=InteractionMatrix.certify(PSD_A), initial_losses=[1.0, 2.0, 0.5])
        log = noiseless_log(inst, phased_arms(3, 300, seed=2))
        fit = fit_interaction_model(log, 3, 'psd', FitHyperparams(max_iterations=2000))
        assert fit.a_hat.psd_certified
        assert np.min(fit.eigenvalues) >= -1e-9 * max(1.0, fit.norm_a)

    def test_stationary_data_gives_small_matrix(self):
        inst = Instance(a=InteractionMatrix.certify(np.zeros((3, 3))), initial_losses=[1.0, 2.0, 0.5])
        log = noiseless_log(inst, phased_arms(3, 500, seed=3))
        fit = fit_interaction_model(log, 3, 'psd', FitHyperparams(max_iterations=5000))
        assert fit.norm_a < 1e-3
        np.testing.assert_allclose(fit.l1_hat, [1.0, 2.0, 0.5], atol=1e-3)

    def test_fit_is_deterministic(self):
        inst = Instance(a=InteractionMatrix.certify(PSD_A), initial_losses=[1.0, 2.0, 0.5])
        log = noiseless_log(inst, phased_arms(3, 200, seed=4))
        hyper = FitHyperparams(max_iterations=500, seed=3)
        first = fit_interaction_model(log, 3, 'psd', hyper)
        second = fit_interaction_model(log, 3, 'psd', hyper)
        np.testing.assert_array_equal(first.a_hat.entries, second.a_hat.entries)

    def test_needs_two_events(self):
        log = RatingLog(user_id='u', arms=[0], losses=[1.0])
        with pytest.raises(DataError):
            fit_interaction_model(log, 2)

    @pytest.mark.slow
    def test_beats_stationary_baseline_on_influenced_users(self):
        inst = Instance(
            a=InteractionMatrix.certify(PSD_A),
            initial_losses=[1.0, 2.0, 0.5],
            noise=NoiseModel(kind='uniform_bounded', param=0.5),
        )
        fits, baselines = [], []
        for user in range(50):
            log = simulate_rating_log(inst, 300, seed=user, user_id=f"u{user}")
            fits.append(fit_interaction_model(log, 3, 'psd', FitHyperparams(max_iterations=5000)))
            baselines.append(stationary_baseline(log, 3))
        summary = summarize_errors(fits, baselines)
        assert summary.n_users == 50
        assert summary.influential_wins >= 0.8
        assert summary.influential_mean < summary.stationary_mean


class TestStationaryBaseline:
    def test_constant_losses(self):
        log = RatingLog(user_id='u', arms=[0, 1, 0, 1, 0], losses=[2.0, 3.0, 2.0, 3.0, 2.0])
        assert stationary_baseline(log, 2).loo_squared_error == 0.0

    def test_single_arm_mean(self):
        log = RatingLog(user_id='u', arms=[0, 0, 0, 0], losses=[1.0, 2.0, 6.0, 9.0])
        baseline = stationary_baseline(log)
        assert baseline.means[0] == 3.0
        assert baseline.loo_squared_error == 36.0

    def test_drift_favors_influential_model(self):
        inst = Instance(a=InteractionMatrix.certify(PSD_A), initial_losses=[1.0, 2.0, 0.5])
        log = noiseless_log(inst, phased_arms(3, 300, seed=5))
        fit = fit_interaction_model(log, 3, 'psd', FitHyperparams(max_iterations=5000))
        assert stationary_baseline(log, 3).loo_squared_error > fit.loo_squared_error


class TestProbing:
    def test_schedule(self):
        assert probe_schedule(2) == [0, 0, 1, 1, 0, 1, 0]
        assert probe_schedule(2, both_orders=True) == [0, 0, 1, 1, 0, 1, 0, 1, 0, 1]

    @pytest.mark.parametrize('a', [
        [[1.0, 1.0], [1.0, 2.0]],
        [[1.0, 0.5], [0.5, 0.25]],
        PSD_A,
        INDEFINITE_A,
    ])
    def test_noiseless_recovery_is_exact(self, a):
        inst = Instance(a=InteractionMatrix(entries=a), initial_losses=np.zeros(len(a)))
        result = probing_estimator(Environment(inst), inst.k)
        np.testing.assert_allclose(result.a_hat.entries, a, atol=1e-12)

    @pytest.mark.parametrize('both_orders', [False, True])
    def test_bounded_noise_error(self, both_orders):
        inst = Instance(
            a=InteractionMatrix.certify(PSD_A),
            initial_losses=[0.0, 0.0, 0.0],
            noise=NoiseModel(kind='uniform_bounded', param=1.0),
        )
        for seed in range(20):
            result = probing_estimator(Environment(inst, seed), 3, both_orders=both_orders)
            error = np.abs(result.a_hat.entries - inst.a.entries)
            assert np.max(np.diag(error)) <= 2.0
            assert np.max(error) <= 4.0
            assert result.pulls <= 3 * 3 * 3
            assert result.pulls_per_k2 == result.pulls / 9

    def test_pull_count(self):
        inst = Instance(a=InteractionMatrix.certify(PSD_A), initial_losses=[0.0, 0.0, 0.0])
        assert probing_estimator(Environment(inst), 3).pulls == 15

    def test_budget(self):
        inst = Instance(a=InteractionMatrix.certify(PSD_A), initial_losses=[0.0, 0.0, 0.0])
        with pytest.raises(BudgetError):
            probing_estimator(Environment(inst), 3, budget=10)

    def test_wrong_schedule(self):
        with pytest.raises(DataError):
            estimate_from_probe([(1, 0.0)] * 7, 2)
        with pytest.raises(BudgetError):
            estimate_from_probe([(0, 0.0)], 2)


class TestAnalysis:
    def _fits(self, n_users):
        inst = Instance(a=InteractionMatrix.certify(PSD_A), initial_losses=[1.0, 2.0, 0.5])
        return [
            fit_interaction_model(noiseless_log(inst, phased_arms(3, 100, seed=s), f"u{s}"), 3,
                                  'indefinite', FitHyperparams(max_iterations=200))
            for s in range(n_users)
        ]

    def test_eigenvalue_pool_size(self):
        analysis = analyze_fits(self._fits(4))
        assert len(analysis.eigenvalues) == 4 * 3
        assert analysis.users == ['u0', 'u1', 'u2', 'u3']
        assert analysis.a_mean.shape == (3, 3)

    def test_zero_fits(self):
        fits = self._fits(2)
        zeroed = [f.model_copy(update={'a_hat': InteractionMatrix(entries=np.zeros((3, 3))),
                                       'eigenvalues': np.zeros(3), 'norm_a': 0.0}) for f in fits]
        analysis = analyze_fits(zeroed)
        assert analysis.norms == [0.0, 0.0]
        assert all(v == 0.0 for _, _, v in analysis.eigenvalues)
        np.testing.assert_array_equal(analysis.a_mean, np.zeros((3, 3)))

    def test_no_fits(self):
        with pytest.raises(DataError):
            analyze_fits([])

    def test_norms(self):
        a = InteractionMatrix(entries=[[2.0, 0.0], [0.0, -3.0]])
        assert matrix_norm(a, 'max_abs') == 3.0
        assert matrix_norm(a, 'frobenius') == pytest.approx(np.sqrt(13.0))
        assert matrix_norm(a, 'spectral') == pytest.approx(3.0)

    def test_matrix_csv(self, tmp_path):
        write_matrix_csv(np.eye(2), tmp_path / "a.csv", ['Drama', 'Comedy'])
        with open(tmp_path / "a.csv") as f:
            rows = list(csv.reader(f))
        assert rows == [['Drama', 'Comedy'], ['1.0', '0.0'], ['0.0', '1.0']]
