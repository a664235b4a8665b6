from __future__ import annotations

import csv

import numpy as np
import pytest

from lmmgof.cusum import (
    CusumProcess,
    InvalidSubset,
    LengthMismatch,
    covariance_KN,
    covariance_KN_O,
    cusum_from,
    export_trace,
    process_F,
    process_F_subset,
    process_O,
    statistics,
)
from lmmgof.data import from_arrays
from lmmgof.estimation import (
    VarianceComponents,
    fit_at_components,
    fit_lmm,
)
from lmmgof.transform import (
    VariantMissing,
    build_kit,
    residuals,
    transform_residuals,
)
from oracles import brute_cusum


def random_dataset(rng, n=8, n_i=5, p=3, k=2, s2b=0.4, s2e=0.5):
    y, X, Z = [], [], []
    beta = rng.normal(size=p)
    chol = np.linalg.cholesky(s2b * (np.eye(k) + 0.3 * (1 - np.eye(k))))
    for _ in range(n):
        x = np.column_stack([np.ones(n_i)] + [rng.uniform(size=n_i) for _ in range(p - 1)])
        z = x[:, :k].copy()
        b = chol @ rng.normal(size=k)
        y.append(x @ beta + z @ b + rng.normal(scale=np.sqrt(s2e), size=n_i))
        X.append(x)
        Z.append(z)
    return from_arrays(y, X, Z)


def fitted_bundle(rng, weights="inv_sqrt", **kwargs):
    ds = random_dataset(rng, **kwargs)
    fit = fit_lmm(ds, "REML")
    kit = build_kit(ds, fit, variant="both")
    bundle = residuals(ds, fit, weights=weights)
    transform_residuals(bundle, kit, variant="block")
    transform_residuals(bundle, kit, variant="full")
    return ds, fit, kit, bundle


class TestCusumFrom:
    def test_zero_values_give_zero_process(self):
        proc = cusum_from(np.zeros(6), np.arange(6.0), n=3)
        assert np.array_equal(proc.w, np.zeros(6))

    def test_single_observation(self):
        proc = cusum_from(np.array([2.5]), np.array([1.0]), n=1)
        assert proc.value_at(1.0) == 2.5
        assert proc.value_at(7.0) == 2.5
        assert proc.value_at(0.999) == 0.0

    def test_matches_brute_force_with_ties(self):
        values = np.array([0.5, -1.0, 2.0, 0.25])
        scores = np.array([1.0, 3.0, 1.0, 2.0])  # tie at 1.0
        proc = cusum_from(values, scores, n=2)
        expected = brute_cusum(values, scores, 2, proc.t)
        assert np.allclose(proc.w, expected, atol=1e-14)
        # tie slots share the accumulated value
        assert proc.w[0] == proc.w[1]
        assert proc.t[0] == proc.t[1] == 1.0

    def test_random_instances_match_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = int(rng.integers(1, 30))
            values = rng.normal(size=m)
            scores = rng.integers(0, 6, size=m).astype(float)
            n = int(rng.integers(1, 5))
            proc = cusum_from(values, scores, n)
            assert np.allclose(
                proc.w, brute_cusum(values, scores, n, proc.t), atol=1e-12
            )

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            cusum_from(np.zeros(3), np.zeros(4), n=1)

    def test_cluster_count_must_be_positive(self):
        with pytest.raises(ValueError, match="cluster count"):
            cusum_from(np.zeros(2), np.zeros(2), n=0)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            cusum_from(np.array([np.nan, 1.0]), np.zeros(2), n=1)
        with pytest.raises(ValueError, match="finite"):
            cusum_from(np.zeros(2), np.array([np.inf, 1.0]), n=1)

    def test_scale_equivariance_exact_for_power_of_two(self):
        rng = np.random.default_rng(1)
        values = rng.normal(size=15)
        scores = rng.normal(size=15)
        base = cusum_from(values, scores, n=4)
        doubled = cusum_from(2.0 * values, scores, n=4)
        flipped = cusum_from(-values, scores, n=4)
        assert np.array_equal(doubled.w, 2.0 * base.w)
        assert np.array_equal(flipped.w, -base.w)
        assert statistics(doubled).ks == 2.0 * statistics(base).ks
        assert statistics(flipped).ks == statistics(base).ks

    def test_scale_equivariance_general_constant(self):
        rng = np.random.default_rng(2)
        values = rng.normal(size=12)
        scores = rng.normal(size=12)
        base = cusum_from(values, scores, n=3)
        scaled = cusum_from(1.7 * values, scores, n=3)
        assert np.allclose(scaled.w, 1.7 * base.w, rtol=1e-12)
        assert np.isclose(
            statistics(scaled).cvm, 1.7**2 * statistics(base).cvm, rtol=1e-12
        )

    def test_ordering_invariance(self):
        rng = np.random.default_rng(3)
        values = rng.normal(size=20)
        scores = rng.integers(0, 5, size=20).astype(float)
        base = cusum_from(values, scores, n=5)
        perm = rng.permutation(20)
        shuffled = cusum_from(values[perm], scores[perm], n=5)
        assert np.array_equal(base.t, shuffled.t)
        assert np.allclose(base.w, shuffled.w, atol=1e-12)

    def test_step_semantics_between_jumps(self):
        proc = cusum_from(np.array([1.0, 1.0]), np.array([0.0, 2.0]), n=1)
        assert proc.value_at(-0.5) == 0.0
        assert proc.value_at(0.0) == 1.0
        assert proc.value_at(1.0) == 1.0  # holds the last jump's value
        assert proc.value_at(2.0) == 2.0


class TestProcessO:
    def test_exact_linear_outcome_gives_zero_process(self):
        """An outcome lying exactly in the span of X leaves zero marginal
        residuals, and everything downstream (BLUPs, conditional and
        transformed residuals, hence the process) is linear in them."""
        rng = np.random.default_rng(4)
        ds = random_dataset(rng)
        coef = np.array([1.0, -2.0, 0.5])
        exact = ds.with_outcome([x @ coef for x in ds.X])
        refit = fit_at_components(exact, VarianceComponents(0.4 * np.eye(2), 0.5))
        kit = build_kit(exact, refit, variant="block")
        bundle = residuals(exact, refit)
        transform_residuals(bundle, kit, variant="block")
        proc = process_O(bundle, kit, variant="block")
        assert np.max(np.abs(proc.w)) < 1e-8

    def test_zero_d_collapses_to_weighted_individual_process(self):
        rng = np.random.default_rng(5)
        ds = random_dataset(rng)
        vc = VarianceComponents(np.zeros((2, 2)), 0.7)
        fit = fit_at_components(ds, vc)
        kit = build_kit(ds, fit, variant="block")
        bundle = residuals(ds, fit)
        transform_residuals(bundle, kit, variant="block")
        proc = process_O(bundle, kit, variant="block")
        direct = cusum_from(
            np.concatenate([s @ e for s, e in zip(bundle.S, bundle.e_I)]),
            np.concatenate(bundle.yhat_P),
            len(ds.X),
        )
        assert np.allclose(proc.t, direct.t, atol=1e-12)
        assert np.allclose(proc.w, direct.w, atol=1e-12)

    def test_composition_matches_manual_cusum(self):
        rng = np.random.default_rng(6)
        ds, fit, kit, bundle = fitted_bundle(rng, n=5, n_i=4)
        for variant, tag in (("block", "O-block"), ("full", "O")):
            proc = process_O(bundle, kit, variant=variant)
            manual = cusum_from(
                np.concatenate(
                    [s @ e for s, e in zip(bundle.S, bundle.transformed[variant])]
                ),
                np.concatenate(bundle.yhat_I),
                len(ds.X),
            )
            assert proc.variant == tag
            assert np.array_equal(proc.w, manual.w)

    def test_missing_variant_raises(self):
        rng = np.random.default_rng(7)
        ds = random_dataset(rng, n=4, n_i=4)
        fit = fit_lmm(ds, "REML")
        kit = build_kit(ds, fit, variant="block")
        bundle = residuals(ds, fit)
        with pytest.raises(VariantMissing):
            process_O(bundle, kit, variant="block")  # not transformed yet
        transform_residuals(bundle, kit, variant="block")
        with pytest.raises(VariantMissing):
            process_O(bundle, kit, variant="full")  # kit lacks full


class TestProcessF:
    def test_exact_linear_outcome_gives_zero_process(self):
        rng = np.random.default_rng(8)
        ds = random_dataset(rng)
        coef = np.array([-0.3, 1.1, 2.0])
        exact = ds.with_outcome([x @ coef for x in ds.X])
        refit = fit_at_components(exact, VarianceComponents(0.4 * np.eye(2), 0.5))
        proc = process_F(residuals(exact, refit))
        assert np.max(np.abs(proc.w)) < 1e-8

    def test_composition_matches_manual_cusum(self):
        rng = np.random.default_rng(9)
        ds, fit, kit, bundle = fitted_bundle(rng, n=6, n_i=3)
        proc = process_F(bundle)
        manual = cusum_from(
            np.concatenate([s @ e for s, e in zip(bundle.S, bundle.e_I)]),
            np.concatenate(bundle.yhat_P),
            len(ds.X),
        )
        assert proc.variant == "F"
        assert np.array_equal(proc.w, manual.w)

    def test_cluster_flavor_uses_marginal_residuals(self):
        rng = np.random.default_rng(10)
        ds, fit, kit, bundle = fitted_bundle(rng, n=5, n_i=4)
        proc = process_F(bundle, flavor="cluster")
        manual = cusum_from(
            np.concatenate([s @ e for s, e in zip(bundle.S, bundle.e_P)]),
            np.concatenate(bundle.yhat_P),
            len(ds.X),
        )
        assert np.array_equal(proc.w, manual.w)
        with pytest.raises(ValueError, match="flavor"):
            process_F(bundle, flavor="marginal")

    def test_final_value_vanishes_for_unweighted_cluster_residuals(self):
        """With identity weighting and marginal residuals, the last process
        value is n^{-1/2} times the raw residual sum.  For a random-
        intercept model with a shared cluster size, the ones vector is an
        eigenvector of every V_i with one common eigenvalue, so the
        intercept's estimating equation pins that raw sum to zero.  (With
        unequal sizes or random slopes only the V^{-1}-weighted sum
        vanishes; the raw sum stays O(1), checked too.)"""
        for seed in range(3):
            rng = np.random.default_rng(seed)
            ds = random_dataset(rng, n=7, n_i=4, k=1)
            fit = fit_lmm(ds, "REML")
            bundle = residuals(ds, fit, weights="identity")
            proc = process_F(bundle, flavor="cluster")
            assert abs(proc.w[-1]) < 1e-6


class TestProcessFSubset:
    def test_full_subset_reproduces_f_ordering(self):
        rng = np.random.default_rng(12)
        ds, fit, kit, bundle = fitted_bundle(rng, n=5, n_i=4, p=3)
        full = process_F(bundle)
        sub = process_F_subset(bundle, [0, 1, 2])
        assert np.allclose(sub.t, full.t, atol=1e-12)
        assert np.allclose(sub.w, full.w, atol=1e-12)
        assert sub.variant == "F-subset"

    def test_single_column_orders_by_that_covariate(self):
        rng = np.random.default_rng(13)
        ds, fit, kit, bundle = fitted_bundle(rng, n=5, n_i=4, p=3)
        sub = process_F_subset(bundle, [1])
        covariate = np.concatenate([x[:, 1] for x in ds.X])
        expected_scores = np.sort(covariate * fit.beta[1])
        assert np.allclose(sub.t, expected_scores, atol=1e-12)

    def test_two_column_scores_match_brute_force(self):
        rng = np.random.default_rng(14)
        ds, fit, kit, bundle = fitted_bundle(rng, n=4, n_i=3, p=3)
        sub = process_F_subset(bundle, [0, 2])
        values = np.concatenate(
            [s @ e for s, e in zip(bundle.S, bundle.e_I)]
        )
        scores = np.concatenate(
            [x[:, 0] * fit.beta[0] + x[:, 2] * fit.beta[2] for x in ds.X]
        )
        expected = brute_cusum(values, scores, len(ds.X), sub.t)
        assert np.allclose(sub.w, expected, atol=1e-12)

    def test_invalid_subsets(self):
        rng = np.random.default_rng(15)
        ds, fit, kit, bundle = fitted_bundle(rng, n=4, n_i=3, p=3)
        for bad in ([], [0, 0], [3], [-1]):
            with pytest.raises(InvalidSubset):
                process_F_subset(bundle, bad)


class TestStatisticsOp:
    def test_zero_process(self):
        proc = cusum_from(np.zeros(4), np.arange(4.0), n=2)
        stats = statistics(proc)
        assert stats.ks == 0.0 and stats.cvm == 0.0

    def test_hand_computed_values(self):
        proc = CusumProcess(
            t=np.array([0.0, 1.0]), w=np.array([1.0, -2.0]), variant="raw", n=1
        )
        stats = statistics(proc)
        assert stats.ks == 2.0
        assert stats.cvm == 5.0

    def test_matches_scan(self):
        rng = np.random.default_rng(16)
        proc = cusum_from(rng.normal(size=25), rng.normal(size=25), n=5)
        stats = statistics(proc)
        ks = max(abs(w) for w in proc.w)
        cvm = sum(w * w for w in proc.w)
        assert np.isclose(stats.ks, ks, rtol=1e-15)
        assert np.isclose(stats.cvm, cvm, rtol=1e-13)


class TestCovarianceKN:
    def test_zero_below_all_predictions(self):
        rng = np.random.default_rng(17)
        ds = random_dataset(rng)
        fit = fit_lmm(ds, "REML")
        low = min(float(np.min(x @ fit.beta)) for x in ds.X) - 1.0
        assert covariance_KN(ds, fit, low, low) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(18)
        ds = random_dataset(rng)
        fit = fit_lmm(ds, "REML")
        grid = np.quantile(
            np.concatenate([x @ fit.beta for x in ds.X]), [0.2, 0.5, 0.8]
        )
        for t in grid:
            for s in grid:
                assert np.isclose(
                    covariance_KN(ds, fit, t, s),
                    covariance_KN(ds, fit, s, t),
                    rtol=1e-12,
                )

    def test_psd_on_grid(self):
        rng = np.random.default_rng(19)
        ds = random_dataset(rng, n=10, n_i=5)
        fit = fit_lmm(ds, "REML")
        grid = np.quantile(
            np.concatenate([x @ fit.beta for x in ds.X]),
            np.linspace(0.05, 0.95, 7),
        )
        k = np.array([[covariance_KN(ds, fit, t, s) for s in grid] for t in grid])
        eig = np.linalg.eigvalsh(0.5 * (k + k.T))
        assert eig.min() >= -1e-8 * max(np.trace(k), 1.0)

    def test_matches_monte_carlo_f_process_covariance(self):
        """Freeze the evaluation indicators at the original fitted scores
        and simulate fresh outcomes from the fitted model with components
        held fixed.  The process value at a frozen threshold is then an
        exactly linear functional of the Gaussian marginal errors, so its
        finite-sample covariance equals the plug-in formula and the Monte
        Carlo estimate must land within sampling error.  (Re-estimating
        the ordering scores each replicate adds a second-order effect the
        formula deliberately ignores; that would only blur this check.)"""
        rng = np.random.default_rng(20)
        ds = random_dataset(rng, n=30, n_i=4)
        fit = fit_lmm(ds, "REML")
        scores = np.concatenate([x @ fit.beta for x in ds.X])
        t, s = (float(q) for q in np.quantile(scores, [0.35, 0.7]))
        mask_t = scores <= t
        mask_s = scores <= s
        reps = 3000
        wt = np.empty(reps)
        ws = np.empty(reps)
        chol = [np.linalg.cholesky(v) for v in fit.V]
        root_n = np.sqrt(len(ds.X))
        for r in range(reps):
            sim = ds.with_outcome(
                [
                    x @ fit.beta + l @ rng.standard_normal(l.shape[0])
                    for x, l in zip(ds.X, chol)
                ]
            )
            bundle = residuals(sim, fit_at_components(sim, fit.vc))
            values = np.concatenate(
                [s_i @ e for s_i, e in zip(bundle.S, bundle.e_I)]
            )
            wt[r] = values[mask_t].sum() / root_n
            ws[r] = values[mask_s].sum() / root_n
        empirical = float(np.mean(wt * ws) - np.mean(wt) * np.mean(ws))
        plug_in = covariance_KN(ds, fit, t, s)
        ktt = covariance_KN(ds, fit, t, t)
        kss = covariance_KN(ds, fit, s, s)
        mc_se = np.sqrt((ktt * kss + plug_in**2) / reps)
        assert abs(empirical - plug_in) < 3.0 * mc_se
        # the same draws also pin down the diagonal entries
        assert abs(float(np.var(wt)) - ktt) < 3.0 * ktt * np.sqrt(2.0 / reps)
        assert abs(float(np.var(ws)) - kss) < 3.0 * kss * np.sqrt(2.0 / reps)

    def test_o_variant_monte_carlo_sanity(self):
        """The O covariance estimator: symmetric inputs give symmetric
        output, the diagonal is nonnegative, and a degenerate threshold
        below every possible prediction gives zero."""
        rng = np.random.default_rng(21)
        ds = random_dataset(rng, n=6, n_i=4)
        fit = fit_lmm(ds, "REML")
        kit = build_kit(ds, fit, variant="block")
        scores = np.concatenate([x @ fit.beta for x in ds.X])
        t = float(np.quantile(scores, 0.5))
        var_t = covariance_KN_O(
            ds, fit, kit, t, t, draws=200, rng=np.random.default_rng(0)
        )
        assert var_t >= 0.0
        low = float(scores.min()) - 50.0
        assert covariance_KN_O(
            ds, fit, kit, low, low, draws=50, rng=np.random.default_rng(1)
        ) == 0.0


class TestExportTrace:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(22)
        ds, fit, kit, bundle = fitted_bundle(rng, n=4, n_i=3)
        obs = process_F(bundle)
        null = cusum_from(rng.normal(size=12), rng.normal(size=12), n=4)
        path = tmp_path / "trace.csv"
        export_trace(path, [(0, obs), (1, null)])
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(obs.t) + len(null.t)
        obs_rows = [r for r in rows if r["replicate_id"] == "0"]
        assert all(r["variant"] == "F" for r in obs_rows)
        got_w = np.array([float(r["W"]) for r in obs_rows])
        assert np.array_equal(got_w, obs.w)
        got_t = np.array([float(r["t"]) for r in obs_rows])
        assert np.array_equal(got_t, obs.t)
