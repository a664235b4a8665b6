"""Estimation tests pinned against the dense oracles in ``oracles.py``."""

from __future__ import annotations

import numpy as np
import pytest

from lmmgof.data import from_arrays
from lmmgof.estimation import (
    FitOptions,
    NoConvergence,
    SufficientStats,
    VarianceComponents,
    _negloglik,
    blup,
    components_to_theta,
    fit_lmm,
    gls_beta,
    profile_loglik,
    theta_to_components,
)

from oracles import (
    dense_blup,
    dense_gls,
    dense_loglik,
    dense_ml_optimum,
    oneway_anova_reml,
    oneway_loglik,
)


def random_dataset(rng, n=8, n_i=5, p=3, k=2, s2b=0.3, s2e=0.5):
    """Random-intercept-and-slope data with smooth fixed effects."""
    chol = np.linalg.cholesky(s2b * (np.eye(k) + 0.3 * (np.ones((k, k)) - np.eye(k))))
    y, X, Z = [], [], []
    beta = rng.normal(size=p)
    for _ in range(n):
        x = np.column_stack([np.ones(n_i)] + [rng.uniform(size=n_i) for _ in range(p - 1)])
        z = x[:, :k].copy()
        b = chol @ rng.normal(size=k)
        eps = rng.normal(scale=np.sqrt(s2e), size=n_i)
        y.append(x @ beta + z @ b + eps)
        X.append(x)
        Z.append(z)
    return from_arrays(y, X, Z)


def oneway_dataset(rng, n=20, n_i=6, mu=1.5, s2b=1.0, s2e=0.4):
    y, X, Z = [], [], []
    for _ in range(n):
        b = rng.normal(scale=np.sqrt(s2b))
        y.append(mu + b + rng.normal(scale=np.sqrt(s2e), size=n_i))
        X.append(np.ones((n_i, 1)))
        Z.append(np.ones((n_i, 1)))
    return from_arrays(y, X, Z)


class TestGlsBeta:
    def test_saturated_design_interpolates(self):
        """With X square and invertible, GLS reproduces y exactly."""
        rng = np.random.default_rng(11)
        stacked = rng.normal(size=(4, 4)) + 3 * np.eye(4)
        X = [stacked[:2], stacked[2:]]
        Z = [np.ones((2, 1)) for _ in range(2)]
        y = [rng.normal(size=2) for _ in range(2)]
        ds = from_arrays(y, X, Z, check=False)
        vc = VarianceComponents(D=np.array([[0.7]]), sigma2=0.3)
        beta = gls_beta(ds, vc)
        fitted = np.vstack(X) @ beta
        assert np.allclose(fitted, np.concatenate(y), atol=1e-8)

    def test_intercept_only_iid_is_grand_mean(self):
        rng = np.random.default_rng(5)
        y = [rng.normal(size=4) for _ in range(6)]
        X = [np.ones((4, 1))] * 6
        Z = [np.ones((4, 1))] * 6
        ds = from_arrays(y, X, Z)
        vc = VarianceComponents(D=np.array([[0.0]]), sigma2=1.3)
        beta = gls_beta(ds, vc)
        assert beta[0] == pytest.approx(np.concatenate(y).mean(), abs=1e-10)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_dense_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        ds = random_dataset(rng)
        d = np.array([[0.5, 0.1], [0.1, 0.4]])
        vc = VarianceComponents(D=d, sigma2=0.6)
        beta = gls_beta(ds, vc)
        expected = dense_gls(ds.y, ds.X, ds.Z, d, 0.6)
        assert np.allclose(beta, expected, rtol=1e-10, atol=1e-12)

    def test_estimating_equation_holds(self):
        rng = np.random.default_rng(77)
        ds = random_dataset(rng, n=12)
        vc = VarianceComponents(D=0.4 * np.eye(2), sigma2=0.8)
        beta = gls_beta(ds, vc)
        score = np.zeros(ds.p)
        for x, z, yy in zip(ds.X, ds.Z, ds.y):
            vi = z @ vc.D @ z.T + vc.sigma2 * np.eye(z.shape[0])
            score += x.T @ np.linalg.solve(vi, yy - x @ beta)
        assert np.max(np.abs(score)) < 1e-8


class TestProfileLoglik:
    @pytest.mark.parametrize("reml", [False, True])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_dense_oracle(self, seed, reml):
        rng = np.random.default_rng(200 + seed)
        ds = random_dataset(rng, n=6, n_i=4)
        d = np.array([[0.6, -0.1], [-0.1, 0.3]])
        vc = VarianceComponents(D=d, sigma2=0.5)
        got = profile_loglik(ds, vc, "REML" if reml else "ML")
        expected = dense_loglik(ds.y, ds.X, ds.Z, d, 0.5, reml)
        assert got == pytest.approx(expected, rel=1e-10)

    @pytest.mark.parametrize("reml", [False, True])
    def test_matches_oneway_closed_form(self, reml):
        rng = np.random.default_rng(31)
        ds = oneway_dataset(rng, n=15, n_i=5)
        s2b, s2e = 0.9, 0.35
        vc = VarianceComponents(D=np.array([[s2b]]), sigma2=s2e)
        got = profile_loglik(ds, vc, "REML" if reml else "ML")
        mu = gls_beta(ds, vc)[0]
        expected = oneway_loglik(ds.y, mu, s2b, s2e, reml)
        assert got == pytest.approx(expected, rel=1e-10)

    @pytest.mark.parametrize("reml", [False, True])
    def test_reduced_objective_agrees_with_dense_route(self, reml):
        """The optimizer's cross-product objective is a second route to the
        same likelihood; the two must agree at arbitrary parameter points."""
        rng = np.random.default_rng(404)
        ds = random_dataset(rng, n=7, n_i=6)
        stats = SufficientStats.from_dataset(ds)
        for _ in range(5):
            d = np.diag(rng.uniform(0.1, 1.0, size=2))
            d[0, 1] = d[1, 0] = 0.2 * np.sqrt(d[0, 0] * d[1, 1])
            s2 = rng.uniform(0.2, 1.5)
            theta = components_to_theta(d, s2)
            via_stats = -_negloglik(theta, stats, reml)
            via_dense = profile_loglik(
                ds, VarianceComponents(D=d, sigma2=s2), "REML" if reml else "ML"
            )
            assert via_stats == pytest.approx(via_dense, rel=1e-10)

    @pytest.mark.parametrize("k", [1, 2, 3])
    @pytest.mark.parametrize("reml", [False, True])
    def test_batched_kernel_matches_reference(self, k, reml):
        """The optimizer's hand-expanded batch kernel (k <= 2) and the
        generic batched path (k >= 3) must track the plain per-point
        objective to rounding error."""
        from lmmgof.estimation import _Objective

        rng = np.random.default_rng(500 + k)
        ds = random_dataset(rng, n=6, n_i=6, p=4, k=k)
        stats = SufficientStats.from_dataset(ds)
        obj = _Objective(stats, reml)
        center = components_to_theta(0.4 * np.eye(k), 0.7)
        thetas = center[None] + rng.normal(scale=0.7, size=(12, center.size))
        got = obj.many(thetas)
        expected = np.array([_negloglik(t, stats, reml) for t in thetas])
        assert np.allclose(got, expected, rtol=1e-9, atol=1e-9)

    def test_overflowing_trial_points_are_rejected_not_fatal(self):
        """Line searches sometimes probe absurd parameter values; the
        objective must price them out, never raise."""
        from lmmgof.estimation import _BIG, _Objective

        rng = np.random.default_rng(77)
        ds = random_dataset(rng)
        stats = SufficientStats.from_dataset(ds)
        sane = components_to_theta(0.4 * np.eye(2), 0.7)
        crazy = np.array(
            [
                [800.0, 5.0, 900.0, 1000.0],
                [1e8, -1e8, 1e8, 1e8],
                [-1e4, 0.0, -1e4, -1e4],
            ]
        )
        for reml in (False, True):
            obj = _Objective(stats, reml)
            vals = obj.many(np.vstack([crazy, sane[None]]))
            assert np.all(vals[:3] == _BIG)
            assert np.isfinite(vals[3]) and vals[3] < _BIG
            for row in crazy:
                assert _negloglik(row, stats, reml) == _BIG

    def test_reml_ml_offset_identity(self):
        """REML = ML - 0.5 logdet H + (p/2) log 2pi at any fixed components."""
        rng = np.random.default_rng(9)
        ds = random_dataset(rng)
        vc = VarianceComponents(D=0.5 * np.eye(2), sigma2=0.7)
        ml = profile_loglik(ds, vc, "ML")
        reml = profile_loglik(ds, vc, "REML")
        h = np.zeros((ds.p, ds.p))
        for x, z in zip(ds.X, ds.Z):
            vi = z @ vc.D @ z.T + vc.sigma2 * np.eye(z.shape[0])
            h += x.T @ np.linalg.solve(vi, x)
        offset = -0.5 * np.linalg.slogdet(h)[1] + 0.5 * ds.p * np.log(2 * np.pi)
        assert reml == pytest.approx(ml + offset, rel=1e-10)


class TestThetaPacking:
    def test_round_trip(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(3, 3))
        d = a @ a.T + 0.5 * np.eye(3)
        theta = components_to_theta(d, 0.8)
        c, s2 = theta_to_components(theta, 3)
        assert np.allclose(c @ c.T, d, rtol=1e-12)
        assert s2 == pytest.approx(0.8, rel=1e-12)


class TestFitLmm:
    @pytest.mark.parametrize("reml", [False, True])
    def test_random_intercept_matches_brute_force(self, reml):
        """k=1 lets the dense brute-force search use the same model space."""
        rng = np.random.default_rng(42)
        ds = oneway_dataset(rng, n=12, n_i=5)
        fit = fit_lmm(ds, "REML" if reml else "ML")
        _, _, oracle_ll = dense_ml_optimum(ds.y, ds.X, 1, ds.Z, reml)
        assert fit.loglik >= oracle_ll - 1e-7
        assert fit.loglik == pytest.approx(oracle_ll, abs=1e-5)
        assert fit.converged
        assert fit.score_gap <= 1e-6

    def test_reml_equals_anova_on_balanced_oneway(self):
        """Closed-form check behind the REML route: on balanced one-way data
        REML must reproduce the ANOVA estimators."""
        rng = np.random.default_rng(7)
        for _ in range(5):
            ds = oneway_dataset(rng, n=25, n_i=6, s2b=1.2, s2e=0.5)
            mu, s2b, s2e = oneway_anova_reml(ds.y)
            if s2b < 0.05:  # keep to interior optima
                continue
            fit = fit_lmm(ds, "REML")
            assert fit.beta[0] == pytest.approx(mu, rel=1e-6)
            assert fit.vc.sigma2 == pytest.approx(s2e, rel=1e-4)
            assert fit.vc.D[0, 0] == pytest.approx(s2b, rel=1e-4)

    @pytest.mark.parametrize("reml", [False, True])
    def test_is_local_maximum(self, reml):
        rng = np.random.default_rng(321)
        ds = random_dataset(rng, n=10, n_i=6)
        method = "REML" if reml else "ML"
        fit = fit_lmm(ds, method)
        base = profile_loglik(ds, fit.vc, method)
        assert base == pytest.approx(fit.loglik, rel=1e-10)
        theta_hat = fit.theta
        stats = SufficientStats.from_dataset(ds)
        for _ in range(8):
            delta = rng.normal(size=theta_hat.size)
            delta *= 1e-3 / np.linalg.norm(delta)
            worse = -_negloglik(theta_hat + delta, stats, reml)
            assert worse <= base + 1e-7

    def test_fitted_loglik_matches_dense_oracle_at_estimate(self):
        rng = np.random.default_rng(15)
        ds = random_dataset(rng, n=9, n_i=5)
        fit = fit_lmm(ds, "REML")
        expected = dense_loglik(ds.y, ds.X, ds.Z, fit.vc.D, fit.vc.sigma2, True)
        assert fit.loglik == pytest.approx(expected, rel=1e-10)

    def test_d_hat_is_psd_and_blups_match_oracle(self):
        rng = np.random.default_rng(88)
        ds = random_dataset(rng, n=10)
        fit = fit_lmm(ds, "REML")
        w = np.linalg.eigvalsh(fit.vc.D)
        assert w[0] >= -1e-10 * max(np.trace(fit.vc.D), 1.0)
        expected = dense_blup(ds.y, ds.X, ds.Z, fit.vc.D, fit.vc.sigma2, fit.beta)
        for got, want in zip(fit.blups, expected):
            assert np.allclose(got, want, atol=1e-9)
        for got, want in zip(blup(ds, fit), fit.blups):
            assert np.allclose(got, want, atol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        ds = random_dataset(rng)
        a = fit_lmm(ds, "REML")
        b = fit_lmm(ds, "REML")
        assert np.array_equal(a.beta, b.beta)
        assert np.array_equal(a.vc.D, b.vc.D)
        assert a.vc.sigma2 == b.vc.sigma2
        assert a.loglik == b.loglik

    def test_warm_start_reaches_same_optimum_faster(self):
        rng = np.random.default_rng(55)
        ds = random_dataset(rng, n=12)
        cold = fit_lmm(ds, "REML")
        warm = fit_lmm(
            ds,
            "REML",
            FitOptions(x0=cold.theta, use_simplex=False, hess_inv0=cold.hess_inv),
        )
        assert warm.loglik == pytest.approx(cold.loglik, abs=1e-8)
        assert np.allclose(warm.beta, cold.beta, atol=1e-6)
        assert warm.n_iter < cold.n_iter

    def test_iteration_budget_enforced(self):
        rng = np.random.default_rng(12)
        ds = random_dataset(rng)
        with pytest.raises(NoConvergence):
            fit_lmm(ds, "REML", FitOptions(max_iter=1, gtol=1e-30))

    def test_rejects_unknown_method(self):
        rng = np.random.default_rng(1)
        ds = random_dataset(rng, n=5)
        with pytest.raises(ValueError, match="method"):
            fit_lmm(ds, "PQL")

    def test_replace_outcome_consistent_with_rebuild(self):
        rng = np.random.default_rng(64)
        ds = random_dataset(rng, n=6, n_i=4)
        stats = SufficientStats.from_dataset(ds)
        y_new = [np.asarray(v) + rng.normal(size=v.size) for v in ds.y]
        swapped = stats.replace_outcome(ds, y_new)
        rebuilt = SufficientStats.from_dataset(ds.with_outcome(y_new))
        assert np.allclose(swapped.szy, rebuilt.szy)
        assert np.allclose(swapped.sxy, rebuilt.sxy)
        assert swapped.syy == pytest.approx(rebuilt.syy)
        assert np.array_equal(swapped.szz, rebuilt.szz)


class TestBlupClosedForm:
    def test_oneway_shrinkage(self):
        """Random-intercept BLUPs shrink cluster mean deviations by
        m*s2b / (s2e + m*s2b)."""
        rng = np.random.default_rng(23)
        ds = oneway_dataset(rng, n=18, n_i=7)
        fit = fit_lmm(ds, "REML")
        m = 7
        s2b = fit.vc.D[0, 0]
        lam = fit.vc.sigma2 + m * s2b
        for yi, bi in zip(ds.y, fit.blups):
            expected = (m * s2b / lam) * (yi.mean() - fit.beta[0])
            assert bi[0] == pytest.approx(expected, abs=1e-8)


class TestFitManyOutcomes:
    """The lockstep refitter against the one-at-a-time path."""

    def _perturbed_outcomes(self, rng, ds, count, scale=0.3):
        stacked = np.concatenate(ds.y)
        return stacked[None, :] + scale * rng.normal(size=(count, ds.N))

    def test_matches_sequential_warm_fits(self):
        from lmmgof.estimation import fit_many_outcomes

        rng = np.random.default_rng(30)
        ds = random_dataset(rng, n=12, n_i=5)
        fit = fit_lmm(ds, "REML")
        outcomes = self._perturbed_outcomes(rng, ds, 6)
        thetas, converged, iters = fit_many_outcomes(
            ds, outcomes, "REML", x0=fit.theta
        )
        assert converged.all()
        sizes = np.cumsum(ds.n_i)[:-1]
        for row in range(6):
            y_m = np.split(outcomes[row], sizes)
            ds_m = ds.with_outcome(y_m)
            seq = fit_lmm(
                ds_m,
                "REML",
                FitOptions(x0=fit.theta, use_simplex=False),
            )
            # raw parameters can wander along collapsed-variance
            # directions where the surface is flat; the estimated
            # components and the attained objective are the real
            # fixed points
            c_lock, s2_lock = theta_to_components(thetas[row], ds.k)
            assert np.allclose(
                c_lock @ c_lock.T, seq.vc.D, atol=1e-6
            ), row
            assert np.isclose(s2_lock, seq.vc.sigma2, rtol=1e-6), row
            stats_m = SufficientStats.from_dataset(ds_m)
            gap = _negloglik(thetas[row], stats_m, True) - _negloglik(
                seq.theta, stats_m, True
            )
            assert abs(gap) < 1e-8, row

    def test_chunking_does_not_change_results(self):
        from lmmgof.estimation import fit_many_outcomes

        rng = np.random.default_rng(31)
        ds = random_dataset(rng, n=10, n_i=4)
        fit = fit_lmm(ds, "REML")
        outcomes = self._perturbed_outcomes(rng, ds, 9)
        whole, conv_w, _ = fit_many_outcomes(ds, outcomes, "REML", x0=fit.theta)
        first, conv_a, _ = fit_many_outcomes(ds, outcomes[:4], "REML", x0=fit.theta)
        second, conv_b, _ = fit_many_outcomes(ds, outcomes[4:], "REML", x0=fit.theta)
        assert np.array_equal(whole, np.vstack([first, second]))
        assert np.array_equal(conv_w, np.concatenate([conv_a, conv_b]))

    def test_warm_start_at_optimum_is_a_fixed_point(self):
        from lmmgof.estimation import fit_many_outcomes

        rng = np.random.default_rng(32)
        ds = random_dataset(rng, n=10, n_i=5)
        fit = fit_lmm(ds, "REML")
        stacked = np.concatenate(ds.y)[None, :]
        thetas, converged, iters = fit_many_outcomes(
            ds, stacked, "REML", x0=fit.theta
        )
        assert converged[0]
        # the gradient criterion already holds, so no step is taken
        assert np.array_equal(thetas[0], fit.theta)
        assert iters[0] == 0

    def test_cold_start_and_ml_method(self):
        from lmmgof.estimation import fit_many_outcomes

        rng = np.random.default_rng(33)
        ds = random_dataset(rng, n=10, n_i=5, k=1)
        outcomes = self._perturbed_outcomes(rng, ds, 3)
        thetas, converged, _ = fit_many_outcomes(ds, outcomes, "ML")
        assert converged.all()
        sizes = np.cumsum(ds.n_i)[:-1]
        seq = fit_lmm(
            ds.with_outcome(np.split(outcomes[1], sizes)), "ML"
        )
        # cold lockstep skips the simplex stage yet must find the same
        # optimum on this well-behaved surface
        obj_gap = abs(
            _negloglik(thetas[1], SufficientStats.from_dataset(ds), False)
            - _negloglik(seq.theta, SufficientStats.from_dataset(ds), False)
        )
        assert np.allclose(thetas[1], seq.theta, atol=1e-4) or obj_gap < 1e-8

    def test_three_dimensional_random_effects_path(self):
        from lmmgof.estimation import fit_many_outcomes

        rng = np.random.default_rng(34)
        ds = random_dataset(rng, n=12, n_i=7, p=4, k=3)
        fit = fit_lmm(ds, "REML")
        outcomes = self._perturbed_outcomes(rng, ds, 4)
        thetas, converged, _ = fit_many_outcomes(ds, outcomes, "REML", x0=fit.theta)
        assert converged.all()
        sizes = np.cumsum(ds.n_i)[:-1]
        seq = fit_lmm(
            ds.with_outcome(np.split(outcomes[2], sizes)),
            "REML",
            FitOptions(x0=fit.theta, use_simplex=False),
        )
        assert np.allclose(thetas[2], seq.theta, atol=1e-5)

    def test_rejects_wrong_width(self):
        from lmmgof.estimation import fit_many_outcomes

        rng = np.random.default_rng(35)
        ds = random_dataset(rng, n=4, n_i=3)
        with pytest.raises(ValueError, match="dataset has"):
            fit_many_outcomes(ds, np.zeros((2, ds.N + 1)))
