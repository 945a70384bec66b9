"""EM engine: E-step posteriors, M-step ascent, fit driver, information."""

import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar
from scipy.stats import norm, poisson

from zimix import em
from zimix import families as fam
from zimix import likelihood as lik
from zimix.model import (
    Dataset,
    MediatorFamily,
    ModelConfig,
    ObservedRecord,
    ParameterSpace,
    free_vector,
)

from .test_families import simple_theta
from .test_model import make_theta

Z = MediatorFamily.ZILONM
P = MediatorFamily.ZIPM
NB = MediatorFamily.ZINBM


def simulate_dataset(family, theta, n, seed, bound=20.0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    m_true = fam.sample_true_batch(family, theta, x, None, rng)
    m_obs = fam.observe_batch(m_true, theta.false_zero_rate, bound, rng)
    b = (m_true > 0).astype(float)
    mean = (theta.y_intercept + theta.y_mediator * m_true + theta.y_nonzero * b
            + theta.y_exposure * x + theta.y_exposure_nonzero * x * b
            + theta.y_exposure_mediator * x * m_true)
    y = mean + theta.resid_sd * rng.standard_normal(n)
    return Dataset.from_arrays(y, m_obs, x)


def two_component_truth(family):
    if family is Z:
        return simple_theta(Z, k=2, intercepts=(-1.5, 1.2), weights=(0.4, 0.6),
                            zero_intercept=-1.5, log_scale_sd=0.5, rate=1.5,
                            beta={"b0": 0.5, "b1": 0.2, "b2": 2.0, "b3": 0.8,
                                  "b4": 0.8, "sd": 1.0})
    intercepts = (math.log(4.0), math.log(12.0))
    return simple_theta(family, k=2, intercepts=intercepts, weights=(0.45, 0.55),
                        zero_intercept=-1.6, dispersion=4.0, rate=0.5,
                        beta={"b0": 0.5, "b1": 0.3, "b2": 2.0, "b3": 0.8,
                              "b4": 0.8, "sd": 1.2})


class TestEStep:
    def test_symmetric_components_give_half_half(self):
        theta = simple_theta(Z, k=2, intercepts=(0.7, 0.7), weights=(0.5, 0.5),
                             zero_intercept=-1.0)
        ds = Dataset((ObservedRecord(0.3, 1.4, 0.2), ObservedRecord(-1.0, 0.6, -0.4)))
        tau = em.e_step(ds, theta, Z, ModelConfig())
        np.testing.assert_allclose(tau.tau1, 0.5, atol=1e-12)

    def test_rows_sum_to_one(self):
        for family in (Z, P, NB):
            theta = two_component_truth(family)
            ds = simulate_dataset(family, theta, 200, seed=4)
            tau = em.e_step(ds, theta, family, ModelConfig())
            np.testing.assert_allclose(tau.tau1.sum(axis=1), 1.0, atol=1e-10)
            np.testing.assert_allclose(tau.tau2.sum(axis=1), 1.0, atol=1e-10)
            assert np.all(tau.tau1 >= 0) and np.all(tau.tau2 >= 0)

    def test_huge_rate_forces_true_zero_class(self):
        theta = two_component_truth(Z).with_(false_zero_rate=1e6)
        ds = simulate_dataset(Z, two_component_truth(Z), 150, seed=5)
        tau = em.e_step(ds, theta, Z, ModelConfig())
        np.testing.assert_allclose(tau.tau2[:, 0], 1.0, atol=1e-12)

    def test_zipm_posteriors_match_enumeration(self):
        theta = two_component_truth(P)
        ds = simulate_dataset(P, theta, 10, seed=6)
        cfg = ModelConfig(false_zero_bound=20.0)
        tau = em.e_step(ds, theta, P, cfg)
        lam_of = lambda x: np.exp(theta.comp_intercepts + theta.comp_slopes * x)

        zero_rows = [r for r in ds.records if r.mediator == 0]
        for i, rec in enumerate(zero_rows):
            lam = lam_of(rec.exposure)
            dstar = 1 / (1 + math.exp(-(theta.zero_intercept
                                        + theta.zero_exposure * rec.exposure)))
            delta = dstar + (1 - dstar) * float(theta.mix_weights @ np.exp(-lam))
            mean0 = theta.y_intercept + theta.y_exposure * rec.exposure
            numer = [delta * norm.pdf(rec.outcome, mean0, theta.resid_sd)]
            for k in range(2):
                acc = 0.0
                for m in range(1, 21):
                    mean = (theta.y_intercept + theta.y_mediator * m + theta.y_nonzero
                            + (theta.y_exposure + theta.y_exposure_nonzero) * rec.exposure
                            + theta.y_exposure_mediator * rec.exposure * m)
                    acc += (norm.pdf(rec.outcome, mean, theta.resid_sd)
                            * math.exp(-theta.false_zero_rate ** 2 * m)
                            * poisson.pmf(m, lam[k]) / (1 - math.exp(-lam[k])))
                numer.append((1 - delta) * theta.mix_weights[k] * acc)
            expected = np.array(numer) / sum(numer)
            np.testing.assert_allclose(tau.tau2[i], expected, atol=1e-10)


class TestMStep:
    def test_ascent_contract(self):
        for family in (Z, P):
            truth = two_component_truth(family)
            ds = simulate_dataset(family, truth, 150, seed=7)
            cfg = ModelConfig(false_zero_bound=20.0)
            space = ParameterSpace.for_config(family, 2, 0, cfg)
            start = space.unpack(space.pack(truth) + 0.1)
            tau = em.e_step(ds, start, family, cfg)
            result = em.m_step(ds, tau, start, family, cfg)
            q0 = lik.q_function(ds, start, tau.tau1, tau.tau2, family, cfg)
            q1 = lik.q_function(ds, result, tau.tau1, tau.tau2, family, cfg)
            assert q1 >= q0 - 1e-10

    def test_mix_weight_update_matches_closed_form(self):
        # with every other block held fixed, the optimal weights are the
        # normalized posterior column sums (log-normal family: the zero
        # probability does not involve the weights)
        truth = two_component_truth(Z)
        ds = simulate_dataset(Z, truth, 300, seed=8)
        cfg = ModelConfig()
        tau = em.e_step(ds, truth, Z, cfg)
        space = ParameterSpace.for_config(Z, 2, 0, cfg)
        v0 = space.pack(truth)
        j = space.names.index("mix_alr_0")

        def neg_q(alr):
            v = v0.copy()
            v[j] = alr
            theta = space.unpack(v)
            return -lik.q_function(ds, theta, tau.tau1, tau.tau2, Z, cfg)

        best = minimize_scalar(neg_q, bounds=(-4, 4), method="bounded",
                               options={"xatol": 1e-10})
        col = tau.tau1.sum(axis=0) + tau.tau2[:, 1:].sum(axis=0)
        closed_form = col / col.sum()
        fitted = space.unpack(np.r_[v0[:j], best.x, v0[j + 1:]]).mix_weights
        np.testing.assert_allclose(fitted, closed_form, atol=1e-6)

    def test_no_zero_data_reduces_to_least_squares(self):
        # all observed mediators above the bound: the outcome block is plain
        # Gaussian regression; identified combinations must match lstsq
        rng = np.random.default_rng(9)
        n = 400
        x = rng.standard_normal(n)
        m = np.exp(1.0 + 0.3 * x + 0.4 * rng.standard_normal(n)) + 20.0
        y = 0.4 + 0.25 * m + 1.0 + (0.5 + 0.3) * x + 0.1 * x * m + rng.standard_normal(n)
        ds = Dataset.from_arrays(y, m, x)
        cfg = ModelConfig(false_zero_bound=20.0, n_starts=1)
        model = em.fit(ds, Z, 1, cfg, compute_information=False)
        th = model.theta_hat
        design = np.column_stack([np.ones(n), m, x, x * m])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        assert th.y_intercept + th.y_nonzero == pytest.approx(coef[0], abs=1e-4)
        assert th.y_mediator == pytest.approx(coef[1], abs=1e-5)
        assert th.y_exposure + th.y_exposure_nonzero == pytest.approx(coef[2], abs=1e-4)
        assert th.y_exposure_mediator == pytest.approx(coef[3], abs=1e-5)
        resid = y - design @ coef
        assert th.resid_sd == pytest.approx(math.sqrt(np.mean(resid ** 2)), abs=1e-4)

    def test_lognormal_block_matches_direct_mle(self):
        # same no-zero setup: the mediator block is log-normal regression
        rng = np.random.default_rng(10)
        n = 400
        x = rng.standard_normal(n)
        m = np.exp(1.0 + 0.3 * x + 0.4 * rng.standard_normal(n)) + 20.0
        y = 0.5 + 0.2 * m + rng.standard_normal(n)
        ds = Dataset.from_arrays(y, m, x)
        cfg = ModelConfig(false_zero_bound=20.0, n_starts=1)
        model = em.fit(ds, Z, 1, cfg, compute_information=False)
        design = np.column_stack([np.ones(n), x])
        coef, *_ = np.linalg.lstsq(design, np.log(m), rcond=None)
        resid = np.log(m) - design @ coef
        assert model.theta_hat.comp_intercepts[0] == pytest.approx(coef[0], abs=1e-4)
        assert model.theta_hat.comp_slopes[0] == pytest.approx(coef[1], abs=1e-4)
        assert model.theta_hat.log_scale_sd == pytest.approx(
            math.sqrt(np.mean(resid ** 2)), abs=1e-4)

    def test_poisson_block_matches_direct_mle(self):
        # count data, no observed zeros: the zero-truncation factor of the
        # component mass cancels against the class-prior positivity factor,
        # so the mediator block is standard Poisson regression
        rng = np.random.default_rng(11)
        n = 500
        x = rng.standard_normal(n)
        lam = np.exp(1.6 + 0.25 * x)
        m = rng.poisson(lam).astype(float)
        keep = m >= 2  # strictly above the bound L=1
        m, x = m[keep], x[keep]
        y = 0.3 + 0.2 * m + rng.standard_normal(m.size)
        ds = Dataset.from_arrays(y, m, x)
        cfg = ModelConfig(false_zero_bound=1.0, n_starts=1, loglik_rel_tol=1e-10)
        model = em.fit(ds, P, 1, cfg, compute_information=False)

        from scipy.optimize import minimize

        def neg_ll(par):
            a, b = par
            eta = a + b * x
            return -np.sum(m * eta - np.exp(eta))

        direct = minimize(neg_ll, [1.0, 0.0], method="Nelder-Mead",
                          options={"xatol": 1e-9, "fatol": 1e-11})
        assert model.theta_hat.comp_intercepts[0] == pytest.approx(direct.x[0], abs=1e-4)
        assert model.theta_hat.comp_slopes[0] == pytest.approx(direct.x[1], abs=1e-4)


class TestFit:
    def test_monotone_loglik_paths(self):
        for family in (Z, P, NB):
            truth = two_component_truth(family)
            ds = simulate_dataset(family, truth, 250, seed=13)
            cfg = ModelConfig(n_starts=2, seed=3, loglik_rel_tol=1e-7)
            model, traces = em.fit_detailed(ds, family, 2, cfg, compute_information=False)
            assert model.converged
            for tr in traces:
                diffs = np.diff(tr.loglik_path)
                assert np.all(diffs >= -1e-10)

    def test_fit_is_deterministic(self):
        truth = two_component_truth(Z)
        ds = simulate_dataset(Z, truth, 200, seed=14)
        cfg = ModelConfig(n_starts=2, seed=5, loglik_rel_tol=1e-7)
        a = em.fit(ds, Z, 2, cfg, compute_information=False)
        b = em.fit(ds, Z, 2, cfg, compute_information=False)
        np.testing.assert_array_equal(free_vector(a.theta_hat, Z, 2),
                                      free_vector(b.theta_hat, Z, 2))
        assert a.loglik == b.loglik

    def test_row_permutation_invariance(self):
        truth = two_component_truth(Z)
        ds = simulate_dataset(Z, truth, 200, seed=15)
        perm = np.random.default_rng(0).permutation(ds.n)
        shuffled = Dataset(tuple(ds.records[i] for i in perm))
        cfg = ModelConfig(n_starts=1, seed=5, loglik_rel_tol=1e-8)
        a = em.fit(ds, Z, 2, cfg, compute_information=False)
        b = em.fit(shuffled, Z, 2, cfg, compute_information=False)
        np.testing.assert_allclose(free_vector(a.theta_hat, Z, 2),
                                   free_vector(b.theta_hat, Z, 2), atol=1e-6)
        assert a.loglik == pytest.approx(b.loglik, abs=1e-7)

    def test_overfitted_mixture_merges_or_empties(self):
        # K=1 truth fitted with K=2: components collide or one weight dies
        truth = simple_theta(Z, k=1, intercepts=(0.8,), zero_intercept=-1.2,
                             log_scale_sd=0.6, rate=1.0,
                             beta={"b0": 0.3, "b1": 0.2, "b2": 1.5, "b3": 0.5,
                                   "b4": 0.5, "sd": 1.0})
        ds = simulate_dataset(Z, truth, 400, seed=16)
        cfg = ModelConfig(n_starts=2, seed=1, loglik_rel_tol=1e-7)
        model = em.fit(ds, Z, 2, cfg, compute_information=False)
        th = model.theta_hat
        gap = abs(th.comp_intercepts[1] - th.comp_intercepts[0])
        assert gap < 0.05 or th.mix_weights.min() < 0.05

    def test_bic_aic_identities(self):
        truth = two_component_truth(P)
        ds = simulate_dataset(P, truth, 200, seed=17)
        cfg = ModelConfig(n_starts=1, seed=2)
        model = em.fit(ds, P, 2, cfg, compute_information=False)
        assert model.bic == pytest.approx(-2 * model.loglik
                                          + model.n_params * math.log(ds.n))
        assert model.aic == pytest.approx(-2 * model.loglik + 2 * model.n_params)


class TestObservedInformation:
    def test_gaussian_scale_information(self):
        # zeros-free single-component toy: the information of the log
        # residual SD with n residuals is 2n at the MLE scale
        rng = np.random.default_rng(19)
        n = 300
        x = rng.standard_normal(n)
        m = np.exp(0.5 + 0.3 * rng.standard_normal(n)) + 20.0
        y = 1.0 + 0.2 * m + 0.5 * x + rng.standard_normal(n)
        ds = Dataset.from_arrays(y, m, x)
        cfg = ModelConfig(false_zero_bound=20.0, n_starts=1)
        model = em.fit(ds, Z, 1, cfg, compute_information=False)
        info = em.observed_information(ds, model.theta_hat, Z, cfg)
        space = model.parameter_space
        j = space.names.index("log_resid_sd")
        assert info[j, j] == pytest.approx(2 * n, rel=0.01)

    def test_matches_independent_finite_differences(self):
        truth = two_component_truth(P)
        ds = simulate_dataset(P, truth, 150, seed=20)
        cfg = ModelConfig(n_starts=1, seed=2)
        model = em.fit(ds, P, 2, cfg, compute_information=False)
        space = model.parameter_space
        v0 = space.pack(model.theta_hat)

        def ll(v):
            return lik.observed_loglik(ds, space.unpack(v), P, cfg)

        d = v0.size
        oracle = np.empty((d, d))
        steps = 1e-4 * np.maximum(1.0, np.abs(v0))
        f0 = ll(v0)
        for i in range(d):
            vp, vm = v0.copy(), v0.copy()
            vp[i] += steps[i]
            vm[i] -= steps[i]
            oracle[i, i] = (ll(vp) - 2 * f0 + ll(vm)) / steps[i] ** 2
        for i in range(d):
            for j2 in range(i + 1, d):
                vpp, vpm, vmp, vmm = v0.copy(), v0.copy(), v0.copy(), v0.copy()
                vpp[[i, j2]] += [steps[i], steps[j2]]
                vpm[i] += steps[i]; vpm[j2] -= steps[j2]
                vmp[i] -= steps[i]; vmp[j2] += steps[j2]
                vmm[[i, j2]] -= [steps[i], steps[j2]]
                oracle[i, j2] = oracle[j2, i] = (
                    ll(vpp) - ll(vpm) - ll(vmp) + ll(vmm)
                ) / (4 * steps[i] * steps[j2])
        asym = np.max(np.abs(oracle - oracle.T))
        assert asym < 1e-4 * max(np.max(np.abs(oracle)), 1.0)
        info = em.observed_information(ds, model.theta_hat, P, cfg)
        np.testing.assert_allclose(info, -0.5 * (oracle + oracle.T), atol=1e-8)

    def test_vcov_diagonal_nonnegative_when_converged(self):
        truth = two_component_truth(Z)
        ds = simulate_dataset(Z, truth, 300, seed=21)
        cfg = ModelConfig(n_starts=1, seed=2, loglik_rel_tol=1e-8)
        model = em.fit(ds, Z, 2, cfg)
        assert model.converged
        if "vcov_near_singular" not in model.degenerate_flags:
            assert np.all(np.diag(model.vcov) >= 0)
        np.testing.assert_allclose(model.vcov, model.vcov.T, atol=1e-12)
