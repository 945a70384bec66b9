"""Mediation effects: closed forms, decomposition identities, delta method."""

import math

import numpy as np
import pytest
from scipy.special import logit

from zimix import effects as eff
from zimix import families as fam
from zimix.model import (
    FittedModel,
    MediatorFamily,
    ModelConfig,
    ParameterSpace,
)

from .test_families import simple_theta
from .test_model import make_theta

Z = MediatorFamily.ZILONM
P = MediatorFamily.ZIPM
NB = MediatorFamily.ZINBM
FAMILIES = (Z, P, NB)


def monte_carlo_effects(theta, family, x1, x2, n_draws, seed):
    """Counterfactual oracle: sample potential mediators, average the
    outcome model directly (noise has mean zero).  Returns estimates and
    Monte Carlo standard errors for (NIE1, NIE2, NDE)."""
    rng = np.random.default_rng(seed)
    m1 = fam.sample_true_batch(family, theta, np.full(n_draws, float(x1)), None, rng)
    m2 = fam.sample_true_batch(family, theta, np.full(n_draws, float(x2)), None, rng)
    b1 = (m1 > 0).astype(float)
    b2 = (m2 > 0).astype(float)

    def outcome(x, b, m):
        return (theta.y_intercept + theta.y_mediator * m + theta.y_nonzero * b
                + theta.y_exposure * x + theta.y_exposure_nonzero * x * b
                + theta.y_exposure_mediator * x * m)

    # NIE1: Y(x2, B_x2, M_x2) - Y(x2, B_x2, M_x1)
    d1 = outcome(x2, b2, m2) - outcome(x2, b2, m1)
    # NIE2: Y(x2, B_x2, M_x1) - Y(x2, B_x1, M_x1)
    d2 = outcome(x2, b2, m1) - outcome(x2, b1, m1)
    # NDE: Y(x2, B_x1, M_x1) - Y(x1, B_x1, M_x1)
    d3 = outcome(x2, b1, m1) - outcome(x1, b1, m1)
    out = {}
    for name, d in (("NIE1", d1), ("NIE2", d2), ("NDE", d3)):
        out[name] = (float(d.mean()), float(d.std(ddof=1) / math.sqrt(n_draws)))
    return out


class TestClosedForms:
    def test_no_mediator_path_gives_zero_nie1(self):
        theta = make_theta(Z, rng=np.random.default_rng(1)).with_(
            y_mediator=0.0, y_exposure_mediator=0.0)
        assert eff.nie1(theta, Z, 0.0, 1.0) == 0.0

    def test_no_exposure_change_gives_zero(self):
        theta = make_theta(P, rng=np.random.default_rng(2))
        assert eff.nie1(theta, P, 0.7, 0.7) == pytest.approx(0.0, abs=1e-15)
        assert eff.nde(theta, P, 0.7, 0.7) == 0.0

    def test_nie2_arithmetic(self):
        # unit nonzero effect, zero probability moving 0.5 -> 0.3
        theta = simple_theta(Z, zero_intercept=0.0,
                             zero_exposure=float(logit(0.3)),
                             beta={"b2": 1.0})
        assert eff.nie2(theta, Z, 0.0, 1.0) == pytest.approx(0.2, abs=1e-12)

    def test_nie2_antisymmetric_without_interaction(self):
        theta = make_theta(Z, rng=np.random.default_rng(3)).with_(y_exposure_nonzero=0.0)
        assert eff.nie2(theta, Z, 0.0, 1.0) == pytest.approx(
            -eff.nie2(theta, Z, 1.0, 0.0), abs=1e-14)

    def test_pure_direct_path(self):
        theta = make_theta(NB, rng=np.random.default_rng(4)).with_(
            y_exposure_nonzero=0.0, y_exposure_mediator=0.0)
        expected = theta.y_exposure * 2.5
        assert eff.nde(theta, NB, 0.0, 2.5) == pytest.approx(expected, abs=1e-12)

    def test_nie1_constructed_mean_difference(self):
        # mediator means 0.5 at x1 and 0.75 at x2, unit mediator effect
        theta = simple_theta(
            Z, k=2, intercepts=(0.0, 0.0), slopes=(0.0, math.log(2.0)),
            weights=(0.5, 0.5), zero_intercept=0.0, zero_exposure=0.0,
            log_scale_sd=1e-8, beta={"b1": 1.0})
        assert fam.mediator_mean(Z, theta, 0.0) == pytest.approx(0.5, abs=1e-7)
        assert fam.mediator_mean(Z, theta, 1.0) == pytest.approx(0.75, abs=1e-7)
        assert eff.nie1(theta, Z, 0.0, 1.0) == pytest.approx(0.25, abs=1e-6)


class TestMonteCarloOracle:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_closed_forms_match_counterfactual_simulation(self, family):
        theta = make_theta(family, k=2, rng=np.random.default_rng(29))
        mc = monte_carlo_effects(theta, family, 0.0, 1.0, n_draws=2_000_000, seed=7)
        closed = {
            "NIE1": eff.nie1(theta, family, 0.0, 1.0),
            "NIE2": eff.nie2(theta, family, 0.0, 1.0),
            "NDE": eff.nde(theta, family, 0.0, 1.0),
        }
        for name in closed:
            est, se = mc[name]
            assert closed[name] == pytest.approx(est, abs=max(4 * se, 1e-8)), name


class TestInvariances:
    def test_effects_invariant_to_component_relabeling(self):
        theta = make_theta(Z, k=3, rng=np.random.default_rng(6))
        perm = np.array([2, 0, 1])
        shuffled = theta.with_(
            comp_intercepts=theta.comp_intercepts[perm],
            comp_slopes=theta.comp_slopes[perm],
            mix_weights=theta.mix_weights[perm])
        for f in (eff.nie1, eff.nie2, eff.nde):
            assert f(theta, Z, 0.0, 1.0) == pytest.approx(
                f(shuffled, Z, 0.0, 1.0), abs=1e-13)


def synthetic_fit(theta, family, vcov_scale=1e-2):
    space = ParameterSpace(family, theta.k, theta.n_confounders)
    d = space.size
    cfg = ModelConfig(family=family, k_range=(theta.k, theta.k))
    return FittedModel(
        family=family, k=theta.k, config=cfg, theta_hat=theta,
        loglik=-100.0, n_iter=10, converged=True,
        info_matrix=np.eye(d) / vcov_scale, vcov=np.eye(d) * vcov_scale,
        n_params=d, bic=0.0, aic=0.0)


class TestEffectTable:
    def test_decomposition_identities_exact(self):
        for family in FAMILIES:
            theta = make_theta(family, k=2, rng=np.random.default_rng(8))
            table = eff.effect_table(synthetic_fit(theta, family), 0.0, 1.0)
            assert table.nie.estimate == table.nie1.estimate + table.nie2.estimate
            assert table.te.estimate == table.nie.estimate + table.nde.estimate
            for row in table.as_dict().values():
                assert row.ci_low <= row.estimate <= row.ci_high

    def test_interval_and_p_value_shape(self):
        theta = make_theta(Z, k=2, rng=np.random.default_rng(9))
        table = eff.effect_table(synthetic_fit(theta, Z), 0.0, 1.0)
        row = table.nie
        assert row.ci_low == pytest.approx(row.estimate - 1.96 * row.se)
        assert row.ci_high == pytest.approx(row.estimate + 1.96 * row.se)
        z = abs(row.estimate / row.se)
        assert row.p_value == pytest.approx(math.erfc(z / math.sqrt(2.0)))

    def test_singular_vcov_returns_estimates_without_inference(self):
        theta = make_theta(Z, k=2, rng=np.random.default_rng(10))
        model = synthetic_fit(theta, Z)
        import dataclasses
        model = dataclasses.replace(
            model, vcov=np.full_like(np.asarray(model.vcov), np.nan))
        table = eff.effect_table(model, 0.0, 1.0)
        assert math.isfinite(table.nie.estimate)
        assert math.isnan(table.nie.se)
        assert math.isnan(table.nie.p_value)

    def test_gradient_matches_higher_order_stencil(self):
        # the internal central-difference gradient agrees with a 4th-order
        # stencil pushed through the covariance
        theta = make_theta(Z, k=2, rng=np.random.default_rng(11))
        model = synthetic_fit(theta, Z)
        space = model.parameter_space
        v0 = space.pack(theta)
        table = eff.effect_table(model, 0.0, 1.0)

        def g_of(v):
            th = space.unpack(v)
            return eff.nie1(th, Z, 0, 1) + eff.nie2(th, Z, 0, 1)

        grad = np.empty(v0.size)
        for j in range(v0.size):
            h = 1e-4 * max(1.0, abs(v0[j]))
            vs = [v0.copy() for _ in range(4)]
            vs[0][j] += 2 * h
            vs[1][j] += h
            vs[2][j] -= h
            vs[3][j] -= 2 * h
            grad[j] = (-g_of(vs[0]) + 8 * g_of(vs[1]) - 8 * g_of(vs[2]) + g_of(vs[3])) / (12 * h)
        se_oracle = math.sqrt(grad @ np.asarray(model.vcov) @ grad)
        assert table.nie.se == pytest.approx(se_oracle, rel=1e-4)

    def test_requires_convergence(self):
        import dataclasses
        theta = make_theta(Z, k=2, rng=np.random.default_rng(12))
        model = dataclasses.replace(synthetic_fit(theta, Z), converged=False)
        from zimix.exceptions import FitError
        with pytest.raises(FitError):
            eff.effect_table(model, 0.0, 1.0)

    def test_z_ref_required_with_confounders(self):
        theta = make_theta(Z, k=2, p=2, rng=np.random.default_rng(13))
        model = synthetic_fit(theta, Z)
        from zimix.exceptions import FitError
        with pytest.raises(FitError):
            eff.effect_table(model, 0.0, 1.0)
        table = eff.effect_table(model, 0.0, 1.0, z_ref=np.array([0.5, -0.2]))
        assert math.isfinite(table.te.estimate)
