"""Candidate grids and BIC-based model selection."""

import math

import numpy as np
import pytest

from zimix.exceptions import DataError
from zimix.model import Dataset, MediatorFamily, ModelConfig
from zimix.selection import candidate_grid, select

from .test_em import simulate_dataset
from .test_families import simple_theta

Z = MediatorFamily.ZILONM
P = MediatorFamily.ZIPM
NB = MediatorFamily.ZINBM


def integer_dataset(n=60, seed=0):
    rng = np.random.default_rng(seed)
    m = rng.poisson(4.0, n).astype(float)
    m[: n // 5] = 0.0
    return Dataset.from_arrays(rng.normal(size=n), m, rng.normal(size=n))


def continuous_dataset(n=60, seed=0):
    rng = np.random.default_rng(seed)
    m = np.exp(rng.normal(size=n))
    m[: n // 5] = 0.0
    return Dataset.from_arrays(rng.normal(size=n), m, rng.normal(size=n))


class TestCandidateGrid:
    def test_auto_with_integer_data_spans_all_families(self):
        grid = candidate_grid(integer_dataset(), ModelConfig(k_range=(1, 3)))
        assert len(grid) == 9
        assert grid[0] == (Z, 1)
        assert (NB, 3) in grid

    def test_fixed_family_spans_k_range_only(self):
        grid = candidate_grid(continuous_dataset(),
                              ModelConfig(family=Z, k_range=(1, 3)))
        assert grid == [(Z, 1), (Z, 2), (Z, 3)]

    def test_continuous_data_excludes_count_families(self):
        grid = candidate_grid(continuous_dataset(), ModelConfig(k_range=(1, 3)))
        assert {fam for fam, _ in grid} == {Z}

    def test_count_family_on_continuous_data_rejected(self):
        with pytest.raises(DataError):
            candidate_grid(continuous_dataset(), ModelConfig(family=P))

    def test_single_candidate(self):
        grid = candidate_grid(continuous_dataset(),
                              ModelConfig(family=Z, k_range=(2, 2)))
        assert grid == [(Z, 2)]


class TestSelect:
    @pytest.fixture(scope="class")
    def selection_result(self):
        truth = simple_theta(Z, k=1, intercepts=(0.6,), zero_intercept=-1.2,
                             log_scale_sd=0.6, rate=1.2,
                             beta={"b0": 0.4, "b1": 0.3, "b2": 1.5, "b3": 0.6,
                                   "b4": 0.5, "sd": 1.0})
        ds = simulate_dataset(Z, truth, 300, seed=23)
        cfg = ModelConfig(family=Z, k_range=(1, 2), n_starts=1,
                          loglik_rel_tol=1e-7, seed=9)
        best, table = select(ds, cfg)
        return ds, cfg, best, table

    def test_full_table_returned(self, selection_result):
        _, _, best, table = selection_result
        assert [row.k for row in table] == [1, 2]
        assert all(row.family is Z for row in table)

    def test_bic_recomputes_from_parts(self, selection_result):
        ds, _, best, table = selection_result
        for row in table:
            assert row.bic == pytest.approx(
                -2 * row.loglik + row.n_params * math.log(ds.n), abs=1e-9)
            assert row.aic == pytest.approx(-2 * row.loglik + 2 * row.n_params, abs=1e-9)

    def test_single_component_truth_selected(self, selection_result):
        _, _, best, table = selection_result
        eligible = [r for r in table if r.converged]
        assert best.bic == min(r.bic for r in eligible if not set(r.degenerate_flags)
                               & {"mix_weight_small", "component_collision",
                                  "resid_sd_bound", "log_scale_sd_bound"})
        assert best.k == 1

    def test_selection_deterministic(self, selection_result):
        ds, cfg, best, _ = selection_result
        best2, _ = select(ds, cfg)
        assert best2.k == best.k
        assert best2.loglik == best.loglik

    def test_winner_carries_covariance(self, selection_result):
        _, _, best, _ = selection_result
        assert np.all(np.isfinite(best.vcov))

    def test_single_candidate_grid_returns_it(self):
        truth = simple_theta(Z, k=1, intercepts=(0.6,), zero_intercept=-1.2,
                             log_scale_sd=0.6, rate=1.2,
                             beta={"b2": 1.0, "sd": 1.0})
        ds = simulate_dataset(Z, truth, 150, seed=24)
        cfg = ModelConfig(family=Z, k_range=(1, 1), n_starts=1, seed=3)
        best, table = select(ds, cfg)
        assert len(table) == 1 and best.k == 1
