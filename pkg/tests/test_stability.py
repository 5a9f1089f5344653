from dataclasses import replace

import numpy as np
import pytest

from todalab.dynamics import localized_random_field, project_Xm
from todalab.errors import IllConditionedError, ModulationError
from todalab.lattice_core import LatticeGrid, symplectic_pairing, weighted_norm
from todalab.soliton_factory import SolitonParams, m_soliton, tangent_basis
from todalab.stability import (
    PerturbedState,
    StabilityConfig,
    collision_params,
    fit_log_rate,
    gram_matrix,
    initial_perturbation,
    kappa_block_prediction,
    modulation_fit,
    residual_split,
    run_stability_experiment,
    summarize,
    xi_dot_estimate,
)

TWO = SolitonParams((0.5, 1.0), (0.0, 0.3))
THREE = SolitonParams((0.4, 0.9, 1.5), (0.0, 1.0, -1.0))
GRID = LatticeGrid(-80, 80)


@pytest.mark.parametrize("params, tol", [(TWO, 1e-8), (THREE, 1e-6)])
def test_kappa_block_matches_asymptotic_prediction(params, tol):
    A = gram_matrix(params, 0.0).A
    np.testing.assert_allclose(A[1::2, 1::2], kappa_block_prediction(params), atol=tol)


@pytest.mark.parametrize("params", [TWO, THREE])
def test_gamma_entries_are_block_diagonal_and_skew(params):
    g = gram_matrix(params, 0.0)
    idx = np.arange(2 * params.m)
    gam = idx % 2 == 0
    involves_gamma = gam[:, None] | gam[None, :]
    assert np.abs(g.A[~g.block_mask() & involves_gamma]).max() <= 1e-10
    assert g.antisymmetry <= 1e-12
    assert g.gamma_diagonal_max <= 1e-12
    assert np.all(np.abs(g.alpha0) > 1e-3)


def test_gram_matrix_is_time_invariant():
    mats = [gram_matrix(TWO, t).A for t in (0.0, 2.0, 5.0)]
    for A in mats[1:]:
        np.testing.assert_allclose(A, mats[0], atol=1e-10)


def test_single_soliton_speed_entry():
    g = gram_matrix(SolitonParams((0.8,), (0.0,)), 0.0, GRID)
    assert g.alpha1[0] == pytest.approx(-4.0 * np.cosh(0.8), rel=1e-10)
    assert g.off_block_max == 0.0


def test_gram_conditioning_guard():
    with pytest.raises(IllConditionedError):
        gram_matrix(TWO, 0.0, max_condition=1.0)
    with pytest.raises(ValueError):
        gram_matrix(SolitonParams.rest(), 0.0)


def test_orthogonal_perturbation_leaves_parameters():
    rng = np.random.default_rng(0)
    w = project_Xm(localized_random_field(GRID, 0.0, 3.0, rng), 0.0, TWO)
    w = w * (1e-3 / w.flat_norm())
    fit = modulation_fit(PerturbedState(TWO, 0.0, w), 0.0, TWO)
    np.testing.assert_allclose(fit.params.xi, TWO.xi, atol=1e-12)
    assert (fit.v - w).flat_norm() <= 1e-12


def test_fit_recovers_shifted_parameters():
    target = SolitonParams.from_xi(TWO.xi + np.array([2e-3, -1e-3, 1e-3, 5e-4]))
    fit = modulation_fit(m_soliton(target, 1.0, GRID), 1.0, TWO)
    np.testing.assert_allclose(fit.params.xi, target.xi, atol=1e-10)
    assert fit.iterations >= 1 and np.abs(fit.pairings).max() <= 1e-12


def test_fit_error_is_second_order_in_a_generic_perturbation():
    # a generic offset shifts xi at first order; the orthogonal
    # decomposition leaves a second-order discrepancy with the linear prediction
    rng = np.random.default_rng(1)
    u = localized_random_field(GRID, 0.0, 3.0, rng)
    u = u * (1.0 / u.flat_norm())
    modes = tangent_basis(TWO, 0.0, GRID)
    A = np.array([[symplectic_pairing(modes[j], modes[i]) for j in range(4)] for i in range(4)])
    b = np.array([symplectic_pairing(u, e) for e in modes])
    lin = np.linalg.solve(A, b)
    errs = []
    for eps in (1e-3, 5e-4):
        fit = modulation_fit(PerturbedState(TWO, 0.0, eps * u), 0.0, TWO)
        errs.append(np.abs(fit.params.xi - TWO.xi - eps * lin).max())
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.2)


def test_fit_rejects_states_outside_the_tube():
    u = localized_random_field(GRID, 0.0, 3.0, np.random.default_rng(2))
    with pytest.raises(ModulationError, match="tube"):
        modulation_fit(PerturbedState(TWO, 0.0, u), 0.0, TWO)


def test_residual_split_is_quadratic():
    cfg = StabilityConfig()
    params, grid, frame = cfg.params(), cfg.grid(), cfg.frame()
    v = initial_perturbation(cfg, params, grid)
    big = residual_split(params, 10.0 * v, params, 0.0, frame)
    small = residual_split(params, 5.0 * v, params, 0.0, frame)
    assert big.norm_R1 / small.norm_R1 == pytest.approx(4.0, rel=1e-2)
    assert big.norm_R2 == 0.0
    assert big.ratio == pytest.approx(small.ratio, rel=1e-3)


def test_collision_params_meet():
    p = collision_params((0.5, 1.0), 30.0)
    cores = p.core_positions(30.0)
    assert cores[0] == pytest.approx(cores[1], abs=1e-12)


def test_initial_perturbation_size_and_shapes():
    cfg = StabilityConfig()
    params, grid, frame = cfg.params(), cfg.grid(), cfg.frame()
    for shape in ("gaussian-bump", "delta-spike", "projected-random"):
        v0 = initial_perturbation(replace(cfg, shape=shape), params, grid)
        assert weighted_norm(v0, frame, 0.0) + v0.flat_norm() == pytest.approx(cfg.delta, rel=1e-12)
        vals = [symplectic_pairing(v0, e) for e in tangent_basis(params, 0.0, grid)]
        assert np.abs(vals).max() <= 1e-14
    with pytest.raises(ValueError, match="shape"):
        initial_perturbation(replace(cfg, shape="square"), params, grid)


@pytest.fixture(scope="module")
def short_record():
    cfg = StabilityConfig(t1=1.0, dt=2e-3, record_dt=0.02, delta=1e-2, keep_fields=True)
    return run_stability_experiment(cfg)


def test_short_run_bookkeeping(short_record):
    s = summarize(short_record, tail=0.5)
    assert not s["truncated"]
    assert s["bookkeeping_error"] <= 1e-10
    assert s["pairing_max"] <= 1e-10
    # the telescoped terms add up to their directly evaluated target
    terms = short_record.energy_terms
    np.testing.assert_allclose(terms[:, :6].sum(axis=1), terms[:, 6], atol=1e-12)


def test_modulation_equation_predicts_xi_dot(short_record):
    est = xi_dot_estimate(short_record)
    assert est["error_full"] <= 1e-2 * est["max_speed"]
    assert est["error_full"] <= est["error_leading"]


def test_xi_dot_needs_fields():
    rec = run_stability_experiment(StabilityConfig(t1=0.2, record_dt=0.1))
    with pytest.raises(ValueError, match="keep_fields"):
        xi_dot_estimate(rec)


def test_fit_log_rate():
    t = np.linspace(0, 10, 11)
    assert fit_log_rate(t, -0.3 * t + 2.0, (0, 10)) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        fit_log_rate(t, t, (0, 1))
