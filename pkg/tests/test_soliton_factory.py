import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from todalab.errors import DerivativeMismatchError
from todalab.lattice_core import LatticeGrid
from todalab.soliton_factory import (
    SolitonParams,
    cauchy_logdet,
    check_derivative,
    cosh_phase,
    default_grid,
    det_tau,
    determinant_phase,
    exact_residual,
    finite_difference_derivative,
    m_soliton,
    m_soliton_bonds,
    one_soliton,
    parameter_name,
    parse_parameter,
    phase_shifts,
    phase_shifts_cauchy,
    resolution_residual,
    resolved_profile_factor,
    soliton_derivatives,
    tangent_basis,
    time_derivative,
)

TWO = SolitonParams((0.5, 1.0), (0.3, -0.2))
GRID = LatticeGrid(-40, 40)


def mp_positions(params, t, sites, dps=40):
    """Q_n = log d_n - log d_{n+1} - 2 sum kappa from det(I + C) in extended precision."""
    mp.mp.dps = dps
    k = [mp.mpf(x) for x in params.kappas]
    g = [mp.mpf(x) for x in params.gammas]

    def logdet(n):
        xi = [mp.exp(-(kj * n - mp.sinh(kj) * t + gj)) for kj, gj in zip(k, g)]
        M = mp.matrix(len(k), len(k))
        for i in range(len(k)):
            for j in range(len(k)):
                M[i, j] = (1 if i == j else 0) + xi[i] * xi[j] / (1 - mp.exp(-(k[i] + k[j])))
        return mp.log(mp.det(M))

    out = [logdet(n) - logdet(n + 1) - 2 * sum(k) for n in sites]
    return np.array([float(x) for x in out])


def test_one_soliton_extended_precision_value():
    st0 = one_soliton(1.0, 0.0, 0.0, GRID)
    mp.mp.dps = 30
    x0 = mp.mpf(0)
    ref = mp.log(mp.cosh(x0)) - mp.log(mp.cosh(x0 + 1)) - 1
    assert st0.Q[GRID.index(0)] == pytest.approx(float(ref), abs=1e-14)
    assert float(ref) == pytest.approx(-1.433781, abs=1e-6)


def test_m_soliton_matches_extended_precision_oracle():
    sites = np.arange(-40, 41, 8)
    for t in (-5.0, 0.0, 3.0):
        ref = mp_positions(TWO, t, sites)
        Q = m_soliton(TWO, t, GRID).Q[sites - GRID.n_min]
        np.testing.assert_allclose(Q, ref, atol=1e-12)


def test_single_soliton_equals_cosh_form():
    for kap, gam, t in ((0.8, 0.0, 0.0), (1.3, -0.4, 2.5), (0.3, 1.1, -7.0)):
        p = SolitonParams((kap,), (gam,))
        a = m_soliton(p, t, GRID)
        b = one_soliton(kap, cosh_phase(kap, gam), t, GRID)
        np.testing.assert_allclose(a.Q, b.Q, atol=1e-12)
        np.testing.assert_allclose(a.P, b.P, atol=1e-12)
    assert determinant_phase(0.8, cosh_phase(0.8, 0.25)) == pytest.approx(0.25)


def test_rest_and_limits():
    rest = m_soliton(SolitonParams.rest(), 0.0, GRID)
    assert np.all(rest.Q == 0) and np.all(rest.P == 0)
    two = m_soliton(TWO, 0.0, LatticeGrid(-150, 150))
    assert two.Q[0] == pytest.approx(0.0, abs=1e-12)
    assert two.Q[-1] == pytest.approx(-3.0, abs=1e-12)
    assert two.grid.right_value == TWO.total_jump == -3.0


def test_jacobi_route_agrees_with_minors():
    three = SolitonParams((0.4, 0.9, 1.5), (0.2, -0.5, 1.0))
    n = np.arange(-30, 31)
    for t in (-4.0, 0.0, 6.0):
        a = det_tau(three, t, n, method="minors")
        b = det_tau(three, t, n, method="jacobi")
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
    ta = tangent_basis(three, 1.0, GRID, method="minors")
    tb = tangent_basis(three, 1.0, GRID, method="jacobi")
    for a, b in zip(ta, tb):
        np.testing.assert_allclose(a.q, b.q, atol=1e-9)
        np.testing.assert_allclose(a.p, b.p, atol=1e-9)
        np.testing.assert_allclose(a.r, b.r, atol=1e-9)


def test_exact_solution_residual():
    for params in (TWO, SolitonParams((0.3, 0.7, 1.2), (0.0, 1.0, -1.0))):
        assert exact_residual(params, 2.0, LatticeGrid(-60, 60)) <= 1e-12


@pytest.mark.parametrize("which", ["gamma_1", "kappa_1", "gamma_2", "kappa_2"])
def test_analytic_derivatives_match_finite_differences(which):
    assert check_derivative(TWO, 1.0, GRID, which) <= 1e-6


def test_derivative_mismatch_is_reported():
    # a deliberately wrong oracle: the gamma_1 field compared against kappa_1
    a = soliton_derivatives(TWO, 0.0, GRID, "gamma_1")
    b = finite_difference_derivative(TWO, 0.0, GRID, "kappa_1")
    assert np.abs(a.q - b.q).max() > 1e-2
    with pytest.raises(DerivativeMismatchError):
        check_derivative(TWO, 0.0, GRID, "kappa_1", rtol=1e-30)


def test_time_derivative_matches_finite_differences():
    h = 1e-5
    ut = time_derivative(TWO, 0.7, GRID)
    qp, qm = m_soliton(TWO, 0.7 + h, GRID), m_soliton(TWO, 0.7 - h, GRID)
    np.testing.assert_allclose(ut.q, (qp.Q - qm.Q) / (2 * h), atol=1e-8)
    np.testing.assert_allclose(ut.p, (qp.P - qm.P) / (2 * h), atol=1e-8)


def test_bonds_keep_tail_precision():
    hs = m_soliton_bonds(TWO, 0.0, LatticeGrid(-40, 120))
    # far right the bonds are exponentially small but still resolved
    tail = hs.R[-5:]
    assert np.all(tail != 0) and np.all(np.abs(tail) < 1e-40)


def test_parameter_names():
    assert parse_parameter("gamma_2", 2) == 2
    assert parse_parameter(("kappa", 1), 2) == 1
    assert parameter_name(3) == "kappa_2"
    with pytest.raises(ValueError):
        parse_parameter("kappa_3", 2)
    with pytest.raises(ValueError):
        parse_parameter("delta_1", 2)


def test_invalid_parameters_rejected():
    with pytest.raises(ValueError, match="positive"):
        SolitonParams((0.5, -1.0), (0.0, 0.0))
    with pytest.raises(ValueError):
        SolitonParams((0.5,), (0.0, 1.0))
    with pytest.raises(ValueError):
        one_soliton(0.0, 0.0, 0.0, GRID)


@settings(max_examples=15, deadline=None)
@given(st.permutations([0, 1, 2]))
def test_profile_invariant_under_relabelling(perm):
    k = np.array([0.4, 0.9, 1.5])
    g = np.array([0.2, -0.5, 1.0])
    a = m_soliton(SolitonParams(tuple(k), tuple(g)), 1.0, GRID)
    b = m_soliton(SolitonParams(tuple(k[perm]), tuple(g[perm])), 1.0, GRID)
    np.testing.assert_array_equal(a.Q, b.Q)


@settings(max_examples=20, deadline=None)
@given(
    st.lists(st.floats(0.2, 2.0), min_size=1, max_size=3, unique=True),
    st.floats(-2.0, 2.0),
    st.floats(-5.0, 5.0),
)
def test_random_solitons_solve_the_lattice(kappas, gamma, t):
    if len(kappas) > 1 and np.min(np.diff(np.sort(kappas))) < 1e-2:
        return
    params = SolitonParams(tuple(kappas), tuple(gamma + 0.3 * i for i in range(len(kappas))))
    assert exact_residual(params, t, default_grid(params, t, margin=40)) <= 1e-10


def test_phase_shift_fixtures():
    sh = phase_shifts(SolitonParams((0.5, 1.0), (0.0, 0.0)))
    np.testing.assert_allclose(sh.zeta_plus, [0.9509321, -0.07270673], atol=1e-7)
    np.testing.assert_allclose(sh.zeta_minus, [-0.22933757, 1.10756294], atol=1e-7)
    one = phase_shifts(SolitonParams((1.0,), (0.0,)))
    assert one.zeta_plus[0] == pytest.approx(-0.072707, abs=1e-6)
    assert one.zeta_plus[0] == pytest.approx(cosh_phase(1.0, 0.0))


def test_phase_shifts_cauchy_route_agrees():
    params = SolitonParams((0.3, 0.8, 1.1, 1.9), (0.0,) * 4)
    a, b = phase_shifts(params), phase_shifts_cauchy(params)
    np.testing.assert_allclose(a.zeta_plus, b.zeta_plus, atol=1e-12)
    np.testing.assert_allclose(a.zeta_minus, b.zeta_minus, atol=1e-12)
    k = np.array(params.kappas)
    alpha = -1.0 / np.expm1(-(k[:, None] + k[None, :]))
    assert cauchy_logdet(k) == pytest.approx(np.linalg.slogdet(alpha)[1], rel=1e-12)


def test_resolution_residual_decays():
    params = SolitonParams((0.5, 1.0), (0.0, 0.0))
    vals = [resolution_residual(params, t, default_grid(params, t)).residual for t in (10.0, 20.0, 40.0)]
    assert vals[0] > vals[1] > vals[2]
    single = SolitonParams((0.8,), (0.2,))
    assert resolution_residual(single, 5.0, GRID).residual <= 1e-12


def test_profile_factor_is_resolved():
    assert resolved_profile_factor() == 1
