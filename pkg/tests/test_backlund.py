import numpy as np
import pytest

from todalab.backlund import (
    BTPair,
    add_soliton,
    apply_operator,
    bt_residual,
    fredholm_diagnostics,
    hierarchy_tangents,
    join_params,
    lbt_forward,
    lbt_inverse,
    lbt_residual,
    lower_phase_offset,
    operator_norm_estimate,
    right_anchored,
    semigroup_log,
    solve_c,
    solve_chat,
    split_params,
)
from todalab.dynamics import localized_random_field
from todalab.errors import SolvabilityError
from todalab.lattice_core import LatticeGrid, TangentField, WeightFrame, symplectic_pairing
from todalab.soliton_factory import SolitonParams, default_grid, m_soliton

UPPER = SolitonParams((0.5, 1.0), (0.3, -0.2))
GRID = LatticeGrid(-50, 50)


@pytest.fixture(scope="module")
def pair():
    return BTPair.from_params(UPPER, 0.0, GRID)


def random_decaying(grid, rng, center=0.0, width=4.0):
    return localized_random_field(grid, center, width, rng).q


def test_phase_offset_fixture():
    assert lower_phase_offset(0.5, 1.0) == pytest.approx(0.84013484, abs=1e-8)


def test_split_and_join_are_inverse():
    lower, km, gm = split_params(UPPER)
    assert (km, gm) == (1.0, -0.2)
    back = join_params(lower, km, gm)
    np.testing.assert_allclose(back.xi, UPPER.xi, atol=1e-14)
    with pytest.raises(ValueError, match="exceed"):
        join_params(SolitonParams((1.0,), (0.0,)), 0.5, 0.0)


def test_transformation_residual(pair):
    F1, F2 = bt_residual(pair)
    assert max(np.abs(F1).max(), np.abs(F2).max()) <= 1e-12
    first = add_soliton(SolitonParams.rest(), 0.8, 0.1, 2.0, GRID)
    assert max(np.abs(r).max() for r in bt_residual(first)) <= 1e-12


def test_wrong_lower_phase_breaks_the_relation():
    lower, km, _ = split_params(UPPER)
    wrong = SolitonParams(lower.kappas, tuple(g + 0.5 for g in lower.gammas))
    bad = BTPair.from_states(m_soliton(wrong, 0.0, GRID), m_soliton(UPPER, 0.0, GRID), km)
    assert max(np.abs(r).max() for r in bt_residual(bad)) > 1e-2


def test_operators_on_simple_fields(pair):
    ones = np.ones(GRID.size)
    np.testing.assert_array_equal(apply_operator(pair, "L", ones), pair.alpha - pair.beta)
    C = apply_operator(pair, "C", np.eye(GRID.size))
    Ch = apply_operator(pair, "Chat", np.eye(GRID.size))
    # zero-ghost C on fields vanishing at the right edge is the transpose of truncated Chat
    np.testing.assert_array_equal(C[:, :-1], Ch[:-1, :].T)
    np.testing.assert_allclose(np.diag(C, -1), -pair.beta[1:])
    np.testing.assert_allclose(np.diag(Ch, 1), -pair.beta_plus[:-1])
    with pytest.raises(ValueError):
        apply_operator(pair, "D", ones)


def test_chat_kernel_is_the_phase_mode(pair):
    k = pair.kernel_mode.q
    out = apply_operator(pair, "Chat", k)[:-1]
    assert np.linalg.norm(out) <= 1e-10 * np.linalg.norm(k)
    # the semigroup product gives the same direction independently
    T = np.exp(semigroup_log(pair, anchor=None))
    cos = abs(T @ k) / (np.linalg.norm(T) * np.linalg.norm(k))
    assert cos == pytest.approx(1.0, abs=1e-10)


def test_chat_on_the_speed_mode(pair):
    _, up = hierarchy_tangents(pair, "kappa_2")
    out = apply_operator(pair, "Chat", up.q + 1.0)[:-1]
    np.testing.assert_allclose(out, 2.0 * np.sinh(1.0), atol=1e-10)


def test_solve_chat_recovers_kernel_orthogonal_part(pair):
    rng = np.random.default_rng(0)
    x = random_decaying(GRID, rng)
    q = solve_chat(pair, apply_operator(pair, "Chat", x))
    k = pair.kernel_mode.q
    np.testing.assert_allclose(q, x - (k @ x) / (k @ k) * k, atol=1e-8)
    assert abs(q @ k) <= 1e-10 * np.linalg.norm(k) * np.linalg.norm(q)
    np.testing.assert_array_equal(solve_chat(pair, np.zeros(GRID.size)), 0.0)


def test_solve_c_is_injective_and_checks_solvability(pair):
    rng = np.random.default_rng(1)
    x = random_decaying(GRID, rng)
    x[-1] = 0.0
    np.testing.assert_allclose(solve_c(pair, apply_operator(pair, "C", x)), x, atol=1e-8)
    with pytest.raises(SolvabilityError) as err:
        solve_c(pair, pair.kernel_mode.q)
    assert err.value.pairing is not None
    np.testing.assert_array_equal(solve_c(pair, np.zeros(GRID.size)), 0.0)


def test_fredholm_indices(pair):
    d = fredholm_diagnostics(pair)
    assert d["chat_smallest"][0] < 1e-12 < d["chat_smallest"][1]
    assert d["c_smallest"] > 1e-3


@pytest.mark.parametrize("which", ["gamma_1", "kappa_1", "gamma_2"])
def test_hierarchy_tangents_solve_the_linearization(pair, which):
    lo, up = hierarchy_tangents(pair, which)
    D1, D2 = lbt_residual(pair, lo.q, lo.p, up.q, up.p, free_left=False)
    scale = max(lo.flat_norm(), up.flat_norm())
    # the last site meets the truncated Chat, see the module docstring
    assert np.abs(D1[:-1]).max() <= 1e-9 * scale
    assert np.abs(D2[:-1]).max() <= 1e-9 * scale


def test_forward_solves_the_linearization(pair):
    rng = np.random.default_rng(2)
    u = localized_random_field(GRID, 0.0, 3.0, rng)
    v = lbt_forward(pair, u, shift=False)
    D1, D2 = lbt_residual(pair, right_anchored(u), u.p, v.q, v.p)
    assert max(np.abs(D1).max(), np.abs(D2)[:-1].max()) <= 1e-8 * u.flat_norm()
    zero = lbt_forward(pair, TangentField.zeros(GRID))
    assert zero.flat_norm() == 0.0


def test_forward_output_is_speed_orthogonal_and_round_trips(pair):
    rng = np.random.default_rng(3)
    for _ in range(5):
        u = localized_random_field(GRID, rng.uniform(-5, 5), 3.0, rng)
        v = lbt_forward(pair, u)
        assert abs(symplectic_pairing(v, pair.speed_mode)) <= 1e-10 * v.flat_norm()
        back = lbt_inverse(pair, v)
        np.testing.assert_allclose(back.r[:-1], u.r[:-1], atol=1e-9)
        np.testing.assert_allclose(back.p, u.p, atol=1e-9)


def test_inverse_kills_the_kernel_mode(pair):
    out = lbt_inverse(pair, pair.kernel_mode)
    assert out.flat_norm() <= 1e-10
    assert lbt_inverse(pair, TangentField.zeros(GRID)).flat_norm() == 0.0


def test_inverse_rejects_non_orthogonal_input(pair):
    with pytest.raises(SolvabilityError):
        lbt_inverse(pair, pair.speed_mode)


@pytest.mark.parametrize("which", ["gamma_1", "kappa_1"])
def test_orthogonality_is_transported(pair, which):
    rng = np.random.default_rng(4)
    lo, up = hierarchy_tangents(pair, which)
    for _ in range(3):
        u = localized_random_field(GRID, rng.uniform(-4, 4), 3.0, rng)
        v = lbt_forward(pair, u)
        a, b = symplectic_pairing(u, lo), symplectic_pairing(v, up)
        assert b == pytest.approx(a, rel=1e-8, abs=1e-10)


def test_norm_of_diagonal_operator(pair):
    est = operator_norm_estimate(pair, "L", WeightFrame(0.5, 1.5))
    assert est.value == np.abs(pair.alpha - pair.beta).max()


def test_norms_bounded_on_the_mode_complements():
    frame = WeightFrame(0.5, 1.5)
    full, restricted = [], []
    for t in (0.0, 40.0):
        grid = default_grid(UPPER, t, margin=40)
        p = BTPair.from_params(UPPER, t, grid)
        restricted.append(operator_norm_estimate(p, "B", frame).value)
        full.append(operator_norm_estimate(p, "B", frame, restrict=False).value)
    assert max(restricted) / min(restricted) < 1.5
    # off the complement the phase-mode shift grows with the soliton separation
    assert full[1] / full[0] > 5.0
