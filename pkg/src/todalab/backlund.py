"""Backlund transformation between consecutive soliton levels and its linearization.

A pair (lower, upper) = ((Q', P'), (Q, P)) is related by

    P  + alpha + beta   = 2 cosh(kappa_m),
    P' + alpha + beta_+ = 2 cosh(kappa_m),

with ``alpha = exp(-(Q' - Q - kappa_m))`` and ``beta = exp(-(Q - Q'_- + kappa_m))``.
The linearization is written with the stencils

    (C x)_n    = alpha_n x_n - beta_n x_{n-1},
    (Chat x)_n = alpha_n x_n - beta_{n+1} x_{n+1},
    L = alpha - beta,  M = alpha - beta_+  (diagonal),

and reads ``p + L q - C q' = 0``, ``p' + Chat q - M q' = 0``.

On a truncated grid ``Chat`` loses its last row (so it keeps a one-dimensional
kernel) and ``C`` acts on sequences vanishing at the right edge (so it stays
injective).  Both solves reduce to the same symmetric tridiagonal system.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space, solveh_banded

from .errors import (
    BacklundValidationError,
    GridMismatchError,
    IllConditionedError,
    SolvabilityError,
)
from .lattice_core import LatticeGrid, LatticeState, TangentField, WeightFrame, symplectic_pairing
from .soliton_factory import SolitonParams, m_soliton, tangent_basis

PAIRING_TOL = 1e-8
SOLVE_RTOL = 1e-8


def lower_phase_offset(kappa_i, kappa_m):
    """Determinant-phase shift of a lower-level soliton across one transformation.

    The (m-1)-soliton paired with an m-soliton has phases
    ``gamma'_i = gamma_i + lower_phase_offset(kappa_i, kappa_m)``.
    """
    kappa_i = np.asarray(kappa_i, dtype=float)
    return (
        0.5 * np.log(np.abs(np.sinh((kappa_i + kappa_m) / 2.0) / np.sinh((kappa_m - kappa_i) / 2.0)))
        + kappa_i / 2.0
    )


def _offset_partials(kappa_i: float, kappa_m: float) -> tuple[float, float]:
    """Partial derivatives of :func:`lower_phase_offset` in ``kappa_i`` and ``kappa_m``."""
    cs = 1.0 / np.tanh((kappa_i + kappa_m) / 2.0)
    cd = 1.0 / np.tanh((kappa_m - kappa_i) / 2.0)
    return 0.25 * (cs + cd) + 0.5, 0.25 * (cs - cd)


def split_params(upper: SolitonParams) -> tuple[SolitonParams, float, float]:
    """Remove the fastest soliton: return (lower params, kappa_m, gamma_m)."""
    if upper.m == 0:
        raise ValueError("cannot remove a soliton from the rest state")
    k, g = upper.k, upper.g
    km, gm = float(k[-1]), float(g[-1])
    if upper.m > 1 and k[-2] >= km:
        raise ValueError("the removed wavenumber must be strictly the largest")
    lower = SolitonParams(tuple(k[:-1]), tuple(g[:-1] + lower_phase_offset(k[:-1], km)))
    return lower, km, gm


def join_params(lower: SolitonParams, kappa_m: float, gamma_m: float) -> SolitonParams:
    if kappa_m <= 0:
        raise ValueError("kappa must be positive")
    if lower.m and kappa_m <= max(lower.kappas):
        raise ValueError(
            "the added wavenumber must exceed every lower wavenumber "
            f"(got {kappa_m} with lower {lower.kappas})"
        )
    k = lower.k
    g = lower.g - lower_phase_offset(k, kappa_m)
    return SolitonParams(tuple(k) + (kappa_m,), tuple(g) + (gamma_m,))


@dataclass(frozen=True)
class BTPair:
    lower: LatticeState
    upper: LatticeState
    kappa_m: float
    alpha: np.ndarray
    beta: np.ndarray
    beta_plus: np.ndarray
    lower_params: SolitonParams | None = None
    upper_params: SolitonParams | None = None
    t: float | None = None
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def grid(self) -> LatticeGrid:
        return self.upper.grid

    @classmethod
    def from_states(cls, lower: LatticeState, upper: LatticeState, kappa_m: float) -> "BTPair":
        """Pair built from two arbitrary states, ghosts supplying the missing neighbours."""
        if not lower.grid.same_sites(upper.grid):
            raise GridMismatchError("lower and upper states live on different grids")
        Qp, Q = lower.Q, upper.Q
        Qp_minus = np.concatenate([[lower.grid.left_value], Qp[:-1]])
        Q_plus = np.concatenate([Q[1:], [upper.grid.right_value]])
        alpha = np.exp(-(Qp - Q - kappa_m))
        beta = np.exp(-(Q - Qp_minus + kappa_m))
        beta_plus = np.exp(-(Q_plus - Qp + kappa_m))
        return cls(lower, upper, float(kappa_m), alpha, beta, beta_plus)

    @classmethod
    def from_params(cls, upper_params: SolitonParams, t: float, grid: LatticeGrid) -> "BTPair":
        """Exact pair (upper m-soliton, its (m-1)-soliton) with closed-form neighbours."""
        lower_params, km, _ = split_params(upper_params)
        ext = LatticeGrid(grid.n_min - 1, grid.n_max + 1)
        lo = m_soliton(lower_params, t, ext)
        up = m_soliton(upper_params, t, ext)
        Qp, Q = lo.Q, up.Q
        alpha = np.exp(-(Qp[1:-1] - Q[1:-1] - km))
        beta_all = np.exp(-(Q[1:] - Qp[:-1] + km))  # sites n_min .. n_max+1
        lower = LatticeState(grid.with_limits(0.0, lower_params.total_jump), lo.Q[1:-1], lo.P[1:-1])
        upper = LatticeState(grid.with_limits(0.0, upper_params.total_jump), up.Q[1:-1], up.P[1:-1])
        return cls(
            lower, upper, km, alpha, beta_all[:-1], beta_all[1:], lower_params, upper_params, float(t)
        )

    # modes of the upper family used by the isomorphism
    def _basis(self, which: str) -> list[TangentField]:
        if self.upper_params is None:
            raise ValueError("this pair carries no soliton parameters")
        key = "basis_" + which
        if key not in self._cache:
            params = self.upper_params if which == "upper" else self.lower_params
            self._cache[key] = tangent_basis(params, self.t, self.grid)
        return self._cache[key]

    @property
    def kernel_mode(self) -> TangentField:
        """``d/dgamma_m`` of the upper solution."""
        return self._basis("upper")[-2]

    @property
    def speed_mode(self) -> TangentField:
        """``d/dkappa_m`` of the upper solution at fixed upper phases."""
        return self._basis("upper")[-1]

    @property
    def gram_kernel_speed(self) -> float:
        return symplectic_pairing(self.kernel_mode, self.speed_mode)


def bt_residual(pair: BTPair) -> tuple[np.ndarray, np.ndarray]:
    c2 = 2.0 * np.cosh(pair.kappa_m)
    F1 = pair.upper.P + pair.alpha + pair.beta - c2
    F2 = pair.lower.P + pair.alpha + pair.beta_plus - c2
    return F1, F2


def add_soliton(
    lower_params: SolitonParams,
    kappa_new: float,
    gamma_new: float,
    t: float,
    grid: LatticeGrid,
    tol: float = 1e-6,
) -> BTPair:
    """Pair the given (m-1)-soliton with the m-soliton that adds ``(kappa_new, gamma_new)``.

    ``gamma_new`` is used directly as the determinant phase of the new soliton;
    the lower phases are carried through :func:`lower_phase_offset`.  The result
    is checked against the transformation itself.
    """
    upper = join_params(lower_params, kappa_new, gamma_new)
    pair = BTPair.from_params(upper, t, grid)
    F1, F2 = bt_residual(pair)
    res = max(np.abs(F1).max(), np.abs(F2).max())
    if not res <= tol:
        raise BacklundValidationError(
            f"Backlund residual {res:.3e} exceeds {tol:.1e}", residual=(F1, F2)
        )
    return pair


def remove_soliton(upper_params: SolitonParams, t: float, grid: LatticeGrid) -> BTPair:
    return BTPair.from_params(upper_params, t, grid)


# stencil operators -------------------------------------------------------


def _shift_down(x):
    # x_{n-1}, zero before the first site
    out = np.zeros_like(x)
    out[1:] = x[:-1]
    return out


def _shift_up(x):
    # x_{n+1}, zero past the last site
    out = np.zeros_like(x)
    out[:-1] = x[1:]
    return out


def _col(v, x):
    return v if x.ndim == 1 else v[:, None]


def apply_operator(pair: BTPair, op: str, x: np.ndarray, free_left: bool = False) -> np.ndarray:
    """Apply one of ``'C'``, ``'Chat'``, ``'L'``, ``'M'``.

    Ghosts are zero, except that ``free_left`` lets ``C`` copy the first entry
    into the ghost left of the grid.  That is the right reading for a
    displacement measured from its right limit, which is constant (not zero) far
    to the left.  The zero-ghost ``C`` is the exact transpose of the truncated
    ``Chat``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] != pair.grid.size:
        raise GridMismatchError(f"field length {x.shape[0]} vs grid size {pair.grid.size}")
    a, b, bp = (_col(v, x) for v in (pair.alpha, pair.beta, pair.beta_plus))
    if op == "C":
        out = a * x - b * _shift_down(x)
        if free_left:
            out[0] = out[0] - b[0] * x[0]
        return out
    if op == "Chat":
        return a * x - bp * _shift_up(x)
    if op == "L":
        return (a - b) * x
    if op == "M":
        return (a - bp) * x
    raise ValueError(f"unknown operator {op!r}")


def operator_matrix(pair: BTPair, op: str) -> np.ndarray:
    """Dense matrix of a stencil on the truncated grid."""
    return apply_operator(pair, op, np.eye(pair.grid.size))


def _normal_band(pair: BTPair, free_left: bool = False) -> np.ndarray:
    # B = Chat without its last row; B B^T in upper banded storage.
    # free_left: the same for the free-ended C restricted to vanish at the right
    a, bp = pair.alpha, pair.beta_plus
    if free_left:
        a = a.copy()
        a[0] -= pair.beta[0]
    n = pair.grid.size - 1
    ab = np.zeros((2, n))
    ab[1] = a[:-1] ** 2 + bp[:-1] ** 2
    ab[0, 1:] = -bp[:-2] * a[1:-1]
    return ab


def _B(pair: BTPair, y, free_left: bool = False):
    a, bp = _col(pair.alpha, y), _col(pair.beta_plus, y)
    out = (a * y - bp * _shift_up(y))[:-1]
    if free_left:
        out[0] = out[0] - pair.beta[0] * y[0]
    return out


def _Bt(pair: BTPair, z):
    zz = np.concatenate([z, np.zeros((1,) + z.shape[1:])], axis=0)
    return apply_operator(pair, "C", zz)


def _condition(pair: BTPair) -> float:
    from scipy.linalg import eigvals_banded

    ev = eigvals_banded(_normal_band(pair), lower=False)
    return float(ev.max() / ev.min())


def _kernel_field(pair: BTPair) -> np.ndarray:
    if pair.upper_params is not None:
        return pair.kernel_mode.q
    return np.exp(semigroup_log(pair, anchor=None))


def _norm(x):
    return np.sqrt(np.sum(np.asarray(x) ** 2, axis=0))


def solve_chat(pair: BTPair, y: np.ndarray, rtol: float = SOLVE_RTOL) -> np.ndarray:
    """Kernel-orthogonal solution of ``Chat q = y``.

    Minimum-norm solution of the truncated system, then the component along
    ``d/dgamma_m Q`` is removed.  ``y`` may have several columns.
    """
    y = np.asarray(y, dtype=float)
    z = solveh_banded(_normal_band(pair), y[:-1], lower=False)
    q = _Bt(pair, z)
    k = _kernel_field(pair)
    q = q - np.outer(k, k @ q).reshape(q.shape) / (k @ k)
    res = _norm(apply_operator(pair, "Chat", q) - y)
    scale = np.maximum(_norm(y), 1e-300)
    if np.any(res > rtol * scale) and np.any(res > 1e-300):
        raise IllConditionedError(
            f"Chat solve residual {np.max(res / scale):.3e} (condition {_condition(pair):.3e})",
            condition=_condition(pair),
        )
    return q


def solve_c(
    pair: BTPair,
    y: np.ndarray,
    rtol: float = SOLVE_RTOL,
    tol: float = PAIRING_TOL,
    free_left: bool = False,
) -> np.ndarray:
    """Unique solution of ``C q' = y`` with ``q'`` vanishing at the right edge.

    ``y`` must be orthogonal to ``d/dgamma_m Q``.  ``free_left`` selects the
    free-ended stencil of :func:`apply_operator`.
    """
    y = np.asarray(y, dtype=float)
    k = _kernel_field(pair)
    pair_val = k @ y
    bound = tol * _norm(y) * np.sqrt(k @ k) if np.isfinite(tol) else np.inf
    if np.any(np.abs(pair_val) > bound):
        raise SolvabilityError(
            f"right-hand side pairs with the cokernel: {np.max(np.abs(pair_val)):.3e}",
            pairing=pair_val,
        )
    z = solveh_banded(_normal_band(pair, free_left), _B(pair, y, free_left), lower=False)
    qp = np.concatenate([z, np.zeros((1,) + z.shape[1:])], axis=0)
    res = _norm(apply_operator(pair, "C", qp, free_left) - y)
    scale = np.maximum(_norm(y), 1e-300)
    if np.any(res > rtol * scale) and np.any(res > 1e-300):
        raise IllConditionedError(
            f"C solve residual {np.max(res / scale):.3e} (condition {_condition(pair):.3e})",
            condition=_condition(pair),
        )
    return qp


def semigroup_log(pair: BTPair, anchor: int | None = 0) -> np.ndarray:
    """``log T(n)`` tabulated on the grid, ``T(n+1)/T(n) = alpha_n / beta_{n+1}``.

    ``T(anchor) = 1``; with ``anchor=None`` the maximum is normalized to 1.
    """
    step = np.log(pair.alpha[:-1]) - np.log(pair.beta_plus[:-1])
    logT = np.concatenate([[0.0], np.cumsum(step)])
    if anchor is None:
        return logT - logT.max()
    return logT - logT[pair.grid.index(anchor)]


def fredholm_diagnostics(pair: BTPair) -> dict:
    """Smallest singular values of the truncated stencils.

    The square truncation of ``Chat`` has one singular value that is
    exponentially small in the grid width.  ``C`` acting on sequences that vanish
    at the right edge has none.
    """
    Ch = operator_matrix(pair, "Chat")
    sv_chat = np.linalg.svd(Ch, compute_uv=False)
    sv_c = np.linalg.svd(operator_matrix(pair, "C")[:, :-1], compute_uv=False)
    return {
        "chat_smallest": sv_chat[-2:][::-1].tolist(),
        "c_smallest": float(sv_c[-1]),
        "c_largest": float(sv_c[0]),
    }


# linearized transformation ------------------------------------------------


def lbt_residual(pair: BTPair, qp, pp, q, p, free_left: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Defects of the linearized transformation; ``q'`` has a free left end by default."""
    DF1 = p + apply_operator(pair, "L", q) - apply_operator(pair, "C", qp, free_left)
    DF2 = pp + apply_operator(pair, "Chat", q) - apply_operator(pair, "M", qp)
    return DF1, DF2


def right_anchored(u: TangentField) -> np.ndarray:
    """Displacement ``q`` shifted so that it vanishes beyond the right edge."""
    return u.q - (u.q[-1] + u.r[-1])


def lbt_forward(pair: BTPair, lower_tangent: TangentField, shift: bool = True) -> TangentField:
    """The map B(t): tangent at the lower solution to tangent at the upper one.

    ``q = Chat^{-1}(M q' - p')`` on the kernel-orthogonal branch, ``p = C q' - L q``,
    then a multiple of ``d/dgamma_m U`` is added so the result pairs to zero with
    ``d/dkappa_m U``.  Displacements are measured from their right limit, the
    normalisation of the right-weighted space.
    """
    qp, pp = right_anchored(lower_tangent), lower_tangent.p
    q = solve_chat(pair, apply_operator(pair, "M", qp) - pp)
    p = apply_operator(pair, "C", qp, free_left=True) - apply_operator(pair, "L", q)
    u = TangentField(pair.grid, q, p)
    if shift and pair.upper_params is not None:
        mu = symplectic_pairing(u, pair.speed_mode) / pair.gram_kernel_speed
        u = u - mu * pair.kernel_mode
    return u


def lbt_inverse(pair: BTPair, upper_tangent: TangentField, tol: float = PAIRING_TOL) -> TangentField:
    """The map B(t)^{-1}.

    The input is first shifted along ``d/dgamma_m U`` so it pairs to zero with
    ``d/dkappa_m U``; it must pair to zero with ``d/dgamma_m U`` (equivalently
    ``<L q + p, d/dgamma_m Q> = 0``).
    """
    u = upper_tangent
    if pair.upper_params is not None:
        mu = symplectic_pairing(u, pair.speed_mode) / pair.gram_kernel_speed
        u = u - mu * pair.kernel_mode
    q = right_anchored(u)
    y = apply_operator(pair, "L", q) + u.p
    k = _kernel_field(pair)
    val = float(k @ y)
    scale = np.sqrt(y @ y) * np.sqrt(k @ k)
    if abs(val) > tol * max(scale, 1e-300) and abs(val) > 1e-300:
        raise SolvabilityError(
            f"tangent is not orthogonal to the kernel mode: pairing {val:.3e}", pairing=val
        )
    y = y - val / (k @ k) * k
    qp = solve_c(pair, y, tol=np.inf, free_left=True)
    pp = apply_operator(pair, "M", qp) - apply_operator(pair, "Chat", q)
    return TangentField(pair.grid, qp, pp)


def hierarchy_tangents(pair: BTPair, which: str) -> tuple[TangentField, TangentField]:
    """Matched (lower, upper) parameter derivatives along the hierarchy.

    ``which`` names a lower-level parameter (``'gamma_i'`` / ``'kappa_i'`` with
    ``i < m``, varying the lower solution and holding ``kappa_m, gamma_m``) or
    ``'gamma_m'`` / ``'kappa_m'`` (holding the lower solution fixed).  For the
    lower-level and ``gamma_m`` choices the tuple solves the linearized
    transformation.
    """
    up = pair._basis("upper")
    m = pair.upper_params.m
    kind, i = which.split("_")
    i = int(i)
    zero = TangentField.zeros(pair.grid)
    k = pair.upper_params.k
    km = pair.kappa_m
    if i == m:
        if kind == "gamma":
            return zero, up[-2]
        u = up[-1]
        for j in range(m - 1):
            _, dkm = _offset_partials(k[j], km)
            u = u - dkm * up[2 * j]
        return zero, u
    lo = pair._basis("lower")
    if kind == "gamma":
        return lo[2 * (i - 1)], up[2 * (i - 1)]
    dki, _ = _offset_partials(k[i - 1], km)
    return lo[2 * (i - 1) + 1], up[2 * (i - 1) + 1] - dki * up[2 * (i - 1)]


# operator norms -----------------------------------------------------------


@dataclass(frozen=True)
class NormEstimate:
    value: float
    converged: bool
    iterations: int
    history: list


def _bond_coords(u: TangentField) -> np.ndarray:
    return np.concatenate([u.r[:-1], u.p])


def _from_bond_coords(grid: LatticeGrid, x: np.ndarray) -> TangentField:
    N = grid.size
    r = np.concatenate([x[: N - 1], [0.0]])
    return TangentField.from_bonds(grid, r, x[N - 1 :])


def _weights(grid: LatticeGrid, frame: WeightFrame, t: float) -> np.ndarray:
    lw = frame.log_weight(grid, t)
    lw = lw - lw.mean()
    return np.exp(np.concatenate([lw[:-1], lw]))


def _power_iteration(matvec, rmatvec, dim, rng, tol=1e-10, maxiter=5000) -> NormEstimate:
    x = rng.standard_normal(dim)
    x /= np.linalg.norm(x)
    history = []
    prev = 0.0
    for it in range(1, maxiter + 1):
        y = rmatvec(matvec(x))
        lam = np.linalg.norm(y)
        if lam == 0.0:
            return NormEstimate(0.0, True, it, history)
        x = y / lam
        est = float(np.sqrt(lam))
        history.append(est)
        if abs(est - prev) <= tol * est:
            return NormEstimate(est, True, it, history)
        prev = est
    return NormEstimate(history[-1], False, maxiter, history)


def operator_norm_estimate(
    pair: BTPair,
    which: str,
    frame: WeightFrame,
    seed: int = 0,
    tol: float = 1e-10,
    edge: int = 10,
    restrict: bool = True,
) -> NormEstimate:
    """Norm of ``B``, ``Binv`` or a stencil in the weighted space at the pair's time.

    Tangents are measured in bond/momentum coordinates ``(r, p)`` with the
    weight of ``frame`` (normalized to unit geometric mean on the grid, which
    does not change the norm).  ``Binv`` is restricted to tangents that pair to
    zero with ``d/dgamma_m U``, enforced by removing a multiple of
    ``d/dkappa_m U``.  The domain is restricted to fields supported at least
    ``edge`` sites inside the grid, so that only decaying inputs are probed;
    a unit field at the last sites would meet the dropped row of ``Chat``.

    With ``restrict`` the domain is further cut down to the symplectic
    complement of the modes: of the lower family for ``B`` and of the upper
    family for ``Binv``.  These are the spaces the isomorphism acts between.
    Off them the ``d/dkappa_m`` shift sees the other cores and its weighted
    size grows like ``exp(a * separation)``.
    """
    grid = pair.grid
    t = pair.t if pair.t is not None else 0.0
    if which in ("L", "M"):
        d = apply_operator(pair, which, np.ones(grid.size))
        return NormEstimate(float(np.abs(d).max()), True, 0, [])
    w = _weights(grid, frame, t)
    dim = w.size
    if which == "B":
        fwd = lambda u: lbt_forward(pair, u)  # noqa: E731
    elif which == "Binv":
        kern, speed = pair.kernel_mode, pair.speed_mode
        denom = symplectic_pairing(speed, kern)

        def fwd(u):
            u = u - (symplectic_pairing(u, kern) / denom) * speed
            return lbt_inverse(pair, u)
    else:
        raise ValueError(f"unknown operator {which!r}")
    N = grid.size
    sites = np.concatenate([np.arange(N - 1), np.arange(N)])
    cols = np.flatnonzero((sites >= edge) & (sites < N - 1 - edge))
    modes = pair._basis("lower" if which == "B" else "upper") if restrict else []
    A = np.empty((dim, cols.size))
    F = np.empty((len(modes), cols.size))
    for c, j in enumerate(cols):
        e = np.zeros(dim)
        e[j] = 1.0 / w[j]
        u = _from_bond_coords(grid, e)
        A[:, c] = w * _bond_coords(fwd(u))
        F[:, c] = [symplectic_pairing(u, mode) for mode in modes]
    if modes:
        # columns are orthonormal in the weighted metric, so an orthonormal
        # null-space basis keeps the estimate a weighted operator norm
        A = A @ null_space(F)
    rng = np.random.default_rng(seed)
    return _power_iteration(lambda x: A @ x, lambda y: A.T @ y, A.shape[1], rng, tol=tol)
