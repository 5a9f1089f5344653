"""Grid, state representations and Hamiltonian structure of the truncated Toda chain.

Positions ``Q`` live on the integer sites ``n_min..n_max``.  Sites outside the
range are ghost cells clamped to ``left_value`` / ``right_value``.  Bond
variables ``R_n = Q_{n+1} - Q_n`` are stored on the site to their left, so the
last bond couples ``Q[n_max]`` to the right ghost.

Tangent fields (perturbations) use free ends: the ghost copies the edge value,
so boundary bonds carry no stretch.  This keeps parameter derivatives that tend
to a constant at ``+inf`` (the speed modes) from generating spurious boundary
kinks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, NonFiniteStateError, WeightOverflowError

MIN_SITES = 17
LOG_WEIGHT_LIMIT = 500.0


def potential(R):
    """Toda bond potential ``V(R) = e^{-R} - 1 + R`` (evaluated without cancellation)."""
    R = np.asarray(R, dtype=float)
    return np.expm1(-R) + R


@dataclass(frozen=True)
class LatticeGrid:
    n_min: int
    n_max: int
    left_value: float = 0.0
    right_value: float = 0.0

    def __post_init__(self):
        if self.n_max - self.n_min < MIN_SITES - 1:
            raise ValueError(
                f"grid needs at least {MIN_SITES} sites, got {self.n_max - self.n_min + 1}"
            )

    @property
    def size(self) -> int:
        return self.n_max - self.n_min + 1

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.n_min, self.n_max + 1)

    def index(self, n: int) -> int:
        if not self.n_min <= n <= self.n_max:
            raise IndexError(f"site {n} outside [{self.n_min}, {self.n_max}]")
        return n - self.n_min

    def with_limits(self, left_value: float, right_value: float) -> "LatticeGrid":
        return LatticeGrid(self.n_min, self.n_max, float(left_value), float(right_value))

    def same_sites(self, other: "LatticeGrid") -> bool:
        return self.n_min == other.n_min and self.n_max == other.n_max

    @classmethod
    def centered(cls, half_width: int, right_value: float = 0.0) -> "LatticeGrid":
        return cls(-half_width, half_width, 0.0, right_value)


def _check_same(a: LatticeGrid, b: LatticeGrid):
    if not a.same_sites(b):
        raise GridMismatchError(f"grid [{a.n_min},{a.n_max}] vs [{b.n_min},{b.n_max}]")


def _finite(name, x):
    bad = ~np.isfinite(x)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteStateError(f"{name} has non-finite value at array index {i}: {x[i]!r}")


def shift_forward(x: np.ndarray, ghost: float) -> np.ndarray:
    """``(S x)_n = x_{n+1}`` with a ghost value past the right end."""
    return np.concatenate([x[1:], [ghost]])


def shift_backward(x: np.ndarray, ghost: float) -> np.ndarray:
    """``(S^{-1} x)_n = x_{n-1}`` with a ghost value before the left end."""
    return np.concatenate([[ghost], x[:-1]])


def free_difference(q: np.ndarray) -> np.ndarray:
    """``(S - I) q`` with a free right end (last bond is zero)."""
    r = np.empty_like(q)
    r[:-1] = q[1:] - q[:-1]
    r[-1] = 0.0
    return r


@dataclass(frozen=True)
class LatticeState:
    grid: LatticeGrid
    Q: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        P = np.asarray(self.P, dtype=float)
        if Q.shape != (self.grid.size,) or P.shape != (self.grid.size,):
            raise GridMismatchError(
                f"state arrays {Q.shape}/{P.shape} do not match grid size {self.grid.size}"
            )
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "P", P)

    def bonds(self) -> np.ndarray:
        """``R = Q_+ - Q`` with the right ghost clamped (length N)."""
        return shift_forward(self.Q, self.grid.right_value) - self.Q

    def left_bond(self) -> float:
        return float(self.Q[0] - self.grid.left_value)

    def to_hamiltonian(self) -> "HamiltonianState":
        return HamiltonianState(self.grid, self.bonds(), self.P.copy())

    def boundary_contamination(self) -> float:
        """Largest deviation of the edge sites from the asymptotic constants."""
        return max(
            abs(self.Q[0] - self.grid.left_value),
            abs(self.Q[-1] - self.grid.right_value),
            abs(self.P[0]),
            abs(self.P[-1]),
        )


@dataclass(frozen=True)
class HamiltonianState:
    grid: LatticeGrid
    R: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        object.__setattr__(self, "P", np.asarray(self.P, dtype=float))
        if self.R.shape != (self.grid.size,) or self.P.shape != (self.grid.size,):
            raise GridMismatchError("HamiltonianState arrays do not match grid")

    def to_lattice(self, anchor: float) -> LatticeState:
        """Rebuild ``Q`` from bonds, with ``Q[n_min] = anchor``."""
        Q = anchor + np.concatenate([[0.0], np.cumsum(self.R[:-1])])
        return LatticeState(self.grid, Q, self.P.copy())


@dataclass(frozen=True)
class TangentField:
    """Perturbation ``(q, p)`` with bond component ``r``.

    ``r`` defaults to the free-ended difference of ``q``.  It can be supplied
    directly when it is known with better relative precision than the
    difference of ``q`` would give (for example far to the right of a soliton,
    where ``q`` tends to a nonzero constant but ``r`` is exponentially small).
    """

    grid: LatticeGrid
    q: np.ndarray
    p: np.ndarray
    r: np.ndarray | None = None

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if q.shape != (self.grid.size,) or p.shape != (self.grid.size,):
            raise GridMismatchError("TangentField arrays do not match grid")
        r = free_difference(q) if self.r is None else np.asarray(self.r, dtype=float)
        if r.shape != q.shape:
            raise GridMismatchError("TangentField bond array does not match grid")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "r", r)

    @classmethod
    def zeros(cls, grid: LatticeGrid) -> "TangentField":
        return cls(grid, np.zeros(grid.size), np.zeros(grid.size))

    @classmethod
    def from_bonds(cls, grid: LatticeGrid, r: np.ndarray, p: np.ndarray, q0: float = 0.0):
        """Build from ``(r, p)``; ``q`` is rebuilt by summing bonds from ``q[n_min] = q0``."""
        r = np.asarray(r, dtype=float)
        q = q0 + np.concatenate([[0.0], np.cumsum(r[:-1])])
        return cls(grid, q, p, r)

    def __add__(self, other: "TangentField") -> "TangentField":
        _check_same(self.grid, other.grid)
        return TangentField(self.grid, self.q + other.q, self.p + other.p, self.r + other.r)

    def __sub__(self, other: "TangentField") -> "TangentField":
        _check_same(self.grid, other.grid)
        return TangentField(self.grid, self.q - other.q, self.p - other.p, self.r - other.r)

    def __mul__(self, s: float) -> "TangentField":
        return TangentField(self.grid, s * self.q, s * self.p, s * self.r)

    __rmul__ = __mul__

    def __neg__(self) -> "TangentField":
        return TangentField(self.grid, -self.q, -self.p, -self.r)

    def flat_norm(self) -> float:
        """l2 norm of ``u = (r, p)``."""
        return float(np.sqrt(np.sum(self.r**2) + np.sum(self.p**2)))

    def sup_norm(self) -> float:
        return float(max(np.abs(self.r).max(), np.abs(self.p).max()))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])

    @classmethod
    def from_vector(cls, grid: LatticeGrid, x: np.ndarray) -> "TangentField":
        return cls(grid, x[: grid.size], x[grid.size :])


@dataclass(frozen=True)
class WeightFrame:
    """Moving exponential weight ``e^{a(n - c t - T)}``."""

    a: float
    c: float
    T: float = 0.0
    s: float = 0.0
    beta: float = field(init=False)

    def __post_init__(self):
        for name in ("a", "c", "T", "s"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"WeightFrame.{name} must be finite")
        object.__setattr__(self, "beta", decay_exponent(self.a, self.c))

    def log_weight(self, grid: LatticeGrid, t: float) -> np.ndarray:
        return self.a * (grid.sites - self.c * t - self.T)


def decay_exponent(a: float, c: float) -> float:
    """Linear decay rate ``c a - 2 sinh(a/2)`` for the frame (a, c)."""
    return c * a - 2.0 * np.sinh(a / 2.0)


def toda_rhs(state: LatticeState) -> tuple[np.ndarray, np.ndarray]:
    """Time derivative ``(Qdot, Pdot)`` of the Toda chain with clamped ghosts."""
    _finite("Q", state.Q)
    _finite("P", state.P)
    g = state.grid
    Q = state.Q
    back = Q - shift_backward(Q, g.left_value)
    fwd = shift_forward(Q, g.right_value) - Q
    return state.P.copy(), np.exp(-back) - np.exp(-fwd)


def toda_force(Q: np.ndarray, left: float, right: float) -> np.ndarray:
    back = Q - shift_backward(Q, left)
    fwd = shift_forward(Q, right) - Q
    return np.exp(-back) - np.exp(-fwd)


def hamiltonian(state: HamiltonianState) -> float:
    """``H = sum(P^2/2 + V(R))`` over the stored sites."""
    _finite("R", state.R)
    _finite("P", state.P)
    return float(np.sum(0.5 * state.P**2) + np.sum(potential(state.R)))


def lattice_energy(state: LatticeState) -> float:
    """Energy of the truncated chain including the left boundary bond.

    This is the quantity conserved exactly (up to integrator error) by the
    clamped-ghost dynamics.
    """
    return hamiltonian(state.to_hamiltonian()) + float(potential(state.left_bond()))


def grad_hamiltonian(state: HamiltonianState) -> tuple[np.ndarray, np.ndarray]:
    """``H'(U) = (V'(R), P)`` with ``V'(R) = 1 - e^{-R}``."""
    return -np.expm1(-state.R), state.P.copy()


def hessian_apply(state: HamiltonianState, u: TangentField) -> tuple[np.ndarray, np.ndarray]:
    """``H''(U) u = (e^{-R} r, p)`` in bond/momentum coordinates."""
    _check_same(state.grid, u.grid)
    return np.exp(-state.R) * u.r, u.p.copy()


def j_apply(x_r: np.ndarray, x_p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply ``J = [[0, S - I], [I - S^{-1}, 0]]`` to a pair in ``(R, P)`` coordinates.

    Momentum ghosts copy the edge (free end); the bond ghost left of the grid is zero.
    """
    x_r = np.asarray(x_r, dtype=float)
    x_p = np.asarray(x_p, dtype=float)
    if x_r.shape != x_p.shape:
        raise GridMismatchError("j_apply components differ in length")
    first = shift_forward(x_p, x_p[-1]) - x_p
    second = x_r - shift_backward(x_r, 0.0)
    return first, second


def linearized_rhs(state: HamiltonianState, u: TangentField) -> tuple[np.ndarray, np.ndarray]:
    """``(qdot, pdot)`` of the linearized flow about ``state`` for a free-ended tangent."""
    _check_same(state.grid, u.grid)
    w = np.exp(-state.R) * u.r
    return u.p.copy(), w - shift_backward(w, 0.0)


def symplectic_pairing(u: TangentField, dU: TangentField) -> float:
    """``<u, J^{-1} dU> = <p, dQ> - <q, dP>``.

    ``J^{-1}`` sums from the left, so ``dQ`` is normalised to vanish at the left
    end (as every soliton tangent is), while ``q`` is taken relative to its right
    limit, ``q_n = -sum_{k >= n} r_k``.  That is the normalisation under which
    ``u`` lies in the right-weighted space; it only matters when both
    ``sum r`` and ``sum dP`` are nonzero, as for wavenumber tangents.
    """
    _check_same(u.grid, dU.grid)
    q = u.q - (u.q[-1] + u.r[-1])
    return float(np.dot(u.p, dU.q) - np.dot(q, dU.p))


def symplectic_pairing_cumulative(u: TangentField, dU: TangentField) -> float:
    """Same pairing evaluated through explicit partial sums of ``J^{-1}``.

    ``J^{-1} dU = (sum_{j<=n} dP_j, sum_{j<n} dR_j)``; agrees with
    :func:`symplectic_pairing` whenever ``dU`` vanishes at the left end.
    """
    _check_same(u.grid, dU.grid)
    first = np.cumsum(dU.p)
    second = np.concatenate([[0.0], np.cumsum(dU.r)[:-1]])
    return float(np.dot(u.r, first) + np.dot(u.p, second))


def weighted_norm(x, frame: WeightFrame, t: float, grid: LatticeGrid | None = None) -> float:
    """``sqrt(sum e^{2a(n - ct - T)} x_n^2)``.

    ``x`` is a 1-d array on ``grid`` or a :class:`TangentField`, in which case the
    ``(r, p)`` components are both weighted.  Large exponents are handled by
    shifting in log space; a result that itself overflows raises.
    """
    if isinstance(x, TangentField):
        grid = x.grid
        comps = [x.r, x.p]
    else:
        if grid is None:
            raise ValueError("grid is required for a bare array")
        comps = [np.asarray(x, dtype=float)]
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    lw = frame.log_weight(grid, t)
    if np.abs(lw).max() <= LOG_WEIGHT_LIMIT:
        w = np.exp(lw)
        return float(np.sqrt(sum(np.sum((w * c) ** 2) for c in comps)))
    shift = lw.max()
    w = np.exp(lw - shift)
    base = np.sqrt(sum(np.sum((w * c) ** 2) for c in comps))
    if base == 0.0:
        return 0.0
    log_val = shift + np.log(base)
    if log_val > 700.0:
        raise WeightOverflowError(f"weighted norm overflows: log value {log_val:.1f}")
    return float(np.exp(log_val))


def log_weighted_norm(u: TangentField, frame: WeightFrame, t: float) -> float:
    """Natural log of :func:`weighted_norm` without ever leaving log space."""
    lw = frame.log_weight(u.grid, t)
    shift = lw.max()
    w = np.exp(lw - shift)
    base = np.sqrt(np.sum((w * u.r) ** 2) + np.sum((w * u.p) ** 2))
    if base == 0.0:
        return -np.inf
    return float(shift + np.log(base))
