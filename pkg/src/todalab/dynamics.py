"""Time integration of the Toda chain, its linearization and finite perturbations.

Three kinds of flow are integrated:

* the full chain ``Qddot = e^{-(Q - Q_-)} - e^{-(Q_+ - Q)}`` with clamped ghosts
  (:func:`integrate_toda`);
* the linearized flow ``udot = J H''(U) u`` about an exact soliton background
  (:func:`integrate_linearized`);
* the exact nonlinear equation for a perturbation ``w = u - U`` of an exact
  soliton background (:func:`integrate_perturbation`).

The last two work in bond/momentum coordinates ``(r, p)`` plus the left-edge
displacement ``q[n_min]``; in that form exponentially small tails keep their
relative precision, which the exponential frame weights need.  Both use free
ends, matching the tangent-field convention of :mod:`lattice_core`.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solveh_banded

from .errors import IllConditionedError
from .lattice_core import (
    LatticeGrid,
    LatticeState,
    TangentField,
    WeightFrame,
    lattice_energy,
    log_weighted_norm,
    symplectic_pairing,
    toda_force,
)
from .soliton_factory import SolitonParams, m_soliton_bonds, tangent_basis

MAX_DT = 0.1
BLOWUP = 1e6

_Y1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_Y0 = 1.0 - 2.0 * _Y1
YOSHIDA = (_Y1, _Y0, _Y1)


@dataclass
class Trajectory:
    """Uniformly stepped series of states or tangent fields."""

    grid: LatticeGrid
    times: np.ndarray
    kind: str  # 'state' or 'tangent'
    a: np.ndarray  # Q or q, shape (T, N)
    b: np.ndarray  # P or p
    c: np.ndarray | None = None  # r for tangents
    metadata: dict = field(default_factory=dict)
    blowup: bool = False

    def __len__(self):
        return self.times.size

    def state(self, i: int) -> LatticeState:
        return LatticeState(self.grid, self.a[i], self.b[i])

    def tangent(self, i: int) -> TangentField:
        return TangentField(self.grid, self.a[i], self.b[i], None if self.c is None else self.c[i])

    def __getitem__(self, i: int):
        return self.state(i) if self.kind == "state" else self.tangent(i)

    def energies(self) -> np.ndarray:
        return np.array([lattice_energy(self.state(i)) for i in range(len(self))])


def _steps(t_span, dt) -> tuple[int, float]:
    t0, t1 = map(float, t_span)
    if not t1 > t0:
        raise ValueError("t_span must be increasing")
    if not 0 < dt <= MAX_DT:
        raise ValueError(f"dt must lie in (0, {MAX_DT}]")
    n = int(np.ceil((t1 - t0) / dt - 1e-9))
    return n, (t1 - t0) / n


# full chain --------------------------------------------------------------


def _leapfrog(Q, P, h, left, right):
    P = P + 0.5 * h * toda_force(Q, left, right)
    Q = Q + h * P
    P = P + 0.5 * h * toda_force(Q, left, right)
    return Q, P


def _midpoint(Q, P, h, left, right, tol=1e-14, maxiter=100):
    Q1, P1 = _leapfrog(Q, P, h, left, right)
    for _ in range(maxiter):
        Qm = 0.5 * (Q + Q1)
        Pm = 0.5 * (P + P1)
        Qn = Q + h * Pm
        Pn = P + h * toda_force(Qm, left, right)
        err = max(np.abs(Qn - Q1).max(), np.abs(Pn - P1).max())
        Q1, P1 = Qn, Pn
        if err <= tol * (1.0 + np.abs(Q1).max()):
            break
    return Q1, P1


def integrate_toda(
    state0: LatticeState,
    t_span,
    dt: float,
    method: str = "leapfrog",
    record_every: int = 1,
    bound: float = BLOWUP,
) -> Trajectory:
    """Integrate the clamped chain from ``t_span[0]`` to ``t_span[1]``.

    ``method`` is ``'leapfrog'`` (Stormer-Verlet), ``'yoshida4'`` (fourth-order
    composition of leapfrog) or ``'midpoint'`` (implicit, fixed-point solved).
    States beyond ``bound`` or non-finite truncate the trajectory and set
    ``blowup``.
    """
    nsteps, h = _steps(t_span, dt)
    g = state0.grid
    left, right = g.left_value, g.right_value
    Q, P = state0.Q.copy(), state0.P.copy()
    times, Qs, Ps = [float(t_span[0])], [Q.copy()], [P.copy()]
    blow = False
    start = _time.perf_counter()
    for k in range(1, nsteps + 1):
        if method == "leapfrog":
            Q, P = _leapfrog(Q, P, h, left, right)
        elif method == "yoshida4":
            for w in YOSHIDA:
                Q, P = _leapfrog(Q, P, w * h, left, right)
        elif method == "midpoint":
            Q, P = _midpoint(Q, P, h, left, right)
        else:
            raise ValueError(f"unknown method {method!r}")
        if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(P))) or max(
            np.abs(Q).max(), np.abs(P).max()
        ) > bound:
            blow = True
            break
        if k % record_every == 0 or k == nsteps:
            times.append(float(t_span[0]) + k * h)
            Qs.append(Q.copy())
            Ps.append(P.copy())
    meta = {
        "integrator": method,
        "dt": h,
        "steps": nsteps,
        "record_every": record_every,
        "wall_seconds": _time.perf_counter() - start,
    }
    return Trajectory(g, np.array(times), "state", np.array(Qs), np.array(Ps), None, meta, blow)


# bond-coordinate flows -----------------------------------------------------


class _Background:
    """Exact soliton bonds ``e^{-R}`` and momenta, cached per time."""

    def __init__(self, params: SolitonParams, grid: LatticeGrid):
        self.params = params
        self.grid = grid
        self._t = None
        self._val = None

    def __call__(self, t: float):
        if t != self._t:
            hs = m_soliton_bonds(self.params, t, self.grid, momentum=False)
            self._t, self._val = t, (np.exp(-hs.R), hs.R, hs.P)
        return self._val


def _Dp(p):
    # (S - I) p with a free right end
    out = np.zeros_like(p)
    out[:-1] = p[1:] - p[:-1]
    return out


def _Db(w):
    # (I - S^{-1}) w with zero before the first site
    out = w.copy()
    out[1:] -= w[:-1]
    return out


def _linear_band(K, h):
    # I - h^2/4 * Db K Dp in upper banded storage
    d = K.copy()
    d[-1] = 0.0
    dm = np.concatenate([[0.0], d[:-1]])
    c = h * h / 4.0
    ab = np.zeros((2, K.size))
    ab[1] = 1.0 + c * (d + dm)
    ab[0, 1:] = -c * d[:-1]
    return ab


def _as_bond_state(u: TangentField):
    r = u.r.copy()
    r[-1] = 0.0
    return float(u.q[0]), r, u.p.copy()


class _BondRecorder:
    def __init__(self, grid, record_every):
        self.grid = grid
        self.every = record_every
        self.t, self.q, self.p, self.r = [], [], [], []

    def add(self, t, q0, r, p):
        self.t.append(t)
        self.q.append(q0 + np.concatenate([[0.0], np.cumsum(r[:-1])]))
        self.p.append(p.copy())
        self.r.append(r.copy())

    def build(self, meta, blow):
        return Trajectory(
            self.grid,
            np.array(self.t),
            "tangent",
            np.array(self.q),
            np.array(self.p),
            np.array(self.r),
            meta,
            blow,
        )


def _blown(r, p, bound):
    return not (np.all(np.isfinite(r)) and np.all(np.isfinite(p))) or max(
        np.abs(r).max(), np.abs(p).max()
    ) > bound


def integrate_linearized(
    background: SolitonParams,
    u0: TangentField,
    t_span,
    dt: float,
    method: str = "midpoint",
    record_every: int = 1,
    bound: float = BLOWUP,
) -> Trajectory:
    """Propagate a tangent field under ``udot = J H''(U(t)) u``.

    The background is the closed-form solution evaluated afresh at the needed
    times, never co-integrated.  ``'midpoint'`` is the implicit midpoint rule
    (tridiagonal solve per step, background at the half step); ``'leapfrog'``
    is the Stormer-Verlet splitting and ``'yoshida4'`` its fourth-order
    triple-jump composition.
    """
    nsteps, h = _steps(t_span, dt)
    grid = u0.grid
    bg = _Background(background, grid)
    q0, r, p = _as_bond_state(u0)
    t = float(t_span[0])
    rec = _BondRecorder(grid, record_every)
    rec.add(t, q0, r, p)
    blow = False
    start = _time.perf_counter()
    for k in range(1, nsteps + 1):
        if method == "midpoint":
            K = bg(t + 0.5 * h)[0]
            w = _Db(K * r)
            rhs = p + h * w + (h * h / 4.0) * _Db(K * _Dp(p))
            p1 = solveh_banded(_linear_band(K, h), rhs, lower=False)
            r = r + 0.5 * h * _Dp(p + p1)
            q0 += 0.5 * h * (p[0] + p1[0])
            p = p1
        elif method in ("leapfrog", "yoshida4"):
            tau = t
            for wgt in (1.0,) if method == "leapfrog" else YOSHIDA:
                sub = wgt * h
                p = p + 0.5 * sub * _Db(bg(tau)[0] * r)
                r = r + sub * _Dp(p)
                q0 += sub * p[0]
                tau = tau + sub
                p = p + 0.5 * sub * _Db(bg(tau)[0] * r)
        else:
            raise ValueError(f"unknown method {method!r}")
        t = float(t_span[0]) + k * h
        if _blown(r, p, bound):
            blow = True
            break
        if k % record_every == 0 or k == nsteps:
            rec.add(t, q0, r, p)
    meta = {
        "integrator": method,
        "dt": h,
        "steps": nsteps,
        "record_every": record_every,
        "background": {"kappas": list(background.kappas), "gammas": list(background.gammas)},
        "wall_seconds": _time.perf_counter() - start,
    }
    return rec.build(meta, blow)


def perturbation_force(K: np.ndarray, r: np.ndarray) -> np.ndarray:
    """``F(U + w) - F(U)`` in bond form, ``-(I - S^{-1})[e^{-R} expm1(-r)]``."""
    return -_Db(K * np.expm1(-r))


def integrate_perturbation(
    background: SolitonParams,
    w0: TangentField,
    t_span,
    dt: float,
    method: str = "yoshida4",
    record_every: int = 1,
    bound: float = BLOWUP,
    callback=None,
) -> Trajectory:
    """Integrate the full nonlinear equation for ``w = u - U`` about an exact soliton.

    ``u = U + w`` solves the Toda chain exactly when ``w`` solves
    ``wddot = F(U + w) - F(U)``; this is that equation, kept in bond form so
    that tails stay relatively precise.  ``callback(t, w)`` is invoked at every
    recorded time; returning ``False`` stops the run.
    """
    nsteps, h = _steps(t_span, dt)
    grid = w0.grid
    bg = _Background(background, grid)
    q0, r, p = _as_bond_state(w0)
    t = float(t_span[0])
    weights = {"leapfrog": (1.0,), "yoshida4": YOSHIDA}.get(method)
    if weights is None:
        raise ValueError(f"unknown method {method!r}")
    rec = _BondRecorder(grid, record_every)
    rec.add(t, q0, r, p)
    blow = False
    stopped = False
    if callback is not None and callback(t, rec_field(grid, q0, r, p)) is False:
        stopped = True
    start = _time.perf_counter()
    for k in range(1, nsteps + 1):
        if stopped:
            break
        tau = t
        for wgt in weights:
            sub = wgt * h
            p = p + 0.5 * sub * perturbation_force(bg(tau)[0], r)
            r = r + sub * _Dp(p)
            q0 += sub * p[0]
            tau = tau + sub
            p = p + 0.5 * sub * perturbation_force(bg(tau)[0], r)
        t = float(t_span[0]) + k * h
        if _blown(r, p, bound):
            blow = True
            break
        if k % record_every == 0 or k == nsteps:
            rec.add(t, q0, r, p)
            if callback is not None and callback(t, rec_field(grid, q0, r, p)) is False:
                stopped = True
    meta = {
        "integrator": method,
        "dt": h,
        "steps": nsteps,
        "record_every": record_every,
        "background": {"kappas": list(background.kappas), "gammas": list(background.gammas)},
        "stopped_early": stopped,
        "wall_seconds": _time.perf_counter() - start,
    }
    return rec.build(meta, blow)


def rec_field(grid: LatticeGrid, q0: float, r: np.ndarray, p: np.ndarray) -> TangentField:
    return TangentField.from_bonds(grid, r.copy(), p.copy(), q0)


def perturbation_energy(background: SolitonParams, t: float, w: TangentField) -> float:
    """``H(U + w) - H(U)`` evaluated without cancellation."""
    hs = m_soliton_bonds(background, t, w.grid)
    K = np.exp(-hs.R)
    return float(np.sum(hs.P * w.p + 0.5 * w.p**2) + np.sum(K * np.expm1(-w.r) + w.r))


def bregman_energy(background: SolitonParams, t: float, w: TangentField) -> float:
    """``H(U + w) - H(U) - <H'(U), w>``."""
    hs = m_soliton_bonds(background, t, w.grid)
    K = np.exp(-hs.R)
    return float(np.sum(0.5 * w.p**2) + np.sum(K * (np.expm1(-w.r) + w.r)))


# projections and measurements --------------------------------------------


@dataclass(frozen=True)
class ProjectionBasis:
    modes: list
    gram: np.ndarray  # gram[j, i] = <e_i, J^{-1} e_j>
    condition: float


def projection_basis(params: SolitonParams, t: float, grid: LatticeGrid) -> ProjectionBasis:
    modes = tangent_basis(params, t, grid)
    n = len(modes)
    G = np.array([[symplectic_pairing(modes[i], modes[j]) for i in range(n)] for j in range(n)])
    cond = float(np.linalg.cond(G)) if n else 1.0
    return ProjectionBasis(modes, G, cond)


def project_Xm(
    u: TangentField,
    t: float,
    params: SolitonParams,
    basis: ProjectionBasis | None = None,
    max_condition: float = 1e12,
) -> TangentField:
    """Remove the soliton-mode components so every pairing with the modes vanishes."""
    if params.m == 0:
        return u
    basis = basis or projection_basis(params, t, u.grid)
    if not basis.condition < max_condition:
        raise IllConditionedError(
            f"mode pairing matrix has condition {basis.condition:.3e}", condition=basis.condition
        )
    b = np.array([symplectic_pairing(u, e) for e in basis.modes])
    c = np.linalg.solve(basis.gram, b)
    out = u
    for ci, e in zip(c, basis.modes):
        out = out - ci * e
    # one refinement sweep removes the rounding left by the first pass
    b = np.array([symplectic_pairing(out, e) for e in basis.modes])
    c = np.linalg.solve(basis.gram, b)
    for ci, e in zip(c, basis.modes):
        out = out - ci * e
    return out


def mode_pairings(traj: Trajectory, params: SolitonParams) -> np.ndarray:
    """``<u(t), J^{-1} e_j(t)>`` for every recorded time and every mode, shape (T, 2m)."""
    out = np.empty((len(traj), 2 * params.m))
    for i in range(len(traj)):
        modes = tangent_basis(params, traj.times[i], traj.grid)
        u = traj.tangent(i)
        out[i] = [symplectic_pairing(u, e) for e in modes]
    return out


def pairing_drift(traj: Trajectory, params: SolitonParams) -> float:
    """Largest change over the run of any pairing with the moving soliton modes."""
    if params.m == 0 or len(traj) == 0:
        return 0.0
    vals = mode_pairings(traj, params)
    return float(np.abs(vals - vals[0]).max())


@dataclass(frozen=True)
class DecayFit:
    rate: float
    intercept: float
    residual: float
    beta: float
    window: tuple
    shortened: bool
    log_norms: np.ndarray


def log_norm_series(traj: Trajectory, frame: WeightFrame) -> np.ndarray:
    return np.array([log_weighted_norm(traj.tangent(i), frame, traj.times[i]) for i in range(len(traj))])


def decay_rate(
    traj: Trajectory,
    frame: WeightFrame,
    window: tuple | None = None,
    discard: float = 0.2,
    floor: float = -600.0,
) -> DecayFit:
    """Least-squares decay rate of ``log ||e^{a(n - ct - T)} u(t)||``.

    By default the first ``discard`` fraction of the run is skipped.  Samples
    whose log-norm falls below ``floor`` end the window early (flagged).
    """
    t = traj.times
    logs = log_norm_series(traj, frame)
    if window is None:
        window = (t[0] + discard * (t[-1] - t[0]), t[-1])
    sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    shortened = False
    bad = sel & ~(np.isfinite(logs) & (logs > floor))
    if bad.any():
        cut = t[np.flatnonzero(bad)[0]]
        sel &= t < cut
        shortened = True
    if sel.sum() < 3:
        raise ValueError("decay fit window holds fewer than three samples")
    A = np.vstack([t[sel], np.ones(sel.sum())]).T
    coef, res, *_ = np.linalg.lstsq(A, logs[sel], rcond=None)
    resid = float(np.sqrt(res[0] / sel.sum())) if res.size else 0.0
    return DecayFit(
        float(-coef[0]),
        float(coef[1]),
        resid,
        frame.beta,
        (float(t[sel][0]), float(t[sel][-1])),
        shortened,
        logs,
    )


def localized_random_field(
    grid: LatticeGrid, center: float, width: float, rng: np.random.Generator
) -> TangentField:
    """Gaussian-windowed white noise in ``(r, p)``; the last bond is zero."""
    n = grid.sites.astype(float)
    env = np.exp(-0.5 * ((n - center) / width) ** 2)
    r = rng.standard_normal(n.size) * env
    p = rng.standard_normal(n.size) * env
    r[-1] = 0.0
    return TangentField.from_bonds(grid, r, p)


@dataclass(frozen=True)
class LinearDecayRun:
    trajectory: Trajectory
    fit: DecayFit
    initial_log_norm: float
    final_log_norm: float
    projected: bool

    @property
    def final_ratio(self) -> float:
        return float(np.exp(self.final_log_norm - self.initial_log_norm))


def linear_decay_experiment(
    params: SolitonParams,
    frame: WeightFrame,
    t_span=(0.0, 12.0),
    dt: float = 1e-2,
    seed: int = 0,
    project: bool = True,
    width: float = 4.0,
    grid: LatticeGrid | None = None,
    window: tuple | None = (2.0, 12.0),
    method: str = "midpoint",
    record_every: int = 10,
) -> LinearDecayRun:
    """Random tangent near the cores, optionally projected into ``X_m``, evolved linearly."""
    t0, t1 = float(t_span[0]), float(t_span[1])
    if grid is None:
        cores = np.concatenate([params.core_positions(t0), params.core_positions(t1)]) if params.m else [0.0]
        grid = LatticeGrid(int(np.floor(min(cores))) - 60 - int(t1 - t0), int(np.ceil(max(cores))) + 60)
    center = float(np.mean(params.core_positions(t0))) if params.m else 0.0
    u0 = localized_random_field(grid, center, width, np.random.default_rng(seed))
    if project:
        u0 = project_Xm(u0, t0, params)
    traj = integrate_linearized(params, u0, (t0, t1), dt, method=method, record_every=record_every)
    fit = decay_rate(traj, frame, window=window)
    return LinearDecayRun(traj, fit, float(fit.log_norms[0]), float(fit.log_norms[-1]), project)
