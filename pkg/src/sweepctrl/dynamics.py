"""Integration of the penalized control system and its adjoint.

Forward dynamics:  dx/dt = f(t,x,u) - grad Phi(x) - sum_i w_i(x) grad psi_i(x)
with exponential penalty weights w_i = gamma * e^{gamma psi_i(x)}.  The
penalty makes the system stiff near the boundary (Jacobian eigenvalues of
order gamma * w), so steps are taken with a linearly implicit Rosenbrock
method (RODAS3: L-stable, stiffly accurate, order 3 with an embedded order-2
error estimate, one Jacobian per step).

The catching-up scheme (explicit drift step followed by projection onto the
set) serves as an independent oracle for the exact swept dynamics; its
projection multipliers divided by the step length recover the same reaction
intensities the penalty produces.

The adjoint integrator solves the linear costate equation backward in time
with the same stiffness treatment and records the per-constraint reaction
measure densities gamma * w_i(x(t)) * <grad psi_i(x(t)), p(t)>.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from . import backend
from .exprcore import ScalarField
from .sweepset import (
    Membership,
    PenaltySchedule,
    SweepingSet,
    interior_direction,
    level_membership,
    project_onto_C,
    psi_gamma_value,
    psi_max,
)

__all__ = [
    "ControlSignal",
    "Trajectory",
    "DynamicsSpec",
    "AdjointMeasure",
    "IntegratorOptions",
    "StepFailure",
    "InvarianceViolation",
    "ProjectionFailure",
    "GridMismatch",
    "integrate_penalized",
    "integrate_catching_up",
    "compare_to_oracle",
    "integrate_adjoint",
    "accumulate_measures",
    "interior_start",
]


class StepFailure(RuntimeError):
    def __init__(self, t: float, detail: str = ""):
        self.t = t
        super().__init__(f"step size underflow at t = {t:.6g} {detail}")


class InvarianceViolation(RuntimeError):
    """Trajectory left the smoothed set; a bug or bad constants, never ignored."""

    def __init__(self, t: float, value: float):
        self.t = t
        self.value = value
        super().__init__(f"smoothed constraint value {value:.3g} > tolerance at t = {t:.6g}")


class ProjectionFailure(RuntimeError):
    def __init__(self, t: float):
        self.t = t
        super().__init__(f"projection failed at t = {t:.6g}; shrink the step")


class GridMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# Control signals and trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlSignal:
    """Piecewise-constant control on a uniform grid; values[j] on [t_j, t_j+1)."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.ascontiguousarray(self.grid, dtype=float)
        values = np.ascontiguousarray(self.values, dtype=float)
        if values.ndim != 2 or len(grid) != values.shape[0] + 1:
            raise ValueError("need N+1 grid points and N control rows")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def ncells(self) -> int:
        return self.values.shape[0]

    @classmethod
    def constant(cls, u, T: float, N: int) -> "ControlSignal":
        u = np.atleast_1d(np.asarray(u, dtype=float))
        grid = np.linspace(0.0, T, N + 1)
        return cls(grid, np.tile(u, (max(N, 1), 1))[:N] if N > 0 else np.zeros((0, len(u))))

    def cell_of(self, t: float) -> int:
        j = int(np.searchsorted(self.grid, t, side="right") - 1)
        return min(max(j, 0), self.ncells - 1)

    def at(self, t: float) -> np.ndarray:
        return self.values[self.cell_of(t)]

    def in_box(self, lo, hi, tol: float = 1e-12) -> bool:
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return bool(np.all(self.values >= lo - tol) and np.all(self.values <= hi + tol))

    def clipped(self, lo, hi) -> "ControlSignal":
        return ControlSignal(self.grid, np.clip(self.values, lo, hi))


@dataclass
class Trajectory:
    """States and reaction intensities sampled on a uniform grid."""

    grid: np.ndarray
    states: np.ndarray       # (N+1, n)
    xis: np.ndarray          # (N+1, r), nonnegative
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def r(self) -> int:
        return self.xis.shape[1]

    def state_at(self, t: float) -> np.ndarray:
        """Linear interpolation between grid nodes."""
        g = self.grid
        if t <= g[0]:
            return self.states[0]
        if t >= g[-1]:
            return self.states[-1]
        j = int(np.searchsorted(g, t, side="right") - 1)
        w = (t - g[j]) / (g[j + 1] - g[j])
        return (1.0 - w) * self.states[j] + w * self.states[j + 1]


@dataclass(frozen=True)
class DynamicsSpec:
    """Perturbation, extension potential, sweeping set and horizon."""

    f: tuple[ScalarField, ...]
    phi: ScalarField
    S: SweepingSet
    T: float
    drift_bound: float

    def __post_init__(self):
        n = self.S.n
        if len(self.f) != n:
            raise ValueError("perturbation must have one component per state dimension")
        m = self.f[0].m
        for c in self.f:
            if c.n != n or c.m != m:
                raise ValueError("all perturbation components must share dimensions")
        if self.phi.n != n or self.phi.m != 0:
            raise ValueError("potential must be a function of the state only")
        if self.T < 0:
            raise ValueError("horizon must be nonnegative")

    @property
    def n(self) -> int:
        return self.S.n

    @property
    def m(self) -> int:
        return self.f[0].m

    def drift(self, t: float, x, u) -> np.ndarray:
        """f(t,x,u) - grad Phi(x)."""
        out = np.array([c.value(t, x, u) for c in self.f])
        out -= self.phi.grad_x(t, x)
        return out

    def estimate_drift_bound(self, lo, hi, u_lo, u_hi, rng, count: int = 300) -> float:
        """Sampled sup of ||f - grad Phi|| over feasible states and the control box."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        u_lo = np.asarray(u_lo, dtype=float)
        u_hi = np.asarray(u_hi, dtype=float)
        ts = np.linspace(0.0, self.T, 7) if self.T > 0 else np.zeros(1)
        best = 0.0
        found = 0
        tries = 0
        while found < count and tries < 50 * count:
            tries += 1
            x = rng.uniform(lo, hi)
            if psi_max(self.S, x) > 0:
                continue
            found += 1
            u = u_lo if self.m == 0 else rng.uniform(u_lo, u_hi)
            corners = [u, u_lo, u_hi]
            for t in ts[:: max(1, len(ts) // 3)]:
                for uu in corners:
                    best = max(best, float(np.linalg.norm(self.drift(t, x, uu))))
        if found == 0:
            raise RuntimeError("no feasible sample found for the drift bound")
        return 1.1 * best


@dataclass
class IntegratorOptions:
    rtol: float = 1e-6
    atol: float = 1e-8
    h_min_frac: float = 1e-9     # h_min = T * h_min_frac
    max_steps_per_cell: int = 20000
    inv_tol: Optional[float] = None   # default 1e-6 * (1 + multiplier bound)
    check_invariance: bool = True
    shrunk_margin: Optional[float] = None  # assert psi_gamma <= -margin + inv_tol


# ---------------------------------------------------------------------------
# Penalized right-hand side and Jacobian
# ---------------------------------------------------------------------------

_LOG_CAP = 700.0  # cap on exponents so weights stay finite off the set


class PenaltyForce:
    """Penalized vector field and its derivatives via the fused tape kernel.

    Holds a packed program [f_1..f_n, potential, psi_1..psi_r] plus scratch
    buffers, so one instance belongs to one integration at a time (the public
    methods return copies; the buffers are reused between calls).
    """

    def __init__(self, spec: DynamicsSpec, gamma: float):
        self.spec = spec
        self.gamma = float(gamma)
        self.log_gamma = math.log(gamma)
        n, m, r = spec.n, spec.m, spec.S.r
        fields = list(spec.f) + [spec.phi] + list(spec.S.psi)
        codes = [f.code for f in fields]
        consts = [f.consts for f in fields]
        self.code = np.ascontiguousarray(np.concatenate(codes, axis=0), dtype=np.int32)
        self.consts = np.ascontiguousarray(
            np.concatenate([c if c.size else np.zeros(0) for c in consts])
        )
        self.code_off = np.zeros(len(fields) + 1, dtype=np.int32)
        self.code_off[1:] = np.cumsum([c.shape[0] for c in codes])
        self.const_off = np.zeros(len(fields) + 1, dtype=np.int32)
        self.const_off[1:] = np.cumsum([c.size for c in consts])
        self._fields = fields
        kmax = max(c.shape[0] for c in codes)
        d = 1 + n + m
        self._val = np.empty(kmax)
        self._grad = np.empty((kmax, d))
        self._hess = np.empty((kmax, n, n))
        self._F = np.empty(n)
        self._J = np.empty((n, n))
        self._B = np.empty((n, m))
        self._Ft = np.empty(n)
        self._xi = np.empty(r)
        self._uz = np.zeros(m)

    def weights(self, psi_vals: np.ndarray) -> np.ndarray:
        """Reaction intensities gamma * e^{gamma psi_i}, overflow-capped."""
        expo = np.minimum(self.gamma * psi_vals + self.log_gamma, _LOG_CAP)
        return np.exp(expo)

    def _call(self, t: float, x, u, order: int):
        spec = self.spec
        x = np.ascontiguousarray(x, dtype=np.float64)
        u = self._uz if u is None else np.ascontiguousarray(u, dtype=np.float64)
        status = backend.penalty_rhs_jac(
            self.code, self.consts, self.code_off, self.const_off,
            spec.n, spec.m, spec.S.r, self.gamma, self.log_gamma, _LOG_CAP,
            float(t), x, u, order,
            self._val, self._grad, self._hess,
            self._F, self._J, self._B, self._Ft, self._xi,
        )
        if status != 0:
            from .exprcore import DomainError, _ERR_KINDS, serialize

            fld = status >> 23
            kind = _ERR_KINDS[(status & ((1 << 23) - 1)) >> 20]
            raise DomainError(kind, serialize(self._fields[fld].ast))

    def rhs(self, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        self._call(t, x, u, 0)
        return self._F.copy()

    def rhs_jac(self, t: float, x: np.ndarray, u: np.ndarray):
        """Returns (F, dF/dx, dF/dt)."""
        self._call(t, x, u, 1)
        return self._F.copy(), self._J.copy(), self._Ft.copy()

    def rhs_jac_full(self, t: float, x: np.ndarray, u: np.ndarray):
        """Returns (F, dF/dx, dF/du)."""
        self._call(t, x, u, 1)
        return self._F.copy(), self._J.copy(), self._B.copy()

    def xi(self, x: np.ndarray) -> np.ndarray:
        self._call(0.0, x, None, 0)
        return self._xi.copy()


# ---------------------------------------------------------------------------
# RODAS3 stepper (L-stable, stiffly accurate, order 3(2))
# ---------------------------------------------------------------------------

_ROS_A = {(2, 1): 0.0, (3, 1): 2.0, (3, 2): 0.0, (4, 1): 2.0, (4, 2): 0.0, (4, 3): 1.0}
_ROS_C = {(2, 1): 4.0, (3, 1): 1.0, (3, 2): -1.0, (4, 1): 1.0, (4, 2): -1.0, (4, 3): -8.0 / 3.0}
_ROS_M = (2.0, 0.0, 1.0, 1.0)
_ROS_E = (0.0, 0.0, 0.0, 1.0)
_ROS_ALPHA = (0.0, 0.0, 1.0, 1.0)
_ROS_GAMMA = (0.5, 1.5, 0.0, 0.0)
_ROS_ELO = 3.0
_ROS_NEWF = (True, False, True, True)
_ROS_S = 4


def _rodas3_step(rhs: Callable, t: float, y: np.ndarray, h: float,
                 F0: np.ndarray, J: np.ndarray, Ft: np.ndarray):
    """One step; returns (y_new, err_vector).  F0, J, Ft evaluated at (t, y)."""
    n = len(y)
    G = np.eye(n) / (h * _ROS_GAMMA[0]) - J
    lu = lu_factor(G)
    K = []
    Fcur = F0
    for i in range(1, _ROS_S + 1):
        if i > 1 and _ROS_NEWF[i - 1]:
            Yi = y.copy()
            for j in range(1, i):
                Yi += _ROS_A[(i, j)] * K[j - 1]
            Fcur = rhs(t + _ROS_ALPHA[i - 1] * h, Yi)
        rhs_i = Fcur.copy()
        for j in range(1, i):
            rhs_i += (_ROS_C[(i, j)] / h) * K[j - 1]
        rhs_i += (h * _ROS_GAMMA[i - 1]) * Ft
        K.append(lu_solve(lu, rhs_i))
    y_new = y.copy()
    err = np.zeros(n)
    for j in range(_ROS_S):
        y_new += _ROS_M[j] * K[j]
        err += _ROS_E[j] * K[j]
    return y_new, err


def _error_norm(y0, y1, err, atol, rtol):
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return max(float(np.sqrt(np.mean((err / scale) ** 2))), 1e-10)


def _integrate_cell_adaptive(rhs, jac, t0, t1, y, opts: IntegratorOptions, T: float):
    """Adaptive RODAS3 from t0 to t1; returns (y_end, accepted_steps)."""
    t = t0
    h = (t1 - t0) * 0.25
    h_min = max(T, 1e-300) * opts.h_min_frac
    accepted = 0
    rejected_last = False
    for _ in range(opts.max_steps_per_cell):
        if t >= t1 - 1e-15 * max(1.0, abs(t1)):
            return y, accepted
        h = min(h, t1 - t)
        if h < h_min:
            raise StepFailure(t)
        F0, J, Ft = jac(t, y)
        if not np.all(np.isfinite(F0)) or not np.all(np.isfinite(J)):
            raise StepFailure(t, "(non-finite right-hand side)")
        y_new, err = _rodas3_step(rhs, t, y, h, F0, J, Ft)
        enorm = _error_norm(y, y_new, err, opts.atol, opts.rtol)
        fac = min(6.0, max(0.2, 0.9 * enorm ** (-1.0 / _ROS_ELO)))
        if enorm <= 1.0 and np.all(np.isfinite(y_new)):
            t += h
            y = y_new
            accepted += 1
            if rejected_last:
                fac = min(fac, 1.0)
            rejected_last = False
            h = h * fac
        else:
            rejected_last = True
            h = h * min(fac, 0.5) if np.all(np.isfinite(y_new)) else h * 0.1
    raise StepFailure(t, "(step budget exhausted)")


# ---------------------------------------------------------------------------
# Public integrators
# ---------------------------------------------------------------------------

def default_inv_tol(spec: DynamicsSpec) -> float:
    bound = 2.0 * spec.drift_bound / spec.S.normal_gap
    return 1e-6 * (1.0 + bound)


def integrate_penalized(spec: DynamicsSpec, gamma: float, x0, u: ControlSignal,
                        opts: Optional[IntegratorOptions] = None) -> Trajectory:
    """Integrate the penalized system on the control grid.

    Requires gamma > 2*drift_bound/normal_gap and a start inside the smoothed
    set.  The smoothed constraint value is asserted nonpositive (up to the
    invariance tolerance) at every grid node; a violation raises rather than
    being clipped.
    """
    opts = opts or IntegratorOptions()
    S = spec.S
    gmin = 2.0 * spec.drift_bound / S.normal_gap
    if gamma <= gmin:
        raise ValueError(
            f"gamma = {gamma:.6g} must exceed 2*drift_bound/normal_gap = {gmin:.6g}"
        )
    x0 = np.asarray(x0, dtype=float)
    start_val = psi_gamma_value(S, gamma, x0)
    inv_tol = opts.inv_tol if opts.inv_tol is not None else default_inv_tol(spec)
    if start_val > inv_tol:
        raise ValueError(
            f"start is outside the smoothed set (smoothed value {start_val:.3g})"
        )
    force = PenaltyForce(spec, gamma)
    grid = u.grid
    N = u.ncells
    states = np.empty((N + 1, spec.n))
    states[0] = x0
    substeps = []
    y = x0.copy()
    for j in range(N):
        uj = u.values[j]
        rhs = lambda t, x: force.rhs(t, x, uj)
        jac = lambda t, x: force.rhs_jac(t, x, uj)
        y, acc = _integrate_cell_adaptive(rhs, jac, grid[j], grid[j + 1], y, opts, spec.T)
        substeps.append(acc)
        states[j + 1] = y
    xis = np.empty((N + 1, S.r))
    margin = -math.inf
    threshold = -opts.shrunk_margin if opts.shrunk_margin is not None else 0.0
    worst_t = 0.0
    for j in range(N + 1):
        xis[j] = force.xi(states[j])
        v = psi_gamma_value(S, gamma, states[j])
        if v - threshold > margin:
            margin = v - threshold
            worst_t = grid[j]
    if opts.check_invariance and margin > inv_tol:
        raise InvarianceViolation(worst_t, margin + threshold)
    return Trajectory(
        grid=grid.copy(),
        states=states,
        xis=xis,
        diagnostics={
            "gamma": gamma,
            "substeps": substeps,
            "max_xi": float(np.max(xis)) if xis.size else 0.0,
            "invariance_margin": margin,
        },
    )


def integrate_catching_up(spec: DynamicsSpec, x0, u: ControlSignal,
                          N_sub: Optional[int] = None,
                          feas_tol: float = 1e-9) -> Trajectory:
    """Projected explicit scheme: drift step then projection onto the set.

    Multipliers are the projection's KKT coefficients divided by the step, the
    discrete counterpart of the reaction intensities.  Independent of the
    penalty machinery; used as the oracle for convergence studies.
    """
    S = spec.S
    x0 = np.asarray(x0, dtype=float)
    if psi_max(S, x0) > feas_tol:
        raise ValueError("start must lie in the set")
    if N_sub is None or N_sub == u.ncells:
        grid = u.grid
        N = u.ncells
    else:
        grid = np.linspace(0.0, spec.T, N_sub + 1)
        N = N_sub
    states = np.empty((N + 1, spec.n))
    xis = np.zeros((N + 1, S.r))
    states[0] = x0
    y = x0.copy()
    for j in range(N):
        h = grid[j + 1] - grid[j]
        uj = u.at(grid[j])
        pred = y + h * spec.drift(grid[j], y, uj)
        try:
            y, lam = project_onto_C(S, pred, tol=1e-12, return_multipliers=True)
        except Exception as exc:
            raise ProjectionFailure(grid[j]) from exc
        states[j + 1] = y
        xis[j + 1] = lam / h
    return Trajectory(grid=grid.copy(), states=states, xis=xis,
                      diagnostics={"scheme": "catching-up"})


def compare_to_oracle(pen: Trajectory, oracle: Trajectory):
    """(sup, L2) distances between two state paths on the same grid."""
    if pen.grid.shape != oracle.grid.shape or not np.allclose(pen.grid, oracle.grid):
        raise GridMismatch("trajectories live on different grids")
    diff = np.linalg.norm(pen.states - oracle.states, axis=1)
    sup = float(np.max(diff))
    if len(pen.grid) > 1:
        l2 = float(np.sqrt(np.trapezoid(diff**2, pen.grid)))
    else:
        l2 = 0.0
    return sup, l2


def interior_start(S: SweepingSet, sched: PenaltySchedule, k: int, c,
                   minimal: bool = True) -> np.ndarray:
    """Start point strictly inside the shrunk smoothed set near c.

    A point already deep enough is returned unchanged.  A boundary point is
    shifted along the interior direction; with ``minimal`` the smallest
    sufficient multiple of the nominal shift is used (the nominal shift is a
    worst-case bound and typically far larger than needed).
    """
    c = np.asarray(c, dtype=float)
    if level_membership(S, sched, k, c) == Membership.INSIDE_SHRUNK:
        return c.copy()
    gamma = sched.gammas[k]
    target = -sched.margin(k)
    if abs(psi_max(S, c)) <= 1e-7:
        d = interior_direction(S, c, a=1e-7, check_bounds=False)
    else:
        from .sweepset import psi_gamma as _pg

        _, g = _pg(S, gamma, c)
        d = -g
    nd = float(np.linalg.norm(d))
    if nd == 0.0:
        raise RuntimeError("no interior direction available at the start point")
    dhat = d / nd
    sigma = sched.interior_shift(k)
    scales = [1.0 / 64, 1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0 / 2, 1.0, 2.0, 4.0, 8.0]
    if not minimal:
        scales = [1.0, 2.0, 4.0, 8.0]
    for s in scales:
        cand = c + (s * sigma) * dhat
        if psi_gamma_value(S, gamma, cand) <= target:
            return cand
    raise RuntimeError(
        "could not reach the shrunk set; constants are likely inconsistent"
    )


# ---------------------------------------------------------------------------
# Adjoint integration and measure recovery
# ---------------------------------------------------------------------------

class AdjointField:
    """Coefficient matrix A(t) of the linear costate equation dp/dt = A p + lam*omega.

    With J(u) the state Jacobian of the penalized field, the drift matrix of
    the costate is A = -[beta J(u) + (1-beta) J(u_ref)]^T: the curvature and
    rank-one penalty blocks of J are symmetric, so transposing flips only the
    perturbation Jacobian.
    """

    def __init__(self, spec: DynamicsSpec, gamma: float, traj: Trajectory,
                 u: ControlSignal, u_ref: ControlSignal, beta: float):
        self.spec = spec
        self.traj = traj
        self.u = u
        self.u_ref = u_ref
        self.beta = float(beta)
        self.force = PenaltyForce(spec, gamma)

    def matrix(self, t: float) -> np.ndarray:
        x = self.traj.state_at(t)
        _, J, _ = self.force.rhs_jac(t, x, self.u.at(t))
        if self.beta < 1.0:
            _, Jr, _ = self.force.rhs_jac(t, x, self.u_ref.at(t))
            J = self.beta * J + (1.0 - self.beta) * Jr
        return -J.T


def integrate_adjoint(spec: DynamicsSpec, gamma: float, traj: Trajectory,
                      u: ControlSignal, u_ref: Optional[ControlSignal] = None,
                      beta: float = 1.0, lam: float = 0.0,
                      omega: Optional[np.ndarray] = None, pT=None,
                      opts: Optional[IntegratorOptions] = None):
    """Backward integration of the costate equation along a trajectory.

    omega is sampled on the trajectory grid ((N+1, n), linearly interpolated);
    pT is the terminal costate.  Returns (p, densities) on the grid, where
    densities[:, i] = gamma * xi_i(t) * <grad psi_i(x(t)), p(t)>.
    """
    opts = opts or IntegratorOptions()
    if u_ref is None:
        u_ref = u
    n = spec.n
    grid = traj.grid
    N = len(grid) - 1
    pT = np.zeros(n) if pT is None else np.asarray(pT, dtype=float)
    if omega is None:
        omega = np.zeros((N + 1, n))
    omega = np.asarray(omega, dtype=float)
    field_A = AdjointField(spec, gamma, traj, u, u_ref, beta)

    def omega_at(t: float) -> np.ndarray:
        if N == 0:
            return omega[0]
        tt = min(max(t, grid[0]), grid[-1])
        j = min(int(np.searchsorted(grid, tt, side="right") - 1), N - 1)
        w = (tt - grid[j]) / (grid[j + 1] - grid[j])
        return (1.0 - w) * omega[j] + w * omega[j + 1]

    T = grid[-1]

    # backward variable q(tau) = p(T - tau) so the stiff mode is decaying
    def rhs(tau, q):
        t = T - tau
        return -(field_A.matrix(t) @ q) - lam * omega_at(t)

    def jac(tau, q):
        t = T - tau
        A = field_A.matrix(t)
        F = -(A @ q) - lam * omega_at(t)
        # time derivative of the coefficient field is not available in closed
        # form; omit it (order drops, error control compensates)
        return F, -A, np.zeros(n)

    p = np.empty((N + 1, n))
    p[N] = pT
    q = pT.copy()
    for j in range(N, 0, -1):
        tau0 = T - grid[j]
        tau1 = T - grid[j - 1]
        q, _ = _integrate_cell_adaptive(rhs, jac, tau0, tau1, q, opts, spec.T)
        p[j - 1] = q
    densities = adjoint_densities(spec, gamma, traj, p)
    return p, densities


def adjoint_densities(spec: DynamicsSpec, gamma: float, traj: Trajectory,
                      p: np.ndarray) -> np.ndarray:
    """Measure densities gamma * xi_i(t_j) * <grad psi_i(x_j), p_j> on the grid."""
    N = len(traj.grid) - 1
    r = spec.S.r
    out = np.empty((N + 1, r))
    for j in range(N + 1):
        x = traj.states[j]
        for i, c in enumerate(spec.S.psi):
            g = c.grad_x(0.0, x)
            out[j, i] = gamma * traj.xis[j, i] * float(g @ p[j])
    return out


# ---------------------------------------------------------------------------
# Measures: absolutely continuous part plus atoms
# ---------------------------------------------------------------------------

@dataclass
class AdjointMeasure:
    """Signed measure as a grid density plus finitely many atoms (time, weight).

    windows records the node spans the atom detector collapsed (metadata for
    consumers that post-process the companion costate path).
    """

    grid: np.ndarray
    density: np.ndarray
    atoms: list
    windows: list = field(default_factory=list)

    def total_mass(self) -> float:
        ac = float(np.trapezoid(self.density, self.grid)) if len(self.grid) > 1 else 0.0
        return ac + sum(w for _, w in self.atoms)

    def total_variation(self) -> float:
        ac = float(np.trapezoid(np.abs(self.density), self.grid)) if len(self.grid) > 1 else 0.0
        return ac + sum(abs(w) for _, w in self.atoms)


def _trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    w = np.zeros(len(grid))
    if len(grid) > 1:
        dt = np.diff(grid)
        w[:-1] += 0.5 * dt
        w[1:] += 0.5 * dt
    return w


def accumulate_measures(nu_densities: np.ndarray, grid: np.ndarray,
                        atom_thresh: float = 0.05,
                        spike_thresh: float = 10.0) -> list[AdjointMeasure]:
    """Split raw measure densities into smooth parts and detected atoms.

    A cluster of consecutive nodes whose density magnitude exceeds
    spike_thresh times the median magnitude is collapsed into an atom when its
    integral exceeds atom_thresh times the total variation.  The atom weight
    is the cluster integral minus the interpolated baseline; its location is
    the density-weighted centroid, snapped to the grid edge when the cluster
    touches it (junction spikes sharpen toward the edge as the penalty grows).
    """
    grid = np.asarray(grid, dtype=float)
    dens = np.asarray(nu_densities, dtype=float)
    if dens.ndim == 1:
        dens = dens[:, None]
    out = []
    w = _trapezoid_weights(grid)
    for i in range(dens.shape[1]):
        rho = dens[:, i].copy()
        mag = np.abs(rho)
        tv = float(np.sum(mag * w))
        med = float(np.median(mag))
        spike = mag > spike_thresh * med if med > 0 else mag > 0
        atoms = []
        windows = []
        ac = rho.copy()
        j = 0
        Nn = len(grid)
        while j < Nn:
            if not spike[j]:
                j += 1
                continue
            k = j
            while k + 1 < Nn and spike[k + 1]:
                k += 1
            # baseline across the cluster from the nearest calm neighbors
            jl = j - 1 if j > 0 else None
            kr = k + 1 if k + 1 < Nn else None
            cluster = slice(j, k + 1)
            base = np.zeros(k - j + 1)
            if jl is not None and kr is not None:
                base = np.interp(grid[cluster], [grid[jl], grid[kr]], [rho[jl], rho[kr]])
            elif jl is not None:
                base[:] = rho[jl]
            elif kr is not None:
                base[:] = rho[kr]
            weight = float(np.sum((rho[cluster] - base) * w[cluster]))
            if abs(weight) > atom_thresh * tv and tv > 0:
                mass = np.abs(rho[cluster] - base) * w[cluster]
                if j == 0:
                    t_atom = float(grid[0])
                elif k == Nn - 1:
                    t_atom = float(grid[-1])
                elif float(np.sum(mass)) > 0:
                    t_atom = float(np.sum(grid[cluster] * mass) / np.sum(mass))
                else:
                    t_atom = float(0.5 * (grid[j] + grid[k]))
                atoms.append((t_atom, weight))
                windows.append((j, k))
                ac[cluster] = base
            j = k + 1
        out.append(AdjointMeasure(grid=grid.copy(), density=ac, atoms=atoms,
                                  windows=windows))
    return out


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------

def trajectory_to_csv(traj: Trajectory, u: Optional[ControlSignal] = None) -> str:
    n, r = traj.n, traj.r
    m = u.m if u is not None else 0
    header = ["t"] + [f"x{i+1}" for i in range(n)] + [f"u{j+1}" for j in range(m)] \
        + [f"xi{i+1}" for i in range(r)]
    lines = [",".join(header)]
    for j, t in enumerate(traj.grid):
        row = [f"{t:.17g}"] + [f"{v:.17g}" for v in traj.states[j]]
        if u is not None:
            uj = u.values[min(j, u.ncells - 1)] if u.ncells > 0 else np.zeros(m)
            row += [f"{v:.17g}" for v in uj]
        row += [f"{v:.17g}" for v in traj.xis[j]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def adjoint_to_csv(grid: np.ndarray, p: np.ndarray, densities: np.ndarray) -> str:
    n = p.shape[1]
    r = densities.shape[1]
    header = ["t"] + [f"p{i+1}" for i in range(n)] + [f"nu{i+1}_density" for i in range(r)]
    lines = [",".join(header)]
    for j, t in enumerate(grid):
        row = [f"{t:.17g}"] + [f"{v:.17g}" for v in p[j]] + [f"{v:.17g}" for v in densities[j]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def atoms_to_json(measures: Sequence[AdjointMeasure]) -> str:
    payload = [
        {"i": i + 1, "t": t, "weight": w}
        for i, msr in enumerate(measures)
        for (t, w) in msr.atoms
    ]
    return json.dumps(payload, indent=2)
