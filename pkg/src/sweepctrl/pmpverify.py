"""Grid-resolution checks of the first-order optimality (maximum principle)
conditions for a candidate solution of the sweeping optimal control problem.

A certificate bundles the candidate trajectory and control with the adjoint
path (bounded variation: samples plus recorded jumps), the per-constraint
reaction measures (density plus atoms), the reaction intensities, and the
cost multiplier.  Each condition is checked numerically and reported as a
scalar residual against a documented tolerance; the verdict certifies
"consistent with the optimality system at this resolution", never a proof.

Pointwise (almost-everywhere) conditions are evaluated at grid nodes,
excluding the nodes adjacent to a recorded adjoint jump: the underlying
conditions hold up to measure zero and genuinely fail at a jump instant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import nnls

from .dynamics import AdjointMeasure, ControlSignal, GridMismatch
from .exprcore import ScalarField
from .sweepset import SweepingSet

__all__ = [
    "PmpCertificate",
    "ResidualReport",
    "DEFAULT_TOLERANCES",
    "UnsupportedSetDescriptor",
    "check_primal",
    "check_adjoint",
    "check_slackness",
    "check_transversality_and_max",
    "verify_certificate",
]

DEFAULT_TOLERANCES = {
    "primal_dynamics": 5e-3,
    "nontriviality": 1e-6,
    "adjoint": 1e-2,
    "slack_a": 1e-6,
    "slack_b": 1e-3,
    "transversality": 1e-6,
    "maximization": 1e-6,
}

DEFAULT_ACTIVE_TOL = 1e-6


class UnsupportedSetDescriptor(ValueError):
    pass


@dataclass
class PmpCertificate:
    """Candidate (x, u, p, measures, intensities, lambda) on a uniform grid.

    p samples are right-continuous between the recorded jumps; every jump the
    path takes must be listed in p_jumps (finite differences cannot localize
    them reliably).  active_tol optionally overrides the activity threshold
    the checks classify arcs with; solver-produced certificates set it to the
    resolution of their final penalty strength.
    """

    grid: np.ndarray
    x: np.ndarray               # (N+1, n)
    u: np.ndarray               # (N, m)
    p: np.ndarray               # (N+1, n)
    p_jumps: list               # [(t, dp array)]
    nus: list                   # r AdjointMeasure
    xis: np.ndarray             # (N+1, r)
    lam: float
    active_tol: Optional[float] = None

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def r(self) -> int:
        return self.xis.shape[1]

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "grid": self.grid.tolist(),
            "x": self.x.tolist(),
            "u": self.u.tolist(),
            "p": self.p.tolist(),
            "p_jumps": [{"t": float(t), "dp": np.asarray(dp).tolist()} for t, dp in self.p_jumps],
            "nu": [
                {"density": msr.density.tolist(),
                 "atoms": [{"t": float(t), "w": float(w)} for t, w in msr.atoms]}
                for msr in self.nus
            ],
            "xi": [self.xis[:, i].tolist() for i in range(self.r)],
            "lambda": float(self.lam),
            **({"active_tol": float(self.active_tol)} if self.active_tol is not None else {}),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PmpCertificate":
        required = ["grid", "x", "u", "p", "nu", "xi", "lambda"]
        missing = [k for k in required if k not in d]
        if missing:
            raise KeyError(f"certificate missing keys: {missing}")
        grid = np.asarray(d["grid"], dtype=float)
        xi_lists = d["xi"]
        xis = np.stack([np.asarray(col, dtype=float) for col in xi_lists], axis=1)
        nus = [
            AdjointMeasure(
                grid=grid.copy(),
                density=np.asarray(entry["density"], dtype=float),
                atoms=[(float(a["t"]), float(a["w"])) for a in entry.get("atoms", [])],
            )
            for entry in d["nu"]
        ]
        return cls(
            grid=grid,
            x=np.asarray(d["x"], dtype=float),
            u=np.asarray(d["u"], dtype=float),
            p=np.asarray(d["p"], dtype=float),
            p_jumps=[(float(e["t"]), np.asarray(e["dp"], dtype=float))
                     for e in d.get("p_jumps", [])],
            nus=nus,
            xis=xis,
            lam=float(d["lambda"]),
            active_tol=float(d["active_tol"]) if "active_tol" in d else None,
        )


@dataclass
class ResidualReport:
    residuals: dict
    tolerances: dict
    passes: dict = field(default_factory=dict)
    overall: bool = False

    def finalize(self) -> "ResidualReport":
        self.passes = {k: bool(self.residuals[k] <= self.tolerances[k]) for k in self.residuals}
        self.overall = all(self.passes.values())
        return self

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "residuals": {k: float(v) for k, v in self.residuals.items()},
            "tolerances": {k: float(v) for k, v in self.tolerances.items()},
            "passes": self.passes,
            "overall": self.overall,
        }

    def summary(self) -> str:
        lines = []
        for k in self.residuals:
            status = "pass" if self.passes.get(k) else "FAIL"
            lines.append(f"{k:16s} {self.residuals[k]:12.4e}  tol {self.tolerances[k]:8.1e}  {status}")
        lines.append(f"{'overall':16s} {'pass' if self.overall else 'FAIL'}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _node_control(cert: PmpCertificate, j: int) -> np.ndarray:
    return cert.u[min(j, cert.u.shape[0] - 1)]


def _jump_cell(grid: np.ndarray, t: float) -> int:
    N = len(grid) - 1
    j = int(np.searchsorted(grid, t, side="right")) - 1
    return min(max(j, 0), N - 1)


def _excluded_nodes(cert: PmpCertificate) -> np.ndarray:
    """Nodes adjacent to a recorded jump (a.e. conditions skip them)."""
    mask = np.zeros(len(cert.grid), dtype=bool)
    if len(cert.grid) < 2:
        return mask
    h = cert.grid[1] - cert.grid[0]
    for t, _ in cert.p_jumps:
        mask |= np.abs(cert.grid - t) <= 1.5 * h
    return mask


def _reaction_rhs(prob, cert: PmpCertificate, j: int) -> np.ndarray:
    """f - grad Phi - sum_i xi_i grad psi_i at node j."""
    spec = prob.spec
    t = cert.grid[j]
    xj = cert.x[j]
    uj = _node_control(cert, j)
    out = np.array([c.value(t, xj, uj) for c in spec.f])
    out -= spec.phi.grad_x(t, xj)
    for i, c in enumerate(spec.S.psi):
        out -= cert.xis[j, i] * c.grad_x(t, xj)
    return out


# ---------------------------------------------------------------------------
# condition checks
# ---------------------------------------------------------------------------

def check_primal(cert: PmpCertificate, prob) -> float:
    """Dynamics defect by central differences plus feasibility excess."""
    grid = cert.grid
    N = len(grid) - 1
    if cert.x.shape[0] != N + 1:
        raise GridMismatch("state samples do not match the grid")
    res = 0.0
    for j in range(1, N):
        h2 = grid[j + 1] - grid[j - 1]
        xdot = (cert.x[j + 1] - cert.x[j - 1]) / h2
        res = max(res, float(np.linalg.norm(xdot - _reaction_rhs(prob, cert, j))))
    feas = 0.0
    for j in range(N + 1):
        vals = prob.spec.S.values(cert.x[j])
        feas = max(feas, float(np.max(vals)))
    return res + max(feas, 0.0)


def _dictionary(cert: PmpCertificate, seed: int, n_bumps: int = 16):
    """Test functions sampled on the grid, sup-normalized."""
    grid = cert.grid
    n = cert.n
    T = grid[-1] if grid[-1] > 0 else 1.0
    zs = []
    for q in range(4):
        base = (grid / T) ** q
        for j in range(n):
            z = np.zeros((len(grid), n))
            z[:, j] = base
            zs.append(z)
    rng = np.random.default_rng(seed)
    for _ in range(n_bumps):
        z = np.zeros((len(grid), n))
        for _ in range(3):
            j = int(rng.integers(0, n))
            tau = rng.uniform(0.0, T)
            width = rng.uniform(T / 20.0, T / 4.0)
            amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
            z[:, j] += amp * np.exp(-(((grid - tau) / width) ** 2))
        peak = float(np.max(np.abs(z)))
        if peak > 0:
            z /= peak
        zs.append(z)
    return zs


def _z_at(grid: np.ndarray, z: np.ndarray, t: float) -> np.ndarray:
    if t <= grid[0]:
        return z[0]
    if t >= grid[-1]:
        return z[-1]
    j = int(np.searchsorted(grid, t, side="right")) - 1
    w = (t - grid[j]) / (grid[j + 1] - grid[j])
    return (1.0 - w) * z[j] + w * z[j + 1]


def check_adjoint(cert: PmpCertificate, prob, seed: int = 0, n_bumps: int = 16) -> float:
    """Weak-form defect of the measure-driven adjoint identity.

    For each test function z the Riemann-Stieltjes integral of z against dp
    (absolutely continuous increments plus recorded jumps) is compared with
    the drift, curvature and reaction-measure terms; the residual is the
    worst mismatch relative to the total-variation scale of p.
    """
    grid = cert.grid
    N = len(grid) - 1
    n = cert.n
    spec = prob.spec
    if N < 1:
        return 0.0

    # AC increments: strip recorded jumps out of their cells
    dp_cells = np.diff(cert.p, axis=0)
    jump_by_cell = np.zeros_like(dp_cells)
    for t, dp in cert.p_jumps:
        jump_by_cell[_jump_cell(grid, t)] += dp
    dp_ac = dp_cells - jump_by_cell

    tv = float(np.sum(np.linalg.norm(dp_ac, axis=1)))
    tv += sum(float(np.linalg.norm(dp)) for _, dp in cert.p_jumps)
    scale = 1.0 + tv

    # node coefficients for the right-hand side
    coeff = np.empty((N + 1, n))       # (theta - zeta^T) p
    react = np.empty((N + 1, cert.r, n))  # xi_i * (vartheta_i p)
    gradpsi = np.empty((N + 1, cert.r, n))
    for j in range(N + 1):
        t = grid[j]
        xj = cert.x[j]
        uj = _node_control(cert, j)
        zeta = np.empty((n, n))
        for i, c in enumerate(spec.f):
            _, g, _ = c.eval_full(t, xj, uj, 1)
            zeta[i, :] = g[1 : 1 + n]
        _, _, theta = spec.phi.eval_full(t, xj, None, 2)
        coeff[j] = (theta - zeta.T) @ cert.p[j]
        for i, c in enumerate(spec.S.psi):
            _, g, h = c.eval_full(t, xj, None, 2)
            gradpsi[j, i] = g[1 : 1 + n]
            react[j, i] = cert.xis[j, i] * (h @ cert.p[j])

    w = np.zeros(N + 1)
    dt = np.diff(grid)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt

    # atoms: grad psi_i at the interpolated state, fixed per atom
    atom_terms = []
    for i in range(cert.r):
        for t, wt in cert.nus[i].atoms:
            x_at = _z_at(grid, cert.x, t)
            atom_terms.append((t, wt, spec.S.psi[i].grad_x(float(t), x_at)))

    worst = 0.0
    for z in _dictionary(cert, seed, n_bumps):
        zmid = 0.5 * (z[:-1] + z[1:])
        lhs = float(np.sum(zmid * dp_ac))
        for t, dp in cert.p_jumps:
            lhs += float(_z_at(grid, z, t) @ np.asarray(dp))
        rhs = float(np.sum(w[:, None] * z * coeff))
        for i in range(cert.r):
            rhs += float(np.sum(w[:, None] * z * react[:, i, :]))
            msr = cert.nus[i]
            rhs += float(np.sum(w * np.sum(z * gradpsi[:, i, :], axis=1) * msr.density))
        for t, wt, gpsi in atom_terms:
            rhs += wt * float(_z_at(grid, z, t) @ gpsi)
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst


def check_slackness(cert: PmpCertificate, prob, active_tol: Optional[float] = None):
    """Support and orthogonality of the reaction intensities.

    res_a: largest intensity on an arc where the constraint is inactive
    (strictly below -active_tol).  res_b: largest |xi_i <grad psi_i, p>| over
    nodes away from recorded jumps.
    """
    a = active_tol if active_tol is not None else (cert.active_tol or DEFAULT_ACTIVE_TOL)
    S: SweepingSet = prob.spec.S
    grid = cert.grid
    N = len(grid) - 1
    excluded = _excluded_nodes(cert)
    res_a = 0.0
    res_b = 0.0
    for j in range(N + 1):
        vals, grads = S.values_grads(cert.x[j])
        for i in range(S.r):
            if vals[i] < -a:
                res_a = max(res_a, float(cert.xis[j, i]))
            if not excluded[j]:
                res_b = max(res_b, abs(float(cert.xis[j, i] * (grads[i] @ cert.p[j]))))
    return res_a, res_b


def _terminal_normal_residual(descriptor, x_end: np.ndarray, v: np.ndarray,
                              S_end=None) -> float:
    """Distance from v to the normal cone of the endpoint set at x_end."""
    kind = descriptor[0]
    if kind == "point":
        return 0.0  # normal cone is the whole space
    if kind == "all":
        return float(np.linalg.norm(v))
    if kind == "affine":
        a = np.asarray(descriptor[1], dtype=float)
        alpha = float(v @ a) / float(a @ a)
        return float(np.linalg.norm(v - alpha * a))
    if kind == "sublevel":
        Ssub: SweepingSet = descriptor[1]
        idx = Ssub.active_indices(x_end, a=1e-6, tol=1e-6)
        if not idx:
            return float(np.linalg.norm(v))  # interior: normal cone is {0}
        _, grads = Ssub.values_grads(x_end)
        G = grads[idx].T
        lam, rnorm = nnls(G, v)
        return float(rnorm)
    raise UnsupportedSetDescriptor(f"unsupported endpoint set {kind!r}")


def check_transversality_and_max(cert: PmpCertificate, prob,
                                 n_control_samples: int = 33):
    """Endpoint condition, Hamiltonian maximization, and nontriviality.

    res_tv: least-squares distance of (p(0), -p(T)) to
    lambda * grad g + normal cones of the endpoint sets.
    res_max: worst gap between the sampled Hamiltonian maximum over the
    control box and its value at the candidate control.
    res_nontriv: |  ||p(T)|| + lambda - 1 |, or |lambda - 1| in the
    free-endpoint mode.
    """
    spec = prob.spec
    n = cert.n
    grid = cert.grid
    N = len(grid) - 1
    x0 = cert.x[0]
    xT = cert.x[-1]
    xfull = np.concatenate([x0, xT])
    _, ggrad, _ = prob.g.eval_full(0.0, xfull, None, 1)
    g0 = ggrad[1 : 1 + n]
    gT = ggrad[1 + n : 1 + 2 * n]
    v0 = cert.p[0] - cert.lam * g0
    vT = -cert.p[-1] - cert.lam * gT
    res_tv = math.hypot(
        _terminal_normal_residual(prob.C0, x0, v0),
        _terminal_normal_residual(prob.CT, xT, vT),
    )

    if prob.CT[0] == "all":
        res_nontriv = abs(cert.lam - 1.0)
    else:
        res_nontriv = abs(float(np.linalg.norm(cert.p[-1])) + cert.lam - 1.0)

    lo, hi = np.asarray(prob.U[0], dtype=float), np.asarray(prob.U[1], dtype=float)
    m = len(lo)
    per_dim = n_control_samples if m == 1 else max(5, int(round(n_control_samples ** (1.0 / m))))
    axes = [np.linspace(lo[k], hi[k], per_dim) for k in range(m)]
    mesh = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    works = [c.workspace(0) for c in spec.f]
    res_max = 0.0
    for j in range(N + 1):
        t = grid[j]
        xj = cert.x[j]
        uj = _node_control(cert, j)
        pj = cert.p[j]
        h_cand = sum(
            spec.f[i].eval_full(t, xj, uj, 0, works[i])[0] * pj[i] for i in range(n)
        )
        best = -math.inf
        for us in mesh:
            hv = sum(
                spec.f[i].eval_full(t, xj, us, 0, works[i])[0] * pj[i] for i in range(n)
            )
            best = max(best, hv)
        res_max = max(res_max, best - h_cand)
    return res_tv, max(res_max, 0.0), res_nontriv


def verify_certificate(cert: PmpCertificate, prob, tolerances: Optional[dict] = None,
                       seed: int = 0, active_tol: Optional[float] = None) -> ResidualReport:
    """Run every condition; overall pass iff each residual is within tolerance."""
    tol = dict(DEFAULT_TOLERANCES)
    if tolerances:
        tol.update(tolerances)
    res_primal = check_primal(cert, prob)
    res_adj = check_adjoint(cert, prob, seed=seed)
    res_a, res_b = check_slackness(cert, prob, active_tol=active_tol)
    res_tv, res_max, res_nontriv = check_transversality_and_max(cert, prob)
    report = ResidualReport(
        residuals={
            "primal_dynamics": res_primal,
            "nontriviality": res_nontriv,
            "adjoint": res_adj,
            "slack_a": res_a,
            "slack_b": res_b,
            "transversality": res_tv,
            "maximization": res_max,
        },
        tolerances=tol,
    )
    return report.finalize()
