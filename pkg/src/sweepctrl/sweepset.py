"""Geometry of a sweeping set given as an intersection of smooth sublevel sets.

The set is ``C = {x : psi_i(x) <= 0, i = 1..r}``.  This module provides the
log-sum-exp smoothed membership function and its level sets, normal-cone
queries, Euclidean projection, the interior-direction construction used to
start trajectories strictly inside the shrunk smoothed sets, verifiable
surrogates of the regularity assumptions (sampled, never a proof), and the
quadratic ball augmentation that compactifies an unbounded set.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import nnls

from .exprcore import ExprAst, Node, ScalarField, parse_expression, serialize

__all__ = [
    "SweepingSet",
    "PenaltySchedule",
    "ActiveSet",
    "Membership",
    "psi_max",
    "psi_gamma",
    "level_membership",
    "normal_cone_rays",
    "check_A22",
    "check_A23",
    "interior_direction",
    "augment_with_ball",
    "project_onto_C",
    "min_norm_point",
    "boundary_samples",
    "NoBoundarySamples",
    "EmptyActiveSet",
    "NotOnBoundary",
    "DegenerateCone",
    "NoConvergence",
]

FEAS_TOL = 1e-9

# exponent cap keeping gamma*psi finite through exp(); forces stay huge but
# representable when an iterate momentarily leaves the smoothed set
EXP_CAP = 500.0


class NoBoundarySamples(RuntimeError):
    pass


class EmptyActiveSet(RuntimeError):
    pass


class NotOnBoundary(RuntimeError):
    pass


class DegenerateCone(RuntimeError):
    """Interior-direction bounds failed; the min-norm gap assumption is violated."""


class NoConvergence(RuntimeError):
    def __init__(self, iters: int, detail: str = ""):
        self.iters = iters
        super().__init__(f"projection did not converge in {iters} iterations {detail}")


class Membership(enum.Enum):
    INSIDE_SHRUNK = "InCk"        # smoothed value <= -margin(k)
    INSIDE_SMOOTHED = "InCgamma"  # smoothed value <= 0
    INSIDE = "InC"                # max constraint <= 0
    OUTSIDE = "Outside"


@dataclass(frozen=True)
class SweepingSet:
    """Intersection of sublevel sets with its sampled regularity constants.

    normal_gap: lower bound (halved min-norm estimate) on convex combinations
        of active constraint gradients on the boundary.
    grad_bound: upper bound on ||grad psi_i|| over the working region,
        normalized to be at least twice normal_gap.
    smooth_margin: radius within which the constraint fields are assumed C^1,1.
    """

    psi: tuple[ScalarField, ...]
    n: int
    normal_gap: float = 0.5
    grad_bound: float = 1.0
    smooth_margin: float = 1.0

    def __post_init__(self):
        if len(self.psi) < 1:
            raise ValueError("at least one constraint field is required")
        for f in self.psi:
            if f.n != self.n or f.m != 0:
                raise ValueError("constraint fields must be functions of the state only")
            if not f.smooth:
                raise ValueError("max2 is not allowed inside constraint fields")
        if self.normal_gap <= 0 or self.smooth_margin <= 0:
            raise ValueError("normal_gap and smooth_margin must be positive")
        if self.grad_bound < 2 * self.normal_gap:
            object.__setattr__(self, "grad_bound", 2 * self.normal_gap)

    @property
    def r(self) -> int:
        return len(self.psi)

    @classmethod
    def from_expressions(cls, exprs: Sequence[str], n: int, **kw) -> "SweepingSet":
        return cls(tuple(ScalarField.parse(e, n, 0, smooth_required=True) for e in exprs), n, **kw)

    def values(self, x) -> np.ndarray:
        return np.array([f.value(0.0, x) for f in self.psi])

    def values_grads(self, x):
        vals = np.empty(self.r)
        grads = np.empty((self.r, self.n))
        for i, f in enumerate(self.psi):
            vals[i], grads[i] = f.value_grad_x(0.0, x)
        return vals, grads

    def hessians(self, x) -> np.ndarray:
        return np.array([f.eval_full(0.0, x, order=2)[2] for f in self.psi])

    def contains(self, x, tol: float = FEAS_TOL) -> bool:
        return bool(np.max(self.values(x)) <= tol)

    def active_indices(self, x, a: float, tol: float = FEAS_TOL) -> list[int]:
        """Indices with -a <= psi_i(x) <= 0, up to the feasibility tolerance."""
        vals = self.values(x)
        return [i for i, v in enumerate(vals) if -a - tol <= v <= tol]

    def with_constants(self, normal_gap=None, grad_bound=None) -> "SweepingSet":
        kw = {}
        if normal_gap is not None:
            kw["normal_gap"] = normal_gap
        if grad_bound is not None:
            kw["grad_bound"] = grad_bound
        return replace(self, **kw)


@dataclass(frozen=True)
class ActiveSet:
    indices: tuple[int, ...]
    threshold: float


def psi_max(S: SweepingSet, x) -> float:
    """Pointwise maximum of the constraint fields; <= 0 iff x is in the set."""
    return float(np.max(S.values(x)))


def _softmax_weights(vals: np.ndarray, gamma: float):
    """Shifted exponentials e^{gamma(psi_i - max)} and their sum."""
    vmax = float(np.max(vals))
    ex = np.exp(np.minimum(gamma * (vals - vmax), 0.0))
    return vmax, ex, float(np.sum(ex))


def psi_gamma(S: SweepingSet, gamma: float, x):
    """Log-sum-exp smoothing of the constraint maximum and its gradient.

    value = (1/gamma) ln(sum_i e^{gamma psi_i(x)}) computed in shifted form;
    the sandwich max <= value <= max + ln(r)/gamma holds exactly.  The
    gradient is the softmax-weighted combination of the field gradients.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    vals, grads = S.values_grads(x)
    vmax, ex, total = _softmax_weights(vals, gamma)
    value = vmax + math.log(total) / gamma
    grad = (ex / total) @ grads
    return value, grad


def psi_gamma_value(S: SweepingSet, gamma: float, x) -> float:
    vals = S.values(x)
    vmax, _, total = _softmax_weights(vals, gamma)
    return vmax + math.log(total) / gamma


@dataclass(frozen=True)
class PenaltySchedule:
    """Increasing penalty strengths with the derived margins and shifts.

    Each strength must exceed 2*drift_bound/normal_gap so the boundary margin
    ``margin(k) = ln(normal_gap*gamma_k/(2*drift_bound))/gamma_k`` is positive.
    The interior shift used to start on-boundary points strictly inside the
    shrunk set is ``(r*grad_bound/(2*normal_gap^2)) * (ln(r)/gamma_k + margin(k))``.
    """

    gammas: tuple[float, ...]
    drift_bound: float
    normal_gap: float
    grad_bound: float
    r: int

    def __post_init__(self):
        g = np.asarray(self.gammas, dtype=float)
        if len(g) == 0 or np.any(np.diff(g) <= 0):
            raise ValueError("gammas must be strictly increasing and nonempty")
        gmin = 2.0 * self.drift_bound / self.normal_gap
        if g[0] <= gmin:
            raise ValueError(
                f"every gamma must exceed 2*drift_bound/normal_gap = {gmin:.6g}; got {g[0]:.6g}"
            )

    @classmethod
    def for_set(cls, S: SweepingSet, gammas: Sequence[float], drift_bound: float) -> "PenaltySchedule":
        return cls(tuple(float(g) for g in gammas), float(drift_bound),
                   S.normal_gap, S.grad_bound, S.r)

    def __len__(self):
        return len(self.gammas)

    def margin(self, k: int) -> float:
        g = self.gammas[k]
        return math.log(self.normal_gap * g / (2.0 * self.drift_bound)) / g

    def interior_shift(self, k: int) -> float:
        g = self.gammas[k]
        return (self.r * self.grad_bound / (2.0 * self.normal_gap**2)) * (
            math.log(self.r) / g + self.margin(k)
        )

    def multiplier_bound(self) -> float:
        return 2.0 * self.drift_bound / self.normal_gap


def level_membership(S: SweepingSet, sched: PenaltySchedule, k: int, x) -> Membership:
    """Classify x against the nested shrunk/smoothed/plain sets."""
    gamma = sched.gammas[k]
    value = psi_gamma_value(S, gamma, x)
    if value <= -sched.margin(k):
        return Membership.INSIDE_SHRUNK
    if value <= 0.0:
        return Membership.INSIDE_SMOOTHED
    if psi_max(S, x) <= 0.0:
        return Membership.INSIDE
    return Membership.OUTSIDE


def normal_cone_rays(S: SweepingSet, x, a: float = 0.0, tol: float = FEAS_TOL):
    """Generating rays (i, grad psi_i(x)) of the normal cone at near-active x."""
    if psi_max(S, x) > tol:
        raise NotOnBoundary(f"point is infeasible by {psi_max(S, x):.3g}")
    idx = S.active_indices(x, a, tol)
    return [(i, S.psi[i].grad_x(0.0, x)) for i in idx]


# ---------------------------------------------------------------------------
# Min-norm point in a convex hull (Wolfe's algorithm, exact line search)
# ---------------------------------------------------------------------------

def _affine_min_norm(G: np.ndarray):
    """Min-norm point of the affine hull of the columns of G; returns weights."""
    k = G.shape[1]
    A = np.zeros((k + 1, k + 1))
    A[:k, :k] = G.T @ G
    A[k, :k] = 1.0
    A[:k, k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    try:
        w = np.linalg.solve(A, rhs)[:k]
    except np.linalg.LinAlgError:
        w = np.linalg.lstsq(A, rhs, rcond=None)[0][:k]
    return w


def min_norm_point(points: np.ndarray, tol: float = 1e-12, max_iter: int = 200):
    """Minimum-norm point of conv{columns of points}.

    Returns (distance, weights).  Wolfe's minimum-norm-point iteration with
    exact line search over corrals; exact up to linear algebra for the small
    instances used here (at most 16 generators).
    """
    P = np.asarray(points, dtype=float)
    if P.ndim != 2:
        raise ValueError("points must be a matrix with one generator per column")
    k = P.shape[1]
    if k == 0:
        raise ValueError("empty generator set")
    norms2 = np.sum(P * P, axis=0)
    corral = [int(np.argmin(norms2))]
    lam = np.array([1.0])
    x = P[:, corral[0]].copy()
    scale = max(1.0, float(np.max(norms2)))
    for _ in range(max_iter):
        # optimality: every generator satisfies <x, p_j> >= <x, x> - tol
        dots = x @ P
        j = int(np.argmin(dots))
        if dots[j] >= x @ x - tol * scale:
            break
        if j not in corral:
            corral.append(j)
            lam = np.append(lam, 0.0)
        # minor cycles: pull x to the affine min-norm point of the corral
        for _ in range(max_iter):
            G = P[:, corral]
            w = _affine_min_norm(G)
            if np.all(w > 1e-14):
                lam = w
                x = G @ w
                break
            # exact line search from lam toward w up to the simplex boundary
            diff = w - lam
            neg = diff < -1e-18
            theta = min(1.0, float(np.min(-lam[neg] / diff[neg]))) if np.any(neg) else 1.0
            lam = lam + theta * (w - lam)
            lam[lam < 1e-14] = 0.0
            keep = lam > 0.0
            if not np.any(keep):
                keep[int(np.argmax(w))] = True
                lam[keep] = 1.0
            corral = [c for c, kp in zip(corral, keep) if kp]
            lam = lam[keep]
            lam = lam / np.sum(lam)
            x = P[:, corral] @ lam
    weights = np.zeros(k)
    for c, l in zip(corral, lam):
        weights[c] += l
    return float(np.linalg.norm(x)), weights


def check_A22(S: SweepingSet, samples: Sequence[np.ndarray], a: float = 1e-6,
              tol: float = FEAS_TOL):
    """Sampled positive-linear-independence constant of the active gradients.

    For each boundary sample, the distance from the origin to the convex hull
    of the active gradients is computed; the estimate is half the minimum over
    samples.  Passing (estimate > 0) certifies only that no violation was
    found at the samples.  Returns (eta_hat, witness).
    """
    best = math.inf
    witness = None
    seen = 0
    for x in samples:
        x = np.asarray(x, dtype=float)
        idx = S.active_indices(x, a, tol)
        if not idx:
            continue
        seen += 1
        _, grads = S.values_grads(x)
        d, _ = min_norm_point(grads[idx].T)
        if d < best:
            best = d
            witness = x
    if seen == 0:
        raise NoBoundarySamples("no sample had an active constraint")
    return 0.5 * best, witness


def check_A23(S: SweepingSet, x, a: float = 0.0, tol: float = FEAS_TOL):
    """Gradient near-orthogonality ratio at x; passes when strictly below 1.

    b_hat = max over active j of sum_{active i != j} |<g_i, g_j>| / ||g_j||^2.
    """
    idx = S.active_indices(x, a, tol)
    if not idx:
        raise EmptyActiveSet(f"no active constraint at threshold {a}")
    _, grads = S.values_grads(x)
    G = grads[idx]
    b_hat = 0.0
    for jj in range(len(idx)):
        denom = float(G[jj] @ G[jj])
        if denom == 0.0:
            return math.inf, False
        s = sum(abs(float(G[ii] @ G[jj])) for ii in range(len(idx)) if ii != jj)
        b_hat = max(b_hat, s / denom)
    return b_hat, b_hat < 1.0


def interior_direction(S: SweepingSet, c, a: float = 0.0, tol: float = FEAS_TOL,
                       check_bounds: bool = True) -> np.ndarray:
    """Direction pointing from a boundary point strictly into the set.

    Each active gradient is split into its normal-cone part (a nonnegative
    least squares over the active rays) and its tangential remainder; the
    returned direction is the sum of the tangential parts.  When the sampled
    gap constant holds, the direction satisfies
    <d/||d||, grad psi_i(c)> <= -4*normal_gap^2/(r*grad_bound) for active i
    and 4*normal_gap^2/grad_bound <= ||d|| <= r*grad_bound.
    """
    c = np.asarray(c, dtype=float)
    s = psi_max(S, c)
    if abs(s) > max(tol, 1e-7):
        raise NotOnBoundary(f"psi_max(c) = {s:.3g}, not on the boundary")
    idx = S.active_indices(c, a, max(tol, 1e-7))
    if not idx:
        raise NotOnBoundary("no active constraint at c")
    _, grads = S.values_grads(c)
    G = grads[idx].T  # n x k, cone generators
    d = np.zeros(S.n)
    for j in range(G.shape[1]):
        target = -G[:, j]
        lam, _ = nnls(G, target)
        normal_part = G @ lam
        d += target - normal_part
    if check_bounds:
        eta, mbar = S.normal_gap, S.grad_bound
        lower = 4.0 * eta**2 / mbar
        upper = S.r * mbar
        nd = float(np.linalg.norm(d))
        slack = 1e-7 * (1.0 + upper)
        if not (lower - slack <= nd <= upper + slack):
            raise DegenerateCone(f"||d|| = {nd:.3g} outside [{lower:.3g}, {upper:.3g}]")
        bound = -4.0 * eta**2 / (S.r * mbar)
        for i in idx:
            inner = float(d / nd @ grads[i])
            if inner > bound + slack:
                raise DegenerateCone(
                    f"<d_hat, grad psi_{i+1}> = {inner:.3g} exceeds {bound:.3g}"
                )
    return d


def augment_with_ball(S: SweepingSet, y0, R0: float) -> SweepingSet:
    """Append the constraint 0.5*(||x - y0||^2 - R0^2) bounding the set."""
    if R0 <= 0:
        raise ValueError("R0 must be positive")
    y0 = np.asarray(y0, dtype=float)
    terms = []
    for i in range(S.n):
        ci = repr(float(y0[i]))
        if y0[i] == int(y0[i]):
            ci = str(int(y0[i]))
        terms.append(f"(x{i+1} - {ci})^2" if y0[i] >= 0 else f"(x{i+1} + {abs(float(y0[i]))!r})^2")
    src = f"0.5*({' + '.join(terms)} - {float(R0)!r}^2)"
    ball = ScalarField.parse(src, S.n, 0, smooth_required=True)
    return replace(S, psi=S.psi + (ball,))


# ---------------------------------------------------------------------------
# Euclidean projection by sequential quadratic iterations on the KKT system
# ---------------------------------------------------------------------------

def _qp_projection_step(r: np.ndarray, vals: np.ndarray, grads: np.ndarray,
                        max_cycles: int = 64):
    """min 0.5||dz - r||^2 s.t. vals_i + <g_i, dz> <= 0; small active-set QP."""
    rcount = len(vals)
    work: list[int] = [i for i in range(rcount) if vals[i] + grads[i] @ r > 0.0]
    lam = np.zeros(rcount)
    dz = r.copy()
    for _ in range(max_cycles):
        if work:
            Gw = grads[work]
            A = Gw @ Gw.T
            rhs = Gw @ r + vals[work]
            try:
                lw = np.linalg.solve(A, rhs)
            except np.linalg.LinAlgError:
                lw = np.linalg.lstsq(A, rhs, rcond=None)[0]
            if np.min(lw) < -1e-12:
                drop = work[int(np.argmin(lw))]
                work.remove(drop)
                continue
            dz = r - Gw.T @ lw
        else:
            lw = np.zeros(0)
            dz = r.copy()
        resid = vals + grads @ dz
        resid[work] = -np.inf
        worst = int(np.argmax(resid))
        if resid[worst] > 1e-12 * (1.0 + float(np.linalg.norm(r))):
            work.append(worst)
            continue
        lam[:] = 0.0
        lam[work] = lw
        return dz, lam
    return dz, lam


def project_onto_C(S: SweepingSet, y, tol: float = 1e-10, max_iter: int = 50,
                   return_multipliers: bool = False):
    """Euclidean projection of y onto the set, with KKT multipliers.

    Sequential quadratic iterations with Armijo damping on the exact-penalty
    merit; intended for points one integration step away from the set.
    Raises NoConvergence when the caller should shrink its step.
    """
    y = np.asarray(y, dtype=float)
    vals = S.values(y)
    scale = 1.0 + float(np.linalg.norm(y))
    if np.max(vals) <= tol:
        lam = np.zeros(S.r)
        return (y.copy(), lam) if return_multipliers else y.copy()
    z = y.copy()
    lam = np.zeros(S.r)
    kappa = 10.0  # exact-penalty weight, raised adaptively above max multiplier
    for it in range(max_iter):
        vals, grads = S.values_grads(z)
        dz, lam = _qp_projection_step(y - z, vals, grads)
        kappa = max(kappa, 4.0 * float(np.max(lam, initial=0.0)))
        stat = z - y + grads.T @ lam
        feas = float(np.max(np.maximum(vals, 0.0)))
        if feas <= tol * scale and float(np.linalg.norm(stat)) <= math.sqrt(tol) * scale \
                and float(np.linalg.norm(dz)) <= math.sqrt(tol) * scale:
            z = z + dz
            if return_multipliers:
                return z, lam
            return z

        def merit(p):
            v = S.values(p)
            return 0.5 * float((p - y) @ (p - y)) + kappa * float(np.sum(np.maximum(v, 0.0)))

        m0 = merit(z)
        alpha = 1.0
        for _ in range(30):
            znew = z + alpha * dz
            if merit(znew) <= m0 - 1e-4 * alpha * float(dz @ dz):
                break
            alpha *= 0.5
        else:
            znew = z + dz  # Armijo stalled: accept the full SQP step
        z = znew
    vals = S.values(z)
    if np.max(vals) <= 1e2 * tol * scale:
        if return_multipliers:
            return z, lam
        return z
    raise NoConvergence(max_iter, f"max violation {np.max(vals):.3g}")


# ---------------------------------------------------------------------------
# Boundary sampling and constant estimation
# ---------------------------------------------------------------------------

def interior_point(S: SweepingSet, lo, hi, rng, batch: int = 4096):
    """Most-feasible point among box samples; None if the batch is infeasible."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    pts = rng.uniform(lo, hi, size=(batch, S.n))
    best, best_val = None, 0.0
    for p in pts:
        v = psi_max(S, p)
        if v < best_val:
            best, best_val = p, v
    return best


def boundary_samples(S: SweepingSet, lo, hi, count: int, rng,
                     bisect_tol: float = 1e-12):
    """Boundary points found by ray bisection from an interior point.

    Returns (samples, recession_directions); a ray that stays feasible all the
    way to the sampling box edge contributes a recession direction instead of
    a boundary point, signalling that the set may be unbounded.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    center = interior_point(S, lo, hi, rng)
    if center is None:
        raise NoBoundarySamples("no interior point found in the sampling box")
    samples = []
    recession = []
    span = float(np.linalg.norm(hi - lo))
    attempts = 0
    while len(samples) < count and attempts < 20 * count:
        attempts += 1
        v = rng.normal(size=S.n)
        v /= np.linalg.norm(v)
        s_hi = span
        if psi_max(S, center + s_hi * v) <= 0.0:
            recession.append(v)
            continue
        s_lo = 0.0
        for _ in range(200):
            mid = 0.5 * (s_lo + s_hi)
            if psi_max(S, center + mid * v) <= 0.0:
                s_lo = mid
            else:
                s_hi = mid
            if s_hi - s_lo <= bisect_tol * max(1.0, s_hi):
                break
        samples.append(center + s_lo * v)
    if not samples:
        raise NoBoundarySamples("all rays stayed feasible inside the box")
    return samples, recession


def refine_to_edge(S: SweepingSet, x0, i: int, j: int, iters: int = 30,
                   tol: float = 1e-10):
    """Gauss-Newton onto the intersection of faces i and j from a nearby start.

    Returns the refined point or None when the iteration leaves the set or
    fails to converge (the faces may not intersect near x0).
    """
    x = np.asarray(x0, dtype=float).copy()
    for _ in range(iters):
        vals = np.array([S.psi[i].value(0.0, x), S.psi[j].value(0.0, x)])
        if float(np.max(np.abs(vals))) <= tol:
            if psi_max(S, x) <= 1e-8:
                return x
            return None
        G = np.stack([S.psi[i].grad_x(0.0, x), S.psi[j].grad_x(0.0, x)])
        try:
            step = np.linalg.lstsq(G, -vals, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(step)) or np.linalg.norm(step) > 1e3:
            return None
        x = x + step
    return None


def estimate_constants(S: SweepingSet, lo, hi, rng, count: int = 200,
                       active_threshold: float = 0.05):
    """Sampled (normal_gap, grad_bound) estimates over the given box.

    grad_bound is the max gradient norm over boundary and interior samples,
    inflated by 10 percent; normal_gap comes from the min-norm-point sweep.
    The generous default activity threshold makes samples near a face
    intersection contribute their full gradient bundle, which keeps the gap
    estimate conservative (random rays almost never hit the edge itself).
    """
    samples, recession = boundary_samples(S, lo, hi, count, rng)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    # face intersections carry the worst gradient bundles; random rays almost
    # never hit them, so refine near-edge samples onto each pairwise edge
    edges = []
    for x in samples:
        vals = S.values(x)
        order = np.argsort(-vals)
        if S.r >= 2 and vals[order[1]] > -0.5 * float(np.max(np.abs(vals)) + 1.0):
            i, j = int(order[0]), int(order[1])
            refined = refine_to_edge(S, x, i, j)
            if refined is not None and np.all(refined >= lo - 1e-9) \
                    and np.all(refined <= hi + 1e-9):
                edges.append(refined)
    eta_hat, witness = check_A22(S, list(samples) + edges, a=active_threshold)
    gmax = 0.0
    interior = [p for p in rng.uniform(lo, hi, size=(count, S.n)) if psi_max(S, p) <= 0]
    for x in list(samples) + interior:
        _, grads = S.values_grads(x)
        gmax = max(gmax, float(np.max(np.linalg.norm(grads, axis=1))))
    return {
        "normal_gap": eta_hat,
        "grad_bound": 1.1 * gmax,
        "witness": witness,
        "boundary_count": len(samples),
        "recession_directions": recession,
    }
