"""Problem files and the builtin example registry.

A problem is a JSON document; expressions are strings in the grammar of
:mod:`sweepctrl.exprcore`.  Keys:

    n, m, T          dimensions and horizon
    psi              list of constraint expressions (state only)
    f                n perturbation expressions over (t, x, u)
    phi              extension potential expression (state only)
    g                endpoint cost over 2n variables x1..x2n, where x1..xn is
                     the initial state and xn+1..x2n the terminal state
    C0               {"point": [...]} or {"sublevel": [expr...]}
    CT               {"all": true} | {"affine": {"a": [...], "b": ...}}
                     | {"sublevel": [expr...]}
    U                {"lo": [...], "hi": [...]} control box
    delta            localization radius of the tracking penalty
    ball             optional {"y0": [...], "R0": ...} quadratic augmentation
    schedule         {"gammas": [...]} or {"auto": {"gamma_min", "gamma_max",
                     "steps"}} (all optional; defaults are derived from the
                     estimated constants)
    N                default grid size
    sample_box       optional {"lo", "hi"}: region used to estimate the
                     geometric constants by sampling (the set itself may be
                     unbounded, so estimation needs a declared region)

Numbers round-trip at 17 significant digits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .dynamics import DynamicsSpec
from .exprcore import ScalarField
from .ocpsolve import SweepingProblem
from .pmpverify import PmpCertificate
from .dynamics import AdjointMeasure
from .sweepset import PenaltySchedule, SweepingSet, augment_with_ball, estimate_constants

__all__ = [
    "ProblemValidationError",
    "LoadedProblem",
    "load_problem_dict",
    "problem_to_dict",
    "registry",
    "example_names",
    "paper61_closed_form",
    "paper61_certificate",
]

SCHEMA_VERSION = 1


class ProblemValidationError(ValueError):
    pass


def _require(cond: bool, msg: str):
    if not cond:
        raise ProblemValidationError(msg)


@dataclass
class LoadedProblem:
    raw: dict
    problem: SweepingProblem
    schedule: PenaltySchedule
    N: int
    estimates: dict
    sample_box: tuple[np.ndarray, np.ndarray]

    @property
    def spec(self) -> DynamicsSpec:
        return self.problem.spec


def _default_sample_box(n: int, anchor: np.ndarray):
    half = 2.0 * (1.0 + float(np.max(np.abs(anchor))))
    return anchor - half, anchor + half


def load_problem_dict(doc: dict, seed: int = 0) -> LoadedProblem:
    """Validate, build the typed problem, and estimate regularity constants."""
    try:
        n = int(doc["n"])
        m = int(doc["m"])
        T = float(doc["T"])
        psi_src = list(doc["psi"])
        f_src = list(doc["f"])
        phi_src = doc.get("phi", "0")
        g_src = doc["g"]
        u_doc = doc["U"]
    except KeyError as exc:
        raise ProblemValidationError(f"missing key: {exc}") from exc
    _require(n >= 1 and m >= 0, "n must be >= 1 and m >= 0")
    _require(T >= 0, "T must be nonnegative")
    _require(len(f_src) == n, f"f must have {n} entries, got {len(f_src)}")
    _require(len(psi_src) >= 1, "psi must be nonempty")

    S = SweepingSet.from_expressions(psi_src, n)
    if "ball" in doc and doc["ball"]:
        y0 = np.asarray(doc["ball"]["y0"], dtype=float)
        R0 = float(doc["ball"]["R0"])
        _require(len(y0) == n, "ball center has wrong dimension")
        S = augment_with_ball(S, y0, R0)

    f = tuple(ScalarField.parse(src, n, m) for src in f_src)
    phi = ScalarField.parse(phi_src, n, 0, smooth_required=True)
    g = ScalarField.parse(g_src, 2 * n, 0)

    u_lo = np.asarray(u_doc["lo"], dtype=float)
    u_hi = np.asarray(u_doc["hi"], dtype=float)
    _require(len(u_lo) == m and len(u_hi) == m, "control box has wrong dimension")
    _require(bool(np.all(u_lo <= u_hi)), "control box is empty")

    c0_doc = doc["C0"]
    if "point" in c0_doc:
        x0 = np.asarray(c0_doc["point"], dtype=float)
        _require(len(x0) == n, "C0 point has wrong dimension")
        C0 = ("point", x0)
        anchor = x0
    elif "sublevel" in c0_doc:
        C0 = ("sublevel", SweepingSet.from_expressions(list(c0_doc["sublevel"]), n))
        anchor = np.zeros(n)
    else:
        raise ProblemValidationError("C0 must be a point or a sublevel list")

    ct_doc = doc["CT"]
    if ct_doc.get("all"):
        CT = ("all",)
    elif "affine" in ct_doc:
        a = np.asarray(ct_doc["affine"]["a"], dtype=float)
        b = float(ct_doc["affine"]["b"])
        _require(len(a) == n and np.linalg.norm(a) > 0, "affine CT needs a nonzero normal")
        CT = ("affine", a, b)
    elif "sublevel" in ct_doc:
        CT = ("sublevel", SweepingSet.from_expressions(list(ct_doc["sublevel"]), n))
    else:
        raise ProblemValidationError("CT must be all, affine, or a sublevel list")

    if "sample_box" in doc:
        lo = np.asarray(doc["sample_box"]["lo"], dtype=float)
        hi = np.asarray(doc["sample_box"]["hi"], dtype=float)
        _require(len(lo) == n and len(hi) == n and np.all(lo < hi), "bad sample_box")
    else:
        lo, hi = _default_sample_box(n, anchor)

    rng = np.random.default_rng(seed)
    est = estimate_constants(S, lo, hi, rng)
    S = S.with_constants(normal_gap=est["normal_gap"], grad_bound=est["grad_bound"])

    spec = DynamicsSpec(f=f, phi=phi, S=S, T=T, drift_bound=1.0)
    drift = spec.estimate_drift_bound(lo, hi, u_lo, u_hi, rng)
    spec = DynamicsSpec(f=f, phi=phi, S=S, T=T, drift_bound=drift)
    est["drift_bound"] = drift

    sched_doc = doc.get("schedule", {})
    if "gammas" in sched_doc:
        gammas = [float(v) for v in sched_doc["gammas"]]
    else:
        auto = sched_doc.get("auto", {})
        gmin = float(auto.get("gamma_min", max(10.0, 4.0 * drift / S.normal_gap)))
        gmax = float(auto.get("gamma_max", 1e3))
        steps = int(auto.get("steps", 8))
        _require(gmax > gmin > 0 and steps >= 1, "bad auto schedule")
        gammas = list(np.geomspace(gmin, gmax, steps))
    schedule = PenaltySchedule.for_set(S, gammas, drift)

    prob = SweepingProblem(spec=spec, g=g, C0=C0, CT=CT, U=(u_lo, u_hi),
                           delta=float(doc.get("delta", 1.0)))
    N = int(doc.get("N", 200))
    _require(N >= 16 or T == 0.0, "N must be at least 16")
    return LoadedProblem(raw=doc, problem=prob, schedule=schedule, N=N,
                         estimates=est, sample_box=(lo, hi))


def load_problem_file(path: str, seed: int = 0) -> LoadedProblem:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return load_problem_dict(doc, seed=seed)


def problem_to_dict(name: str) -> dict:
    """Copy of a builtin problem document (serializable, 17-digit numbers)."""
    if name not in _REGISTRY:
        raise KeyError(f"unknown example {name!r}; known: {sorted(_REGISTRY)}")
    return json.loads(json.dumps(_REGISTRY[name]["doc"]))


def example_names() -> list[str]:
    return sorted(_REGISTRY)


def registry(name: str) -> dict:
    if name not in _REGISTRY:
        raise KeyError(f"unknown example {name!r}; known: {sorted(_REGISTRY)}")
    return _REGISTRY[name]


# ---------------------------------------------------------------------------
# Builtin: the three-state nonsmooth-set instance with a known solution
# ---------------------------------------------------------------------------

_PAPER61_DOC = {
    "schema_version": SCHEMA_VERSION,
    "n": 3,
    "m": 1,
    "T": 0.5,
    "psi": ["x1^2 + x2^2 + x3", "x1^2 + (x2 - 2)^2 + x3"],
    "f": ["4*x1 + u1", "x2 - 1", "-2*x1 - x2 + u1 + 2"],
    "phi": "0",
    "g": "-x4^2 - x6 - 1",
    "C0": {"point": [0.0, 1.0, -1.0]},
    "CT": {"affine": {"a": [8.0, 0.0, -4.0], "b": 9.0}},
    "U": {"lo": [-1.0], "hi": [1.0]},
    "delta": 1.0,
    "N": 400,
    "sample_box": {"lo": [-1.0, 0.0, -2.5], "hi": [1.0, 2.0, 0.5]},
}


def paper61_closed_form() -> dict:
    """Exact solution attached to the 'paper-6-1' entry.

    State slides along the edge where both constraints are active; the
    costate is smooth up to a single terminal jump matched by equal atoms of
    the two reaction measures.
    """

    def xbar(t):
        t = np.asarray(t, dtype=float)
        return np.stack([t, np.ones_like(t), -1.0 - t * t], axis=-1)

    def pbar(t):
        t = np.asarray(t, dtype=float)
        den = 4.0 * t * t + 1.0
        return np.stack([3.0 / (4.0 * den), np.zeros_like(t), -3.0 * t / (2.0 * den)], axis=-1)

    def rho1(t):
        t = np.asarray(t, dtype=float)
        return (12.0 * t**3 + 24.0 * t**2 + 3.0 * t - 6.0) / (8.0 * (4.0 * t * t + 1.0) ** 2)

    def rho2(t):
        t = np.asarray(t, dtype=float)
        return (-12.0 * t**3 + 24.0 * t**2 - 3.0 * t - 6.0) / (8.0 * (4.0 * t * t + 1.0) ** 2)

    return {
        "T": 0.5,
        "xbar": xbar,
        "ubar": 1.0,
        "pbar": pbar,
        "p_end": np.array([0.75, 0.0, 0.0]),
        "p_jump": np.array([0.375, 0.0, 0.375]),
        "rho": (rho1, rho2),
        "atom_weight": 3.0 / 16.0,
        "xi": 1.0,
        "lam": 0.25,
        "x_end": np.array([0.5, 1.0, -1.25]),
    }


def paper61_certificate(N: int = 2000) -> PmpCertificate:
    """Closed-form certificate sampled on N+1 nodes (the ground-truth fixture)."""
    cf = paper61_closed_form()
    T = cf["T"]
    grid = np.linspace(0.0, T, N + 1)
    x = cf["xbar"](grid)
    u = np.ones((N, 1))
    p = cf["pbar"](grid)
    p[-1] = cf["p_end"]
    rho1, rho2 = cf["rho"]
    nus = [
        AdjointMeasure(grid=grid.copy(), density=np.asarray(r(grid), dtype=float),
                       atoms=[(T, cf["atom_weight"])])
        for r in (rho1, rho2)
    ]
    xis = np.ones((N + 1, 2))
    return PmpCertificate(
        grid=grid,
        x=x,
        u=u,
        p=p,
        p_jumps=[(T, cf["p_jump"].copy())],
        nus=nus,
        xis=xis,
        lam=cf["lam"],
    )


_BOX2D_DOC = {
    "schema_version": SCHEMA_VERSION,
    "n": 2,
    "m": 2,
    "T": 1.0,
    "psi": ["x1 - 1", "-x1 - 1", "x2 - 1", "-x2 - 1"],
    "f": ["u1 - 0.5*x2", "0.3*x1 + u2"],
    "phi": "0",
    "g": "x3^2 + x4^2",
    "C0": {"point": [0.5, 0.0]},
    "CT": {"all": True},
    "U": {"lo": [-1.0, -1.0], "hi": [1.0, 1.0]},
    "delta": 1.0,
    "N": 100,
    "sample_box": {"lo": [-1.3, -1.3], "hi": [1.3, 1.3]},
}

_BANGBANG_DOC = {
    "schema_version": SCHEMA_VERSION,
    "n": 1,
    "m": 1,
    "T": 1.0,
    "psi": ["x1 - 100"],
    "f": ["u1"],
    "phi": "0",
    "g": "-x2",
    "C0": {"point": [0.0]},
    "CT": {"all": True},
    "U": {"lo": [-1.0], "hi": [1.0]},
    "delta": 1.0,
    "N": 64,
    "sample_box": {"lo": [-5.0], "hi": [105.0]},
}

_REGISTRY = {
    "paper-6-1": {
        "doc": _PAPER61_DOC,
        "closed_form": paper61_closed_form,
        "certificate": paper61_certificate,
    },
    "paper-6-1-free": {
        "doc": {**_PAPER61_DOC, "CT": {"all": True}},
        "closed_form": paper61_closed_form,
    },
    "box2d": {"doc": _BOX2D_DOC},
    "bangbang1d": {"doc": _BANGBANG_DOC},
}
