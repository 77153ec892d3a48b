"""Discrete-distribution checks of the optimal discriminator and total-divergence identity.

A :class:`DiscreteJoint` is an ``M x B`` table whose row ``i`` is domain
``i``'s joint distribution of (shared feature, prediction) over ``B`` bins.
A :class:`DiscriminatorTable` holds one distribution over domains per bin
(columns sum to one). All logarithms are natural.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import to_inputs
from .networks import CanModel, ContractError
from .tensor import make_rng

ROW_TOL = 1e-12
LOG_FLOOR = 1e-300


@dataclass
class DiscreteJoint:
    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] < 1 or t.shape[1] < 1:
            raise ContractError(f"joint table must be a non-empty M x B matrix, got shape {t.shape}")
        if np.any(t < 0):
            raise ContractError("joint table has negative entries")
        if np.any(np.abs(t.sum(axis=1) - 1.0) > ROW_TOL):
            raise ContractError(f"joint rows must sum to 1 (got {t.sum(axis=1)})")
        self.table = t

    @property
    def M(self) -> int:
        return self.table.shape[0]

    @property
    def B(self) -> int:
        return self.table.shape[1]

    @classmethod
    def random(cls, rng: np.random.Generator, M: int, B: int, concentration: float = 1.0) -> "DiscreteJoint":
        t = rng.dirichlet(np.full(B, concentration), size=M)
        return cls(t / t.sum(axis=1, keepdims=True))


@dataclass
class DiscriminatorTable:
    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2 or np.any(t < 0) or np.any(np.abs(t.sum(axis=0) - 1.0) > ROW_TOL):
            raise ContractError("discriminator columns must be distributions over domains")
        self.table = t

    @classmethod
    def uniform(cls, M: int, B: int) -> "DiscriminatorTable":
        return cls(np.full((M, B), 1.0 / M))


def optimal_discriminator(P: DiscreteJoint) -> DiscriminatorTable:
    """Per bin, each domain's share of the total mass; empty bins get uniform columns."""
    mass = P.table.sum(axis=0)
    out = np.full(P.table.shape, 1.0 / P.M)
    nz = mass > 0
    out[:, nz] = P.table[:, nz] / mass[nz]
    return DiscriminatorTable(out)


def j_d_of(P: DiscreteJoint, D: DiscriminatorTable) -> float:
    """Expected discriminator NLL ``-sum_i sum_b P_i(b) ln D_i(b)``, with ``0 ln(.) = 0``."""
    if D.table.shape != P.table.shape:
        raise ContractError(f"shape mismatch: P {P.table.shape} vs D {D.table.shape}")
    p = P.table
    logs = np.log(np.maximum(D.table, LOG_FLOOR))
    return float(-np.sum(np.where(p > 0, p * logs, 0.0)))


def kl(p, q) -> float:
    """``sum p ln(p/q)`` with ``0 ln 0 = 0``; ``inf`` (plus a warning) if p is not dominated by q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ContractError(f"kl: shapes {p.shape} and {q.shape} differ")
    support = p > 0
    if np.any(support & (q <= 0)):
        warnings.warn("kl: p puts mass where q has none; divergence is infinite", RuntimeWarning, stacklevel=2)
        return math.inf
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def centroid(P: DiscreteJoint) -> np.ndarray:
    return P.table.mean(axis=0)


def total_divergence(P: DiscreteJoint) -> float:
    mid = centroid(P)
    return sum(kl(row, mid) for row in P.table)


def theorem_value(P: DiscreteJoint) -> float:
    """``M ln M - sum_i KL(P_i || centroid)``."""
    return P.M * math.log(P.M) - total_divergence(P)


@dataclass
class BruteForceResult:
    table: DiscriminatorTable
    value: float
    converged: bool
    iterations: int


def brute_force_optimum(
    P: DiscreteJoint,
    iterations: int = 50_000,
    rng: np.random.Generator | None = None,
    restarts: int = 3,
    step: float = 1.0,
    tol: float = 1e-9,
) -> BruteForceResult:
    """Minimize :func:`j_d_of` over column-stochastic tables by gradient descent.

    Each column is parametrised by softmax logits, so the simplex constraint
    holds by construction. The logit gradient for bin ``b`` is
    ``mass_b * D_b - P_b``; it is divided by ``mass_b`` (a per-column step
    size). Empty bins do not affect the objective and keep their start value.
    Several random starts are run and the best kept. ``converged`` is false
    if the objective still moved by more than ``tol`` over the last
    1,000 iterations of the budget.
    """
    if P.B > 64 or P.M > 8:
        raise ContractError(f"brute force is limited to M <= 8, B <= 64 (got M={P.M}, B={P.B})")
    rng = rng if rng is not None else make_rng(0)
    p = P.table
    mass = p.sum(axis=0)
    inv_mass = np.where(mass > 0, 1.0 / np.where(mass > 0, mass, 1.0), 0.0)
    best: BruteForceResult | None = None
    for _ in range(restarts):
        z = rng.normal(size=p.shape)
        checkpoints: list[float] = []
        stopped_early = False
        it = 0
        for it in range(1, iterations + 1):
            z -= z.max(axis=0, keepdims=True)
            e = np.exp(z)
            D = e / e.sum(axis=0, keepdims=True)
            grad = (mass * D - p) * inv_mass
            if np.max(np.abs(grad)) < 1e-15:
                stopped_early = True
                break
            if it % 1000 == 0:
                checkpoints.append(j_d_of(P, DiscriminatorTable(D)))
            z -= step * grad
        z -= z.max(axis=0, keepdims=True)
        e = np.exp(z)
        D = DiscriminatorTable(e / e.sum(axis=0, keepdims=True))
        value = j_d_of(P, D)
        converged = stopped_early or (len(checkpoints) >= 1 and abs(checkpoints[-1] - value) <= tol)
        result = BruteForceResult(D, value, converged, it)
        if best is None or result.value < best.value:
            best = result
    return best


def histogram_joint(
    model: CanModel,
    datasets: Sequence,
    bins: int,
    seed: int = 0,
    pools: Sequence[str] = ("labeled", "unlabeled"),
) -> DiscreteJoint:
    """Empirical per-domain joints of ``[F_s(x), C_i]`` over shared 1-D bins.

    Each ``[f, c]`` vector is standardised with pooled statistics, projected
    on a fixed random direction (drawn from ``seed``), and assigned to one of
    ``bins`` equal-mass bins whose edges are quantiles of the pooled
    projections. Domains without a private extractor use the zero private
    feature.
    """
    if bins < 1:
        raise ContractError("need at least one bin")
    model.eval()
    per_domain = []
    for ds in datasets:
        instances = [i for pool in pools for i in getattr(ds, pool)]
        if not instances:
            raise ContractError(f"domain {ds.name!r} has no instances to histogram")
        x = to_inputs(instances, model.input_dim)
        f = model.forward_shared(x)
        private = ds.domain if ds.domain < len(model.private) else None
        c = model.classify(f, model.forward_private(x, private) if private is not None else None)
        per_domain.append(np.hstack([f.data, c.data]))
    pooled = np.vstack(per_domain)
    mu, sd = pooled.mean(axis=0), pooled.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    direction = make_rng(seed).normal(size=pooled.shape[1])
    direction /= np.linalg.norm(direction)
    proj = [((z - mu) / sd) @ direction for z in per_domain]
    edges = np.quantile(np.concatenate(proj), np.arange(1, bins) / bins) if bins > 1 else np.array([])
    rows = []
    for pr in proj:
        counts = np.bincount(np.searchsorted(edges, pr, side="right"), minlength=bins).astype(np.float64)
        rows.append(counts / counts.sum())
    return DiscreteJoint(np.vstack(rows))


# ----------------------------------------------------------------------------
# batch report used by the command line
# ----------------------------------------------------------------------------


def oracle_report(trials: int = 200, seed: int = 7, brute_force_trials: int = 10) -> dict:
    """Run every identity on random joints; returns a JSON-ready report with pass flags."""
    rng = make_rng(seed)
    worst_identity = 0.0
    worst_random_gap = -math.inf
    bound_ok = True
    for _ in range(trials):
        M, B = int(rng.integers(2, 6)), int(rng.integers(2, 51))
        P = DiscreteJoint.random(rng, M, B)
        d_star = optimal_discriminator(P)
        at_opt = j_d_of(P, d_star)
        tv = theorem_value(P)
        worst_identity = max(worst_identity, abs(tv - at_opt))
        bound_ok &= tv <= M * math.log(M) + 1e-12
        for _ in range(100):
            D = DiscriminatorTable(rng.dirichlet(np.ones(M), size=B).T)
            worst_random_gap = max(worst_random_gap, at_opt - j_d_of(P, D))

    worst_entry, worst_value, all_converged = 0.0, 0.0, True
    for _ in range(brute_force_trials):
        M, B = int(rng.integers(2, 6)), int(rng.integers(2, 21))
        P = DiscreteJoint.random(rng, M, B)
        res = brute_force_optimum(P, rng=rng)
        worst_entry = max(worst_entry, float(np.max(np.abs(res.table.table - optimal_discriminator(P).table))))
        worst_value = max(worst_value, abs(res.value - theorem_value(P)))
        all_converged &= res.converged

    same = DiscreteJoint(np.tile(rng.dirichlet(np.ones(8)), (4, 1)))
    identical_gap = abs(theorem_value(same) - 4 * math.log(4))

    checks = [
        {"name": "closed_form_identity", "value": worst_identity, "tolerance": 1e-10, "passed": worst_identity < 1e-10},
        {"name": "optimum_beats_random_tables", "value": worst_random_gap, "tolerance": 1e-9, "passed": worst_random_gap <= 1e-9},
        {"name": "upper_bound", "value": float(bound_ok), "tolerance": 0.0, "passed": bool(bound_ok)},
        {"name": "identical_rows_maximum", "value": identical_gap, "tolerance": 1e-10,
         "passed": identical_gap < 1e-10},
        {"name": "brute_force_entries", "value": worst_entry, "tolerance": 1e-4,
         "passed": worst_entry < 1e-4 and bool(all_converged)},
        {"name": "brute_force_value", "value": worst_value, "tolerance": 1e-5, "passed": worst_value < 1e-5},
    ]
    return {
        "inputs": {"trials": trials, "seed": seed, "brute_force_trials": brute_force_trials},
        "checks": checks,
        "passed": all(c["passed"] for c in checks),
    }
