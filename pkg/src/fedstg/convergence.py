"""Empirical check of the codebook-block regret bound on convex surrogates.

Each client ``k`` owns a separable objective
``L_k(θ_a, θ_b) = ½‖B_k θ_a − e_k‖² + ½‖A_k θ_b − c_k‖²``.  The θ_b block
plays the role of the flattened codebook.  ``A_k = diag(s) H`` with ``H`` a
product of Householder reflections, so products with ``A_k`` and its
transpose cost ``O(dim)`` and the optimum, the gradient bound and the
curvature are all known in closed form.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

SCHEDULES = ("fixed", "decaying")
RADIUS_MARGIN = 1.1


@dataclass
class QuadraticBlock:
    """``½‖diag(s) H θ − c‖²`` with ``H = (I − 2 u_m u_mᵀ)···(I − 2 u_1 u_1ᵀ)``."""

    scales: np.ndarray  # (n,), singular values
    reflectors: np.ndarray  # (m, n), unit rows
    target: np.ndarray  # (n,)

    @property
    def dim(self) -> int:
        return self.scales.size

    def _h(self, x: np.ndarray) -> np.ndarray:
        for u in self.reflectors:
            x = x - 2.0 * u * (u @ x)
        return x

    def _ht(self, x: np.ndarray) -> np.ndarray:
        for u in self.reflectors[::-1]:
            x = x - 2.0 * u * (u @ x)
        return x

    def apply(self, theta: np.ndarray) -> np.ndarray:
        return self.scales * self._h(theta)

    def apply_t(self, r: np.ndarray) -> np.ndarray:
        return self._ht(self.scales * r)

    def loss(self, theta: np.ndarray) -> float:
        r = self.apply(theta) - self.target
        return 0.5 * float(r @ r)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.apply_t(self.apply(theta) - self.target)

    def optimum(self) -> np.ndarray:
        """Least-squares solution; exact inverse when every scale is nonzero."""
        inv = np.divide(self.target, self.scales, out=np.zeros_like(self.target), where=self.scales != 0)
        return self._ht(inv)

    @property
    def curvature(self) -> float:
        """Largest eigenvalue of ``AᵀA``."""
        return float(np.max(self.scales) ** 2)


@dataclass
class SurrogateProblem:
    blocks_b: list[QuadraticBlock]  # one per client, the shared codebook block
    blocks_a: list[QuadraticBlock]  # one per client, never averaged
    theta0_b: np.ndarray
    theta0_a: np.ndarray
    optima_b: list[np.ndarray]
    I: float
    M: float

    @property
    def K(self) -> int:
        return len(self.blocks_b)

    @property
    def curvature(self) -> float:
        return max(b.curvature for b in self.blocks_b)


@dataclass
class BoundParams:
    I: float
    M: float
    eta: float
    R: int

    def __post_init__(self):
        if not (self.I > 0 and self.M > 0 and self.eta > 0 and self.R > 0):
            raise ValueError("I, M, eta and R must all be positive")


@dataclass
class BoundReport:
    mean_gap: float
    bound: float
    holds: bool
    slack: float


def _block(rng: np.random.Generator, n: int, conditioning: float, reflections: int, optimum_scale: float):
    s = np.sqrt(rng.uniform(1.0 / conditioning, 1.0, size=n))
    s[0] = 1.0  # top singular value pinned at 1
    u = rng.standard_normal((reflections, n))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    blk = QuadraticBlock(s, u, np.zeros(n))
    theta_star = optimum_scale * rng.standard_normal(n) / math.sqrt(n)
    blk.target = blk.apply(theta_star)
    return blk


def make_surrogate(K: int = 5, dim_a: int = 64, dim_b: int = 2048, conditioning: float = 10.0, seed: int = 0,
                   reflections: int = 4, optimum_scale: float = 1.0) -> SurrogateProblem:
    """Random well-conditioned convex problem with analytic constants.

    ``I`` is ``1.1 × max_k ‖θ₀ − θ_k*‖`` and ``M`` is the supremum of the
    gradient norm over the ball of radius ``I`` around each optimum, which
    for these quadratics is ``max_k σ_max(A_k)² · I``.
    """
    if K < 1 or dim_a < 1 or dim_b < 1:
        raise ValueError("K, dim_a and dim_b must be >= 1")
    if conditioning < 1:
        raise ValueError("conditioning must be >= 1")
    # separate streams so the θ_a problem never perturbs the θ_b problem
    seq_b, seq_a = np.random.SeedSequence(seed).spawn(2)
    rng_b = np.random.default_rng(seq_b)
    rng_a = np.random.default_rng(seq_a)
    theta0_b = rng_b.uniform(-1.0 / 8.0, 1.0 / 8.0, size=dim_b)
    blocks_b = [_block(rng_b, dim_b, conditioning, reflections, optimum_scale) for _ in range(K)]
    theta0_a = rng_a.uniform(-1.0, 1.0, size=dim_a)
    blocks_a = [_block(rng_a, dim_a, conditioning, reflections, optimum_scale) for _ in range(K)]
    optima = [b.optimum() for b in blocks_b]
    I = RADIUS_MARGIN * max(float(np.linalg.norm(theta0_b - o)) for o in optima)
    M = max(b.curvature for b in blocks_b) * I
    return SurrogateProblem(blocks_b, blocks_a, theta0_b, theta0_a, optima, I, M)


def learning_rates(schedule: str, eta: float, R: int) -> np.ndarray:
    if schedule == "fixed":
        return np.full(R, float(eta))
    if schedule == "decaying":
        return 1.0 / np.sqrt(np.arange(1, R + 1))
    raise ValueError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")


@dataclass
class GapTrace:
    gaps_b: np.ndarray  # (K, R): L_k(θ_r) − L_k(θ*) for rounds r = 1..R
    gaps_a: np.ndarray  # (K, R)
    max_grad_norm: float  # largest θ_b gradient norm seen


def run_sgd_rounds(problem: SurrogateProblem, eta: float = 1.0, R: int = 100, schedule: str = "fixed",
                   averaged: bool = False) -> GapTrace:
    """Per-client full-gradient descent; gap ``r`` is measured at the iterate entering round ``r``.

    With ``averaged`` the θ_b iterates are replaced by their client mean
    after every round, as the server would do with the codebook.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    rates = learning_rates(schedule, eta, R)
    K = problem.K
    thetas_b = [problem.theta0_b.copy() for _ in range(K)]
    thetas_a = [problem.theta0_a.copy() for _ in range(K)]
    fstar_b = [b.loss(o) for b, o in zip(problem.blocks_b, problem.optima_b)]
    fstar_a = [b.loss(b.optimum()) for b in problem.blocks_a]
    gaps_b = np.empty((K, R))
    gaps_a = np.empty((K, R))
    gmax = 0.0
    for r in range(R):
        for k in range(K):
            gaps_b[k, r] = max(problem.blocks_b[k].loss(thetas_b[k]) - fstar_b[k], 0.0)
            gaps_a[k, r] = max(problem.blocks_a[k].loss(thetas_a[k]) - fstar_a[k], 0.0)
            g = problem.blocks_b[k].grad(thetas_b[k])
            gmax = max(gmax, float(np.linalg.norm(g)))
            thetas_b[k] = thetas_b[k] - rates[r] * g
            thetas_a[k] = thetas_a[k] - rates[r] * problem.blocks_a[k].grad(thetas_a[k])
        if averaged:
            mean = np.mean(thetas_b, axis=0)
            thetas_b = [mean.copy() for _ in range(K)]
    return GapTrace(gaps_b, gaps_a, gmax)


def theoretical_bound(params: BoundParams, schedule: str = "fixed") -> float:
    """Average-regret bound.

    fixed: ``I²/(2Rη) + M²η/2``.  decaying (``η_r = r^{-1/2}``):
    ``(I² + M²)/(2√R) − M²/R``; ``params.eta`` is ignored there.
    """
    I2, M2, R = params.I**2, params.M**2, params.R
    if schedule == "fixed":
        return I2 / (2.0 * R * params.eta) + M2 * params.eta / 2.0
    if schedule == "decaying":
        return (I2 + M2) / (2.0 * math.sqrt(R)) - M2 / R
    raise ValueError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")


def verify_bound(gaps, bound: float) -> BoundReport:
    """Compare the mean gap over rounds with ``bound``.

    ``gaps`` is ``(R,)`` or ``(K, R)``; with several clients the worst
    client's mean is used, so the bound must hold for every client.
    """
    g = np.atleast_2d(np.asarray(gaps, dtype=np.float64))
    if g.size == 0:
        raise ValueError("no gaps given")
    mean_gap = float(np.max(g.mean(axis=1)))
    return BoundReport(mean_gap, float(bound), bool(mean_gap <= bound), float(bound - mean_gap))


@dataclass
class SweepRow:
    seed: int
    schedule: str
    eta: float
    R: int
    mean_gap: float
    bound: float
    holds: bool
    slack: float
    averaged_mean_gap: float
    max_grad_norm: float
    M: float


def sweep(seeds: Sequence[int] | int = 50, K: int = 5, dim_b: int = 2048, dim_a: int = 64, eta: float = 1.0,
          R: int = 100, schedules: Sequence[str] = SCHEDULES, conditioning: float = 10.0) -> list[SweepRow]:
    """Bound check on one surrogate per seed and schedule.

    The averaged-codebook process is reported alongside but never decides
    ``holds``.
    """
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    rows = []
    for seed in seed_list:
        prob = make_surrogate(K, dim_a, dim_b, conditioning, seed)
        for schedule in schedules:
            trace = run_sgd_rounds(prob, eta, R, schedule)
            avg = run_sgd_rounds(prob, eta, R, schedule, averaged=True)
            step = eta if schedule == "fixed" else 1.0
            bound = theoretical_bound(BoundParams(prob.I, prob.M, step, R), schedule)
            rep = verify_bound(trace.gaps_b, bound)
            rows.append(SweepRow(seed, schedule, eta if schedule == "fixed" else float("nan"), R, rep.mean_gap,
                                 rep.bound, rep.holds, rep.slack, float(np.max(avg.gaps_b.mean(axis=1))),
                                 trace.max_grad_norm, prob.M))
    return rows


def report_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "schedule", "eta", "R", "mean_gap", "bound", "holds", "slack", "averaged_mean_gap"])
    for r in rows:
        eta = "r^-1/2" if r.schedule == "decaying" else repr(r.eta)
        w.writerow([r.seed, r.schedule, eta, r.R, repr(r.mean_gap), repr(r.bound), "true" if r.holds else "false",
                    repr(r.slack), repr(r.averaged_mean_gap)])
    return buf.getvalue()
