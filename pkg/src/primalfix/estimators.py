"""Plug-in, one-step and targeted estimators of E[Y(a0)] and of the average causal effect.

Notation used throughout: ``a1 = 1 - a0``; ``a_Y`` and ``a_{Z_k}`` are the treatment
levels attached to the outcome and mediators by :class:`~primalfix.graph.CausalPartition`.
The efficient influence function is split into four blocks,

* ``Y``:  I(A = a_Y) R_Y (Y - mu)
* ``Z_k``: I(A = a_{Z_k}) R_{Z_k} (B_{k+1} - B_k), with B_{K+1} = mu
* ``A``:  (I(A = a1) - pi(a1)) B_1
* ``rem``: pi(a1) B_1 + I(A = a0) Y - psi
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from .data import Dataset, validate_query
from .graph import Admg, CausalPartition, partition_mlx, topological_order
from .nuisance import NuisanceConfig, NuisanceSet, evaluate_nuisances

__all__ = [
    "EstimationError",
    "ESTIMATORS",
    "EifComponents",
    "TmleStep",
    "TmleTrace",
    "EstimateReport",
    "FoldPlan",
    "make_fold_plan",
    "eif",
    "plug_in",
    "one_step",
    "tmle",
    "cross_fit",
    "ace",
    "estimate",
    "solve_logistic_fluctuation",
    "Z_975",
]

ESTIMATORS = ("plugin", "onestep", "tmle")
Z_975 = float(norm.ppf(0.975))


class EstimationError(ValueError):
    """Raised when an estimate cannot be formed from the supplied inputs."""


@dataclass(frozen=True)
class EifComponents:
    """Row-wise blocks of the efficient influence function."""

    y: np.ndarray
    z: tuple[np.ndarray, ...]
    a: np.ndarray
    rem: np.ndarray

    @property
    def total(self) -> np.ndarray:
        out = self.y + self.a + self.rem
        for block in self.z:
            out = out + block
        return out


def _levels(p: CausalPartition, a0: int):
    return {v: p.level(v, a0) for v in (*p.mediators, p.outcome)}


def eif(
    dataset: Dataset,
    partition: CausalPartition,
    Q: NuisanceSet,
    a0: int | None = None,
    psi: float | None = None,
) -> EifComponents:
    """Evaluate every block of the efficient influence function on each row.

    ``psi`` defaults to the plug-in value computed from ``Q``.
    """
    a0 = Q.a0 if a0 is None else a0
    if a0 != Q.a0:
        raise EstimationError("nuisances were fitted for a different reference level")
    if Q.partition != partition:
        raise EstimationError("nuisances were fitted for a different partition")
    Q.check()
    p = partition
    A = dataset.scalar(p.treatment)
    Y = dataset.scalar(p.outcome)
    levels = _levels(p, a0)
    if psi is None:
        psi = _plug_in_value(dataset, p, Q)
    phi_y = (A == levels[p.outcome]) * Q.R_Y * (Y - Q.mu)
    nexts = list(Q.B[1:]) + [Q.mu]
    phi_z = tuple(
        (A == levels[z]) * r * (nxt - b) for z, r, nxt, b in zip(p.mediators, Q.R, nexts, Q.B)
    )
    b1 = Q.first_regression
    pi1 = Q.pi_a1
    phi_a = ((A == 1 - a0) - pi1) * b1
    rem = pi1 * b1 + (A == a0) * Y - psi
    return EifComponents(phi_y, phi_z, phi_a, rem)


def _plug_in_value(dataset: Dataset, p: CausalPartition, Q: NuisanceSet) -> float:
    A = dataset.scalar(p.treatment)
    Y = dataset.scalar(p.outcome)
    return float(np.mean(Q.pi_a1 * Q.first_regression) + np.mean((A == Q.a0) * Y))


@dataclass(frozen=True)
class TmleStep:
    """One targeting pass.

    ``score_*`` are the empirical means of the EIF blocks and ``pn_eif`` the mean of
    the whole EIF, all evaluated at the nuisances reached at the end of the pass.
    """

    eps_a: float
    eps_y: float
    eps_z: tuple[float, ...]
    score_a: float
    score_y: float
    score_z: tuple[float, ...]
    pn_eif: float
    threshold: float


@dataclass(frozen=True)
class TmleTrace:
    steps: tuple[TmleStep, ...]
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with its influence-function-based uncertainty.

    ``influence`` holds the estimated EIF per row (centred at ``psi``) and
    ``nuisance`` the nuisance set the estimate was computed from; neither is serialized.
    """

    a0: int | None
    psi: float
    se: float | None
    ci_lower: float | None
    ci_upper: float | None
    estimator: str
    strategy: str
    n: int
    sigma: float | None = None
    converged: bool | None = None
    iterations: int | None = None
    eif_mean: float | None = None
    diagnostics: tuple[str, ...] = ()
    trace: TmleTrace | None = None
    crossfit: int | None = None
    influence: np.ndarray | None = field(default=None, repr=False, compare=False)
    nuisance: NuisanceSet | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "a0": self.a0,
            "psi": self.psi,
            "se": self.se,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "estimator": self.estimator,
            "strategy": self.strategy,
            "converged": self.converged,
            "iterations": self.iterations,
            "eif_mean": self.eif_mean,
            "diagnostics": list(self.diagnostics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _with_interval(psi: float, influence: np.ndarray, **kwargs) -> dict:
    n = len(influence)
    sigma = float(np.std(influence, ddof=1)) if n > 1 else float("nan")
    se = sigma / math.sqrt(n)
    return dict(psi=psi, se=se, sigma=sigma, ci_lower=psi - Z_975 * se, ci_upper=psi + Z_975 * se, **kwargs)


def plug_in(dataset: Dataset, partition: CausalPartition, Q: NuisanceSet, a0: int | None = None) -> EstimateReport:
    """Substitution estimator mean(pi(a1) B_1) + mean(I(A = a0) Y); carries no standard error."""
    a0 = Q.a0 if a0 is None else a0
    phi = eif(dataset, partition, Q, a0)
    psi = _plug_in_value(dataset, partition, Q)
    return EstimateReport(
        a0=a0,
        psi=psi,
        se=None,
        ci_lower=None,
        ci_upper=None,
        estimator="plugin",
        strategy=Q.strategy,
        n=dataset.n,
        eif_mean=float(np.mean(phi.total)),
        diagnostics=("plug-in: no valid SE",) + Q.diagnostics,
        nuisance=Q,
    )


def one_step(dataset: Dataset, partition: CausalPartition, Q: NuisanceSet, a0: int | None = None) -> EstimateReport:
    """Plug-in plus the empirical mean of the estimated influence function.

    ``eif_mean`` reports that correction term.
    """
    a0 = Q.a0 if a0 is None else a0
    base = _plug_in_value(dataset, partition, Q)
    phi = eif(dataset, partition, Q, a0, base).total
    correction = float(np.mean(phi))
    psi = base + correction
    influence = phi - correction
    return EstimateReport(
        a0=a0,
        estimator="onestep",
        strategy=Q.strategy,
        n=dataset.n,
        eif_mean=correction,
        diagnostics=Q.diagnostics,
        influence=influence,
        nuisance=Q,
        **_with_interval(psi, influence),
    )


def solve_logistic_fluctuation(
    target: np.ndarray,
    offset: np.ndarray,
    covariate: np.ndarray,
    weights: np.ndarray | None = None,
    clip: float = 0.0,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> tuple[float, bool]:
    """Root of sum(w * c * (target - expit(offset + eps * c))) in ``eps``.

    Safeguarded Newton: each Newton step is accepted only if it stays inside the
    current sign-change bracket and reduces the score; otherwise the step is halved
    towards the bracket midpoint. ``tol`` applies to the score divided by the number
    of rows. Returns ``(eps, converged)``.
    """
    w = np.ones_like(covariate) if weights is None else weights
    wc = w * covariate
    n = max(len(target), 1)
    lo_p, hi_p = clip, 1.0 - clip

    def probs(eps):
        return np.clip(expit(offset + eps * covariate), lo_p, hi_p)

    def score(eps):
        return float(np.sum(wc * (target - probs(eps)))) / n

    f0 = score(0.0)
    if abs(f0) <= tol:
        return 0.0, True
    # the score is non-increasing in eps; find a bracket with a sign change
    direction = 1.0 if f0 > 0 else -1.0
    lo, flo = 0.0, f0
    step = 1.0
    hi, fhi = None, None
    for _ in range(80):
        cand = direction * step
        fc = score(cand)
        if fc == 0.0:
            return cand, True
        if np.sign(fc) != np.sign(f0):
            hi, fhi = cand, fc
            break
        lo, flo = cand, fc
        step *= 2.0
    if hi is None:
        return lo, False
    a, fa, b, fb = (lo, flo, hi, fhi) if lo < hi else (hi, fhi, lo, flo)
    eps, feps = (a, fa) if abs(fa) < abs(fb) else (b, fb)
    for _ in range(max_iter):
        if abs(feps) <= tol:
            return eps, True
        p = probs(eps)
        free = (p > lo_p) & (p < hi_p)
        deriv = -float(np.sum(wc * covariate * p * (1 - p) * free)) / n
        newton = eps - feps / deriv if deriv < 0 else None
        if newton is not None and a < newton < b:
            cand = newton
        else:
            cand = 0.5 * (a + b)
        fc = score(cand)
        if abs(fc) >= abs(feps) and cand != 0.5 * (a + b):
            cand = 0.5 * (a + b)
            fc = score(cand)
        if fc > 0:
            a, fa = cand, fc
        else:
            b, fb = cand, fc
        eps, feps = cand, fc
        if b - a <= 1e-15 * max(1.0, abs(a), abs(b)):
            return eps, abs(feps) <= 1e-8
    return eps, abs(feps) <= tol


def _logit(p: np.ndarray) -> np.ndarray:
    return logit(np.clip(p, 1e-15, 1 - 1e-15))


def tmle(
    dataset: Dataset,
    partition: CausalPartition,
    Q0: NuisanceSet,
    a0: int | None = None,
    threshold: float | None = None,
    max_iters: int = 200,
    score_tol: float = 1e-8,
) -> EstimateReport:
    """Targeted estimator: fluctuate the nuisances until the EIF mean is negligible.

    Each pass updates the propensity (logistic fluctuation with covariate B_1), the
    outcome regression (weights I(A = a_Y) R_Y), then for k = K..1 refits B_k on the
    updated B_{k+1} and shifts it (weights I(A = a_{Z_k}) R_{Z_k}). Binary outcomes use
    logistic fluctuations so every regression stays in [0, 1]. Iteration stops when
    |mean EIF| falls below ``threshold`` (default sigma / (sqrt(n) log n)) and the
    mean of every EIF block is below ``score_tol``.
    """
    a0 = Q0.a0 if a0 is None else a0
    p = partition
    if Q0.partition != p:
        raise EstimationError("nuisances were fitted for a different partition")
    n = dataset.n
    A = dataset.scalar(p.treatment)
    Y = dataset.scalar(p.outcome)
    levels = _levels(p, a0)
    a1 = 1 - a0
    ind_a1 = (A == a1).astype(float)
    ind_y = (A == levels[p.outcome]).astype(float)
    ind_z = [(A == levels[z]).astype(float) for z in p.mediators]
    binary = Q0.binary_outcome
    clip = Q0.config.clip
    Q = Q0
    steps = []
    converged = False
    psi = float("nan")
    phi = None
    for _ in range(max_iters):
        # propensity
        b1 = Q.first_regression
        pi1 = Q.pi_a1
        eps_a, _ok = solve_logistic_fluctuation(ind_a1, _logit(pi1), b1, clip=clip)
        pi1_new = np.clip(expit(_logit(pi1) + eps_a * b1), clip, 1 - clip)
        Q = Q.with_propensity(pi1_new if a1 == 1 else 1.0 - pi1_new)
        # outcome regression
        w = ind_y * Q.R_Y
        if binary:
            eps_y, _ok = solve_logistic_fluctuation(Y, _logit(Q.mu), Q.R_Y, ind_y, clip=clip)
            mu = np.clip(expit(_logit(Q.mu) + eps_y * Q.R_Y), clip, 1 - clip)
        else:
            eps_y = float(np.sum(w * (Y - Q.mu)) / np.sum(w)) if np.sum(w) > 0 else 0.0
            mu = Q.mu + eps_y
        Q = replace(Q, mu=mu)
        # sequential regressions, last mediator first
        B = list(Q.B)
        eps_z = [0.0] * p.K
        for k in range(p.K - 1, -1, -1):
            nxt = B[k + 1] if k + 1 < p.K else Q.mu
            bk = Q.refit_sequential(k, nxt)
            wk = ind_z[k] * Q.R[k]
            if binary:
                bk = np.clip(bk, clip, 1 - clip)
                e, _ok = solve_logistic_fluctuation(nxt, _logit(bk), Q.R[k], ind_z[k], clip=clip)
                bk = np.clip(expit(_logit(bk) + e * Q.R[k]), clip, 1 - clip)
            else:
                e = float(np.sum(wk * (nxt - bk)) / np.sum(wk)) if np.sum(wk) > 0 else 0.0
                bk = bk + e
            B[k] = bk
            eps_z[k] = e
        Q = replace(Q, B=tuple(B))
        psi = _plug_in_value(dataset, p, Q)
        blocks = eif(dataset, p, Q, a0, psi)
        phi = blocks.total
        pn = float(np.mean(phi))
        sigma = float(np.std(phi, ddof=1))
        thr = threshold if threshold is not None else sigma / (math.sqrt(n) * math.log(n))
        score_a = float(np.mean(blocks.a))
        score_y = float(np.mean(blocks.y))
        score_z = tuple(float(np.mean(z)) for z in blocks.z)
        steps.append(TmleStep(eps_a, eps_y, tuple(eps_z), score_a, score_y, score_z, pn, thr))
        worst = max([abs(score_a), abs(score_y), *map(abs, score_z)])
        if abs(pn) < thr and worst < score_tol:
            converged = True
            break
    trace = TmleTrace(tuple(steps), converged)
    diagnostics = Q0.diagnostics
    if not converged:
        diagnostics = diagnostics + (
            f"TMLE did not converge in {max_iters} iterations: |P_n EIF| = {abs(steps[-1].pn_eif):.3g} "
            f"(threshold {steps[-1].threshold:.3g}), largest block mean {worst:.3g}",
        )
    influence = phi - np.mean(phi)
    return EstimateReport(
        a0=a0,
        estimator="tmle",
        strategy=Q0.strategy,
        n=n,
        converged=converged,
        iterations=trace.iterations,
        eif_mean=steps[-1].pn_eif,
        diagnostics=diagnostics,
        trace=trace,
        influence=influence,
        nuisance=Q,
        **_with_interval(psi, influence),
    )


# ---------------------------------------------------------------- cross-fitting


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of every row to one of ``K`` folds."""

    K: int
    assignment: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        assignment = np.asarray(self.assignment, dtype=int)
        if self.K < 2:
            raise EstimationError("cross-fitting needs at least two folds")
        if assignment.min() < 0 or assignment.max() >= self.K:
            raise EstimationError("fold labels must lie in 0..K-1")
        object.__setattr__(self, "assignment", assignment)

    def pairs(self) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
        """(training rows, held-out rows) for each fold."""
        idx = np.arange(len(self.assignment))
        return tuple((idx[self.assignment != k], idx[self.assignment == k]) for k in range(self.K))


def make_fold_plan(n: int, K: int, seed: int = 0) -> FoldPlan:
    """Random balanced folds: sizes differ by at most one."""
    if K < 2:
        raise EstimationError("cross-fitting needs at least two folds")
    if K > n:
        raise EstimationError(f"cannot split {n} rows into {K} folds")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=int)
    assignment[rng.permutation(n)] = np.arange(n) % K
    return FoldPlan(K, assignment, seed)


def _run(estimator: str, dataset, partition, Q, a0, tmle_options) -> EstimateReport:
    if estimator == "plugin":
        return plug_in(dataset, partition, Q, a0)
    if estimator == "onestep":
        return one_step(dataset, partition, Q, a0)
    if estimator == "tmle":
        return tmle(dataset, partition, Q, a0, **(tmle_options or {}))
    raise EstimationError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")


def cross_fit(
    dataset: Dataset,
    partition: CausalPartition,
    estimator: str,
    strategy: str,
    config: NuisanceConfig | None = None,
    K: int = 5,
    seed: int = 0,
    a0: int = 1,
    fold_plan: FoldPlan | None = None,
    tmle_options: dict | None = None,
) -> EstimateReport:
    """Estimate with nuisances trained off-fold.

    Every fold's held-out rows get predictions from models trained on the other folds.
    The estimator then runs once on the pooled out-of-fold predictions; TMLE uses a
    single fluctuation per step and refits sequential regressions fold by fold.
    """
    plan = fold_plan or make_fold_plan(dataset.n, K, seed)
    if len(plan.assignment) != dataset.n:
        raise EstimationError("fold plan does not match the number of rows")
    A = dataset.scalar(partition.treatment)
    for k, (train, _) in enumerate(plan.pairs()):
        if len(np.unique(A[train])) < 2:
            raise EstimationError(f"the complement of fold {k} has a degenerate treatment arm")
    Q = evaluate_nuisances(dataset, partition, config, strategy, a0, plan.pairs())
    report = _run(estimator, dataset, partition, Q, a0, tmle_options)
    return replace(report, crossfit=plan.K)


# ---------------------------------------------------------------- contrasts and pipeline


def ace(report_a1: EstimateReport, report_a0: EstimateReport) -> EstimateReport:
    """E[Y(1)] - E[Y(0)] with the standard error of the row-wise EIF difference."""
    if report_a1.a0 != 1 or report_a0.a0 != 0:
        raise EstimationError("ace expects reports for a0 = 1 and a0 = 0, in that order")
    if (report_a1.estimator, report_a1.strategy, report_a1.n, report_a1.crossfit) != (
        report_a0.estimator,
        report_a0.strategy,
        report_a0.n,
        report_a0.crossfit,
    ):
        raise EstimationError("reports come from different estimators or datasets")
    psi = report_a1.psi - report_a0.psi
    diagnostics = tuple(dict.fromkeys(report_a1.diagnostics + report_a0.diagnostics))
    converged = None
    if report_a1.converged is not None:
        converged = bool(report_a1.converged and report_a0.converged)
    common = dict(
        a0=None,
        estimator=report_a1.estimator,
        strategy=report_a1.strategy,
        n=report_a1.n,
        converged=converged,
        diagnostics=diagnostics,
        crossfit=report_a1.crossfit,
    )
    if report_a1.influence is None or report_a0.influence is None:
        return EstimateReport(psi=psi, se=None, ci_lower=None, ci_upper=None, **common)
    influence = report_a1.influence - report_a0.influence
    return EstimateReport(influence=influence, **common, **_with_interval(psi, influence))


def estimate(
    dataset: Dataset,
    admg: Admg,
    treatment: str,
    outcome: str,
    a0: int = 1,
    estimator: str = "tmle",
    strategy: str = "bayes",
    config: NuisanceConfig | None = None,
    crossfit: int | None = None,
    seed: int = 0,
    order: Sequence[str] | None = None,
    tmle_options: dict | None = None,
) -> EstimateReport:
    """Validate the query, partition the graph, fit nuisances and run one estimator."""
    if estimator not in ESTIMATORS:
        raise EstimationError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
    problems = validate_query(dataset, admg, treatment, outcome)
    if problems:
        raise EstimationError("; ".join(str(d) for d in problems))
    order = tuple(order) if order is not None else topological_order(admg, treatment, outcome)
    partition = partition_mlx(admg, order, treatment, outcome)
    if crossfit:
        return cross_fit(dataset, partition, estimator, strategy, config, crossfit, seed, a0,
                         tmle_options=tmle_options)
    Q = evaluate_nuisances(dataset, partition, config, strategy, a0)
    return _run(estimator, dataset, partition, Q, a0, tmle_options)
