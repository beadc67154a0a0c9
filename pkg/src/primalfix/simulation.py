"""Data-generating processes, Monte-Carlo truth and the replication harness.

Every DGP is a hidden-variable linear-Gaussian (or logistic-outcome) model over
``X, A, M = (M1, M2), L, Y``. Besides a structural sampler that draws the hidden
variables, each DGP exposes the closed-form *observed* conditional laws (propensity,
mediator means and covariances, outcome regression); these drive the truth oracle
and the true nuisance functions.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import catalog
from .data import Dataset
from .estimators import EstimateReport, eif, make_fold_plan, one_step, plug_in, tmle
from .graph import Admg, CausalPartition, merge_vertices, partition_mlx, topological_order
from .learners import BasisLearner, TreeEnsembleLearner
from .nuisance import NuisanceConfig, NuisanceSet, evaluate_nuisances, ratio_products

__all__ = [
    "SimulationError",
    "DGPS",
    "Dgp",
    "DgpSpec",
    "get_dgp",
    "generate",
    "true_psi",
    "true_psi_terms",
    "true_nuisances",
    "eif_variance",
    "EstimatorSpec",
    "ExperimentConfig",
    "ExperimentResult",
    "MetricsRow",
    "run_experiment",
    "consistency_curve",
    "load_experiment_config",
    "replication_seeds",
]

SIGMA_M = np.array([[2.0, 1.0], [1.0, 3.0]])
TRUTH_DRAWS = 2_000_000
TRUTH_SEED = 20240611


class SimulationError(ValueError):
    """Raised for unknown DGPs or invalid experiment configurations."""


# ---------------------------------------------------------------- DGP building blocks


def _x_uniform(rng: np.random.Generator, n: int, dim: int = 1) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(n, dim))


def _mvn(rng: np.random.Generator, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    return mean + rng.standard_normal(mean.shape) @ chol.T


@dataclass(frozen=True)
class Dgp:
    """A data-generating process and its observed conditional laws.

    Attributes
    ----------
    name : str
    graph : callable returning the ADMG the emitted columns are bound to
    x_dim : int
    propensity : P(A = 1 | X)
    m_mean : E[M | A, X] as an (n, 2) array; the covariance is ``m_cov``
    l_mean, l_var : mean and variance of L given (M, A, X)
    y_mean : E[Y | L, M, A, X]; for a binary outcome this is P(Y = 1 | L, M, A, X)
    y_var : variance of Y given (L, M, A, X) (continuous outcomes)
    structural : callable drawing (X, A, M, L, Y) from the hidden-variable model
    binary_outcome : bool
    """

    name: str
    graph: Callable[[], Admg]
    x_dim: int
    propensity: Callable
    m_mean: Callable
    l_mean: Callable
    l_var: float
    y_mean: Callable
    y_var: float
    structural: Callable
    m_cov: np.ndarray = field(default_factory=lambda: SIGMA_M)
    binary_outcome: bool = False

    def partition(self) -> CausalPartition:
        g = self.graph()
        return partition_mlx(g, topological_order(g, "A", "Y"), "A", "Y")


def _sum_m(m):
    return m[:, 0] + m[:, 1]


# propensities
def _pi_standard(x):
    return expit(1.0 + x[:, 0])


def _pi_weak(x):
    # ranges over [0.001, 0.999] as X ranges over [0, 1]
    return 0.001 + 0.998 * x[:, 0]


# ---- outcome in the treatment's district: X, A, M, L, Y with hidden U -> Y and A -> U


def _m_mean_base(a, x):
    x0 = x[:, 0]
    return np.column_stack([1 + a + x0, -1 - 0.5 * a + 2 * x0])


def _m_mean_inter(a, x):
    x0 = x[:, 0]
    return np.column_stack([1 + a + x0 + a * x0, -1 - 0.5 * a + 2 * x0 - a * x0])


def _make_in_district(name, propensity, interactions=False, binary=False):
    m_mean = _m_mean_inter if interactions else _m_mean_base

    def u_mean(a, x):
        x0 = x[:, 0]
        return 1 + a + x0 + (a * x0 if interactions else 0)

    def l_mean(m, a, x):
        x0 = x[:, 0]
        out = 1 + a + _sum_m(m) + x0
        if interactions:
            out = out + a * x0 + _sum_m(m) * x0
        return out

    if binary:
        def u_prob(a, x):
            return expit(-1 + a + x[:, 0])

        def y_linear(l, m, x, u):
            return -2 + 0.3 * l + 0.2 * _sum_m(m) + x[:, 0] + u

        def y_mean(l, m, a, x):
            pu = u_prob(a, x)
            return pu * expit(y_linear(l, m, x, 1.0)) + (1 - pu) * expit(y_linear(l, m, x, 0.0))

        def draw_y(rng, l, m, a, x):
            u = (rng.uniform(size=len(a)) < u_prob(a, x)).astype(float)
            return (rng.uniform(size=len(a)) < expit(y_linear(l, m, x, u))).astype(float)

        y_var = float("nan")
    else:
        def y_mean(l, m, a, x):
            x0 = x[:, 0]
            out = 1 + l + _sum_m(m) + x0 + u_mean(a, x)
            if interactions:
                out = out + l * x0
            return out

        def draw_y(rng, l, m, a, x):
            x0 = x[:, 0]
            u = u_mean(a, x) + rng.standard_normal(len(a))
            out = 1 + l + _sum_m(m) + x0 + u
            if interactions:
                out = out + l * x0
            return out + rng.standard_normal(len(a))

        y_var = 2.0

    def structural(rng, n):
        x = _x_uniform(rng, n)
        a = (rng.uniform(size=n) < propensity(x)).astype(float)
        m = _mvn(rng, m_mean(a, x), SIGMA_M)
        l = l_mean(m, a, x) + rng.standard_normal(n)
        y = draw_y(rng, l, m, a, x)
        return x, a, m, l, y

    return Dgp(
        name=name,
        graph=catalog.mediators_treatment_outcome_confounded,
        x_dim=1,
        propensity=propensity,
        m_mean=m_mean,
        l_mean=l_mean,
        l_var=1.0,
        y_mean=y_mean,
        y_var=y_var,
        structural=structural,
        binary_outcome=binary,
    )


# ---- outcome outside the treatment's district: hidden U1 -> L, U2 -> Y


def _make_outside(name, propensity, interactions=False):
    # the mediator law for the interaction variant is the one without interactions
    m_mean = _m_mean_base

    def ax(a, x):
        return a * x[:, 0] if interactions else 0.0

    def u1_mean(a, x):
        return 1 + a + x[:, 0] + ax(a, x)

    def u2_mean(m, a, x):
        return 1 + _sum_m(m) + a + x[:, 0] + ax(a, x)

    def l_base(m, x):
        x0 = x[:, 0]
        out = 1 + _sum_m(m) + x0
        if interactions:
            out = out + _sum_m(m) * x0
        return out

    def l_mean(m, a, x):
        return l_base(m, x) + u1_mean(a, x)

    def y_base(l, a, x):
        x0 = x[:, 0]
        out = 1 + l + a + x0
        if interactions:
            out = out + l * x0
        return out

    def y_mean(l, m, a, x):
        return y_base(l, a, x) + u2_mean(m, a, x)

    def structural(rng, n):
        x = _x_uniform(rng, n)
        a = (rng.uniform(size=n) < propensity(x)).astype(float)
        m = _mvn(rng, m_mean(a, x), SIGMA_M)
        u1 = u1_mean(a, x) + rng.standard_normal(n)
        u2 = u2_mean(m, a, x) + rng.standard_normal(n)
        l = l_base(m, x) + u1 + rng.standard_normal(n)
        y = y_base(l, a, x) + u2 + rng.standard_normal(n)
        return x, a, m, l, y

    return Dgp(
        name=name,
        graph=catalog.mediators_outcome_outside,
        x_dim=1,
        propensity=propensity,
        m_mean=m_mean,
        l_mean=l_mean,
        l_var=2.0,
        y_mean=y_mean,
        y_var=2.0,
        structural=structural,
    )


# ---- ten covariates with quadratic terms


V_A = 0.1 * np.array(
    [0.48, 0.07, 1, -1, -0.34, -0.12, 0.3, -0.35, 1, -0.1, 0.46,
     0.33, 0, 0.45, 0.1, -0.32, -0.08, -0.2, 0.5, 0.5, -0.03]
)
V_M = 0.025 * np.array(
    [
        [3.0, 1.5, -1.5, -1.5, -1, -2, -3, -3.0, -1.5, 2.0, 1.5, 3, 1.5, 2.0, 0.5, 0.5, 3.0,
         -0.2, -0.33, 0.5, 0.3, -0.5],
        [1.5, -1.5, -3.0, 2.0, -2, 3, -3, 1.5, -1.5, -1.5, 1.5, -1, -1.5, 0.3, 3.0, -0.33, 0.5,
         0.5, 0.50, -0.2, 0.1, 0.2],
    ]
)
V_L = 0.025 * np.array(
    [-3.0, -2.0, -1.5, 1.5, -1.5, -1.0, 0.5, -1.0, 0.3, 3.0, 0.5, 1.5, 0.5, -1.5, -3.0, -0.5, 0.5, 3.0, 1.5]
)
V_Y = np.array(
    [1.0, -2.0, -3.0, -1.5, 1.0, 0.5, -2.0, 1.5, -2.0, -3.0, -3.0, -1.5, -1.0, 0.5, 3.0, 1.0, 1.5, -2.0, 3.0, -1.0]
)


def _ones(x):
    return np.ones((len(x), 1))


def _as_col(v, n):
    v = np.asarray(v, dtype=float)
    return np.broadcast_to(v, (n,)).reshape(n, 1)


def _make_ten_covariates(name):
    def propensity(x):
        return expit(np.hstack([_ones(x), x, x**2]) @ V_A)

    def m_mean(a, x):
        a = _as_col(a, len(x))
        feats = np.hstack([_ones(x), a, x, a * x[:, :5], x[:, 5:] ** 2])
        return feats @ V_M.T

    def l_mean(m, a, x):
        feats = np.hstack([_ones(x), _as_col(a, len(x)), m, x, x[:, 5:] ** 2])
        return feats @ V_L

    def u_mean(a, x):
        return 1 + a + x[:, 0]

    def y_base(l, m, x):
        feats = np.hstack([_ones(x), _as_col(l, len(x)), m, x, x[:, 5:] ** 2])
        return feats @ V_Y[:-1]

    def y_mean(l, m, a, x):
        return y_base(l, m, x) + V_Y[-1] * u_mean(a, x)

    def structural(rng, n):
        x = _x_uniform(rng, n, 10)
        a = (rng.uniform(size=n) < propensity(x)).astype(float)
        u = u_mean(a, x) + rng.standard_normal(n)
        m = _mvn(rng, m_mean(a, x), SIGMA_M)
        l = l_mean(m, a, x) + rng.standard_normal(n)
        y = y_base(l, m, x) + V_Y[-1] * u + rng.standard_normal(n)
        return x, a, m, l, y

    return Dgp(
        name=name,
        graph=lambda: catalog.mediators_treatment_outcome_confounded(x_arity=10),
        x_dim=10,
        propensity=propensity,
        m_mean=m_mean,
        l_mean=l_mean,
        l_var=1.0,
        y_mean=y_mean,
        y_var=1.0 + V_Y[-1] ** 2,
        structural=structural,
    )


DGPS: dict[str, Dgp] = {
    "yinL": _make_in_district("yinL", _pi_standard),
    "ynotL": _make_outside("ynotL", _pi_standard),
    "weak_overlap_yinL": _make_in_district("weak_overlap_yinL", _pi_weak),
    "weak_overlap_ynotL": _make_outside("weak_overlap_ynotL", _pi_weak),
    "interactions_yinL": _make_in_district("interactions_yinL", _pi_standard, interactions=True),
    "interactions_ynotL": _make_outside("interactions_ynotL", _pi_standard, interactions=True),
    "crossfit_yinL": _make_ten_covariates("crossfit_yinL"),
    "binary_yinL": _make_in_district("binary_yinL", _pi_standard, binary=True),
    "weak_overlap_binary_yinL": _make_in_district("weak_overlap_binary_yinL", _pi_weak, binary=True),
}


def get_dgp(name: str) -> Dgp:
    try:
        return DGPS[name]
    except KeyError:
        raise SimulationError(f"unknown DGP {name!r}; expected one of {sorted(DGPS)}") from None


@dataclass(frozen=True)
class DgpSpec:
    name: str
    n: int
    seed: int | np.random.SeedSequence = 0

    def __post_init__(self):
        get_dgp(self.name)
        if self.n < 10:
            raise SimulationError("sample size must be at least 10")


def _to_dataset(dgp: Dgp, x, a, m, l, y) -> Dataset:
    data = {"X": x if dgp.x_dim > 1 else x[:, 0], "A": a, "M": m, "L": l, "Y": y}
    binary = ["A", "Y"] if dgp.binary_outcome else ["A"]
    return Dataset.from_vertices(data, binary=binary)


def generate(spec: DgpSpec) -> Dataset:
    """Draw ``spec.n`` rows from the structural model; hidden variables are not emitted.

    Random numbers come from numpy's PCG64 generator seeded with ``spec.seed``;
    multivariate normals use the Cholesky factor of their covariance.
    """
    dgp = get_dgp(spec.name)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    return _to_dataset(dgp, *dgp.structural(rng, spec.n))


# ---------------------------------------------------------------- truth


def _levels(dgp: Dgp, a0: int) -> dict[str, int]:
    p = dgp.partition()
    return {v: p.level(v, a0) for v in ("M", "L", "Y")}


def _psi_draws(dgp: Dgp, a0: int, x: np.ndarray, e_m: np.ndarray, e_l: np.ndarray):
    """Per-draw values of the two terms of the identifying functional.

    Term one integrates the outcome regression (at a_Y) against the mediator laws at
    their assigned levels and weights by pi(a1 | X); term two is E[I(A = a0) Y]
    written as pi(a0 | X) times the observed-law regression at A = a0. Both use the
    same standard-normal draws, and the outcome is integrated analytically.
    """
    lv = _levels(dgp, a0)
    n = len(x)
    chol = np.linalg.cholesky(dgp.m_cov)
    sd_l = math.sqrt(dgp.l_var)

    def chain(a_m, a_l, a_y):
        m = dgp.m_mean(np.full(n, float(a_m)), x) + e_m @ chol.T
        l = dgp.l_mean(m, np.full(n, float(a_l)), x) + sd_l * e_l
        return dgp.y_mean(l, m, np.full(n, float(a_y)), x)

    p1 = dgp.propensity(x)
    pi_a1 = p1 if a0 == 0 else 1 - p1
    first = pi_a1 * chain(lv["M"], lv["L"], lv["Y"])
    second = (1 - pi_a1) * chain(a0, a0, a0)
    return first, second


def true_psi_terms(
    name: str, a0: int, draws: int = 2_000_000, seed: int = TRUTH_SEED, chunk: int = 1_000_000
) -> dict:
    """Monte-Carlo evaluation of both terms of the identifying functional.

    Independent of :func:`true_psi`: mediators are drawn rather than integrated.
    Returns a mapping with ``psi``, ``se`` and the two terms with their SEs.
    """
    dgp = get_dgp(name)
    rng = np.random.Generator(np.random.PCG64(seed))
    sums = np.zeros(3)
    sq = np.zeros(3)
    done = 0
    while done < draws:
        k = min(chunk, draws - done)
        x = _x_uniform(rng, k, dgp.x_dim)
        e_m = rng.standard_normal((k, 2))
        e_l = rng.standard_normal(k)
        first, second = _psi_draws(dgp, a0, x, e_m, e_l)
        vals = np.vstack([first, second, first + second])
        sums += vals.sum(axis=1)
        sq += (vals**2).sum(axis=1)
        done += k
    mean = sums / draws
    var = np.maximum(sq / draws - mean**2, 0.0)
    se = np.sqrt(var / draws)
    return {
        "psi": float(mean[2]),
        "se": float(se[2]),
        "treated_term": float(mean[0]),
        "treated_term_se": float(se[0]),
        "observed_term": float(mean[1]),
        "observed_term_se": float(se[1]),
        "draws": draws,
        "seed": seed,
    }


def true_psi(name: str, a0: int, draws: int = TRUTH_DRAWS, seed: int = TRUTH_SEED) -> tuple[float, float]:
    """(value, numerical SE) of E[Y(a0)] for a named DGP.

    Mediators are integrated out by Gauss-Hermite quadrature. A scalar covariate is
    then integrated by Gauss-Legendre quadrature and the SE is reported as 0; a
    vector covariate is averaged over ``draws`` Monte-Carlo draws.
    """
    dgp = get_dgp(name)
    if dgp.x_dim == 1:
        nodes, weights = np.polynomial.legendre.leggauss(QUAD_X_NODES)
        x = (0.5 * (nodes + 1.0))[:, None]
        return float(0.5 * weights @ _psi_integrand(dgp, a0, x)), 0.0
    rng = np.random.Generator(np.random.PCG64(seed))
    total = total_sq = 0.0
    done = 0
    while done < draws:
        k = min(200_000, draws - done)
        vals = _psi_integrand(dgp, a0, _x_uniform(rng, k, dgp.x_dim))
        total += vals.sum()
        total_sq += (vals**2).sum()
        done += k
    mean = total / draws
    return float(mean), float(math.sqrt(max(total_sq / draws - mean**2, 0.0) / draws))


# ---------------------------------------------------------------- true nuisances


QUAD_X_NODES = 64


def _hermite(dgp: Dgp):
    # three nodes integrate the affine Gaussian-outcome regressions exactly
    nodes, weights = np.polynomial.hermite_e.hermegauss(12 if dgp.binary_outcome else 3)
    return nodes, weights / weights.sum()


def _level(v, n):
    return np.full(n, float(v))


def _integrate_l(dgp: Dgp, m, x, a_l, a_y):
    """E[mu(L, m, x, a_y) | M = m, X = x, A = a_l]."""
    n = len(x)
    centre = dgp.l_mean(m, _level(a_l, n), x)
    sd = math.sqrt(dgp.l_var)
    total = np.zeros(n)
    for node, w in zip(*_hermite(dgp)):
        total += w * dgp.y_mean(centre + sd * node, m, _level(a_y, n), x)
    return total


def _integrate_ml(dgp: Dgp, x, a_m, a_l, a_y):
    """E over M (at a_m) of the L-integrated outcome regression."""
    n = len(x)
    centre = dgp.m_mean(_level(a_m, n), x)
    chol = np.linalg.cholesky(dgp.m_cov)
    nodes, weights = _hermite(dgp)
    total = np.zeros(n)
    for i, wi in enumerate(weights):
        for j, wj in enumerate(weights):
            shift = chol @ np.array([nodes[i], nodes[j]])
            total += wi * wj * _integrate_l(dgp, centre + shift, x, a_l, a_y)
    return total


def _psi_integrand(dgp: Dgp, a0: int, x: np.ndarray) -> np.ndarray:
    """pi(a1 | x) B_M(x) + pi(a0 | x) E[Y | A = a0, x], mediators integrated out."""
    lv = _levels(dgp, a0)
    p1 = dgp.propensity(x)
    pi_a1 = p1 if a0 == 0 else 1 - p1
    treated = _integrate_ml(dgp, x, lv["M"], lv["L"], lv["Y"])
    observed = _integrate_ml(dgp, x, a0, a0, a0)
    return pi_a1 * treated + (1 - pi_a1) * observed


def _normal_pdf_ratio(z, mean_num, mean_den, cov):
    """N(z; mean_num, cov) / N(z; mean_den, cov) row-wise."""
    prec = np.linalg.inv(np.atleast_2d(cov))
    z = z.reshape(len(z), -1)
    mean_num = mean_num.reshape(len(z), -1)
    mean_den = mean_den.reshape(len(z), -1)
    rn = z - mean_num
    rd = z - mean_den
    q = np.einsum("ij,jk,ik->i", rd, prec, rd) - np.einsum("ij,jk,ik->i", rn, prec, rn)
    return np.exp(0.5 * q)


def true_nuisances(name: str, dataset: Dataset, a0: int, clip: float = 1e-6) -> NuisanceSet:
    """Nuisance set built from the DGP's closed-form observed laws.

    Sequential regressions integrate the outcome regression over L and then M by
    Gauss-Hermite quadrature.
    """
    dgp = get_dgp(name)
    p = dgp.partition()
    lv = _levels(dgp, a0)
    n = dataset.n
    x = dataset.vertex("X")
    m = dataset.vertex("M")
    l = dataset.scalar("L")
    mu = dgp.y_mean(l, m, _level(lv["Y"], n), x)
    b_m = _integrate_ml(dgp, x, lv["M"], lv["L"], lv["Y"])
    b_l = _integrate_l(dgp, m, x, lv["L"], lv["Y"])
    p_treat = np.clip(dgp.propensity(x), clip, 1 - clip)
    m_num = dgp.m_mean(_level(lv["M"], n), x)
    m_den = dgp.m_mean(_level(1 - lv["M"], n), x)
    l_num = dgp.l_mean(m, _level(lv["L"], n), x)
    l_den = dgp.l_mean(m, _level(1 - lv["L"], n), x)
    ratios = (
        np.maximum(_normal_pdf_ratio(m, m_num, m_den, dgp.m_cov), clip),
        np.maximum(_normal_pdf_ratio(l, l_num, l_den, np.array([[dgp.l_var]])), clip),
    )
    R, R_Y = ratio_products(p, a0, p_treat, ratios, clip)
    idx = np.arange(n)
    return NuisanceSet(
        partition=p,
        a0=a0,
        strategy="truth",
        config=NuisanceConfig(clip=clip),
        dataset=dataset,
        p_treat=p_treat,
        mu=mu,
        B=(b_m, b_l),
        mediator_ratios=ratios,
        R=R,
        R_Y=R_Y,
        tied_h=None,
        folds=((idx, idx),),
    )


def eif_variance(name: str, a0: int, n: int = 1_000_000, seed: int = 7, psi: float | None = None) -> float:
    """Monte-Carlo estimate of Var(EIF) = E[EIF^2] under the true nuisances."""
    dgp = get_dgp(name)
    ds = generate(DgpSpec(name, n, seed))
    Q = true_nuisances(name, ds, a0)
    if psi is None:
        psi = true_psi(name, a0, draws=2_000_000)[0]
    phi = eif(ds, dgp.partition(), Q, a0, psi).total
    return float(np.mean(phi**2))


# ---------------------------------------------------------------- experiments


LEARNERS = ("basis", "trees")


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator arm of an experiment.

    ``omit_regression`` / ``omit_ratio`` drop vertices from the regression or ratio
    group to misspecify it; ``merge`` contracts a group of vertices into a single
    multivariate vertex before estimation.
    """

    estimator: str
    strategy: str
    basis: str = "main_terms"
    degree: int = 2
    learner: str = "basis"
    crossfit: int | None = None
    omit_regression: tuple[str, ...] = ()
    omit_ratio: tuple[str, ...] = ()
    merge: tuple[str, ...] = ()
    label: str | None = None

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise SimulationError(f"unknown learner {self.learner!r}; expected one of {LEARNERS}")
        for name in ("omit_regression", "omit_ratio", "merge"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        parts = [self.estimator, self.strategy]
        if self.basis != "main_terms":
            parts.append(self.basis)
        if self.learner != "basis":
            parts.append(self.learner)
        if self.crossfit:
            parts.append(f"cf{self.crossfit}")
        if self.omit_regression:
            parts.append("mis_reg")
        if self.omit_ratio:
            parts.append("mis_ratio")
        if self.merge:
            parts.append("merged")
        return "/".join(parts)

    def nuisance_key(self) -> tuple:
        return (self.strategy, self.basis, self.degree, self.learner, self.crossfit,
                self.omit_regression, self.omit_ratio, self.merge)

    def config(self, seed: int) -> NuisanceConfig:
        if self.learner == "trees":
            learner = TreeEnsembleLearner(seed=seed)
        else:
            learner = BasisLearner(self.basis, self.degree)
        return NuisanceConfig(
            learner=learner,
            omit_regression=frozenset(self.omit_regression),
            omit_ratio=frozenset(self.omit_ratio),
            seed=seed,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """A replication study: ``replications`` datasets per sample size, every arm on each."""

    dgp: str
    n: tuple[int, ...]
    replications: int
    estimators: tuple[EstimatorSpec, ...]
    a0: int = 1
    truth: float | str = "monte_carlo"
    truth_draws: int = TRUTH_DRAWS
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        get_dgp(self.dgp)
        n = (self.n,) if isinstance(self.n, int) else tuple(int(v) for v in self.n)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.replications < 1:
            raise SimulationError("replications must be at least 1")
        if not n:
            raise SimulationError("at least one sample size is required")
        if any(v < 10 for v in n):
            raise SimulationError("sample sizes must be at least 10")
        if not self.estimators:
            raise SimulationError("at least one estimator is required")
        if self.a0 not in (0, 1):
            raise SimulationError("a0 must be 0 or 1")
        if isinstance(self.truth, str) and self.truth != "monte_carlo":
            raise SimulationError("truth must be a number or 'monte_carlo'")
        if self.threads < 1:
            raise SimulationError("threads must be at least 1")


@dataclass(frozen=True)
class Record:
    n: int
    replication: int
    label: str
    psi: float | None
    se: float | None
    ci_lower: float | None
    ci_upper: float | None
    converged: bool | None
    error: str | None = None


@dataclass(frozen=True)
class MetricsRow:
    label: str
    estimator: str
    strategy: str
    n: int
    replications: int
    failures: int
    nonconverged: int
    truth: float
    mean: float | None
    bias: float | None
    sd: float | None
    mse: float | None
    coverage: float | None
    ci_width: float | None
    sqrt_n_bias: float | None
    n_variance: float | None

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ExperimentResult:
    config: ExperimentConfig
    truth: float
    truth_se: float | None
    rows: tuple[MetricsRow, ...]
    records: tuple[Record, ...]
    diagnostics: tuple[str, ...] = ()

    def row(self, label: str, n: int | None = None) -> MetricsRow:
        for r in self.rows:
            if r.label == label and (n is None or r.n == n):
                return r
        raise KeyError(label)

    def estimates(self, label: str, n: int | None = None) -> np.ndarray:
        """Per-replication estimates (NaN for failed replications), in replication order."""
        recs = [r for r in self.records if r.label == label and (n is None or r.n == n)]
        recs.sort(key=lambda r: r.replication)
        return np.array([np.nan if r.psi is None else r.psi for r in recs])

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = list(MetricsRow.__dataclass_fields__)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(fields)
        for r in self.rows:
            writer.writerow(["" if getattr(r, f) is None else _fmt(getattr(r, f)) for f in fields])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "dgp": self.config.dgp,
                "a0": self.config.a0,
                "truth": self.truth,
                "truth_se": self.truth_se,
                "replications": self.config.replications,
                "seed": self.config.seed,
                "metrics": [r.as_dict() for r in self.rows],
                "diagnostics": list(self.diagnostics),
            },
            indent=2,
        )


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def replication_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    """Independent child seeds, one per replication, spawned from ``seed``."""
    return np.random.SeedSequence(seed).spawn(count)


def _merged_inputs(dataset: Dataset, graph: Admg, merge: Sequence[str]):
    if not merge:
        return dataset, graph
    name = "".join(merge)
    merged = merge_vertices(graph, set(merge), name)
    binding = {}
    for v in merged.names:
        if v == name:
            binding[v] = tuple(c for u in graph.names if u in merge for c in dataset.binding[u])
        else:
            binding[v] = dataset.binding[v]
    return dataset.rebind(binding), merged


def _one_replication(args) -> list[Record]:
    config, n, rep, seq = args
    dgp = get_dgp(config.dgp)
    data_seed, nuisance_seed = seq.spawn(2)
    dataset = generate(DgpSpec(config.dgp, n, data_seed))
    fit_seed = int(nuisance_seed.generate_state(1)[0])
    graph = dgp.graph()
    cache: dict = {}
    out = []
    for spec in config.estimators:
        try:
            ds, g = _merged_inputs(dataset, graph, spec.merge)
            part = partition_mlx(g, topological_order(g, "A", "Y"), "A", "Y")
            nuis_cfg = spec.config(fit_seed)
            key = spec.nuisance_key()
            if key not in cache:
                folds = None
                if spec.crossfit:
                    folds = make_fold_plan(ds.n, spec.crossfit, fit_seed).pairs()
                cache[key] = evaluate_nuisances(ds, part, nuis_cfg, spec.strategy, config.a0, folds)
            Q = cache[key]
            runner = {"plugin": plug_in, "onestep": one_step, "tmle": tmle}[spec.estimator]
            report: EstimateReport = runner(ds, part, Q, config.a0)
            out.append(Record(n, rep, spec.name, report.psi, report.se, report.ci_lower,
                              report.ci_upper, report.converged))
        except Exception as exc:  # a failed fit is recorded, not fatal
            out.append(Record(n, rep, spec.name, None, None, None, None, None, f"{type(exc).__name__}: {exc}"))
    return out


def _summarize(config: ExperimentConfig, truth: float, records: Sequence[Record]) -> tuple[MetricsRow, ...]:
    rows = []
    for n in config.n:
        for spec in config.estimators:
            recs = sorted((r for r in records if r.n == n and r.label == spec.name), key=lambda r: r.replication)
            ok = [r for r in recs if r.psi is not None]
            failures = len(recs) - len(ok)
            nonconv = sum(1 for r in ok if r.converged is False)
            if not ok:
                rows.append(MetricsRow(spec.name, spec.estimator, spec.strategy, n, len(recs), failures, nonconv,
                                       truth, None, None, None, None, None, None, None, None))
                continue
            psi = np.array([r.psi for r in ok])
            R = len(psi)
            mean = float(np.mean(psi))
            bias = mean - truth
            sd = float(np.std(psi, ddof=1)) if R > 1 else None
            mse = float(np.mean((psi - truth) ** 2))
            with_ci = [r for r in ok if r.ci_lower is not None]
            coverage = width = None
            if with_ci:
                lo = np.array([r.ci_lower for r in with_ci])
                hi = np.array([r.ci_upper for r in with_ci])
                coverage = float(np.mean((lo <= truth) & (truth <= hi)))
                width = float(np.mean(hi - lo))
            rows.append(
                MetricsRow(
                    label=spec.name,
                    estimator=spec.estimator,
                    strategy=spec.strategy,
                    n=n,
                    replications=len(recs),
                    failures=failures,
                    nonconverged=nonconv,
                    truth=truth,
                    mean=mean,
                    bias=bias,
                    sd=sd,
                    mse=mse,
                    coverage=coverage,
                    ci_width=width,
                    sqrt_n_bias=math.sqrt(n) * bias,
                    n_variance=n * sd**2 if sd is not None else None,
                )
            )
    return tuple(rows)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run every replication and summarize bias, SD, MSE, coverage and CI width per arm.

    Replication ``r`` at the ``i``-th sample size uses the ``i * R + r``-th child of
    the master seed, so results do not depend on the number of worker processes.
    """
    diagnostics = []
    if isinstance(config.truth, str):
        truth, truth_se = true_psi(config.dgp, config.a0, draws=config.truth_draws)
    else:
        truth, truth_se = float(config.truth), None
    seeds = replication_seeds(config.seed, len(config.n) * config.replications)
    jobs = [
        (config, n, r, seeds[i * config.replications + r])
        for i, n in enumerate(config.n)
        for r in range(config.replications)
    ]
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            chunks = list(pool.map(_one_replication, jobs))
    else:
        chunks = [_one_replication(job) for job in jobs]
    records = tuple(r for chunk in chunks for r in chunk)
    if config.replications == 1:
        diagnostics.append("one replication: SD, MSE decomposition and n-variance are undefined")
    failed = sum(1 for r in records if r.error)
    if failed:
        diagnostics.append(f"{failed} estimator fits failed")
    return ExperimentResult(config, truth, truth_se, _summarize(config, truth, records), records, tuple(diagnostics))


def consistency_curve(
    dgp: str,
    spec: EstimatorSpec,
    n_grid: Sequence[int],
    replications: int,
    seed: int = 0,
    a0: int = 1,
    truth: float | None = None,
    variance_draws: int = 1_000_000,
    threads: int = 1,
) -> list[dict]:
    """sqrt(n)-scaled absolute bias and n-scaled variance across sample sizes.

    Each row also carries ``var_eif``: E[EIF^2] under the true nuisances, the limit
    the n-scaled variance should approach.
    """
    grid = [int(v) for v in n_grid]
    if not grid:
        raise SimulationError("the sample-size grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise SimulationError("the sample-size grid must be increasing")
    if truth is None:
        truth = true_psi(dgp, a0)[0]
    cfg = ExperimentConfig(dgp, tuple(grid), replications, (spec,), a0, truth, seed=seed, threads=threads)
    result = run_experiment(cfg)
    var_phi = eif_variance(dgp, a0, n=variance_draws, psi=truth)
    out = []
    for n in grid:
        row = result.row(spec.name, n)
        out.append(
            {
                "n": n,
                "sqrt_n_abs_bias": None if row.bias is None else math.sqrt(n) * abs(row.bias),
                "n_variance": row.n_variance,
                "var_eif": var_phi,
                "bias": row.bias,
                "sd": row.sd,
                "replications": row.replications,
                "failures": row.failures,
            }
        )
    return out


# ---------------------------------------------------------------- config files


def _spec_from_dict(d: dict) -> EstimatorSpec:
    try:
        return EstimatorSpec(**d)
    except TypeError as exc:
        raise SimulationError(f"bad estimator entry {d}: {exc}") from exc


def load_experiment_config(path: str | Path, **overrides) -> ExperimentConfig:
    """Read an experiment JSON file.

    Keys: ``dgp``, ``n`` (int or list), ``replications``, ``estimators`` (list of
    objects with the :class:`EstimatorSpec` fields), and optionally ``a0``, ``truth``,
    ``truth_draws``, ``seed``, ``threads``. Keyword ``overrides`` replace file values
    when not ``None``.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SimulationError(f"cannot read experiment config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise SimulationError("experiment config must be a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise SimulationError(f"unknown experiment config keys: {sorted(unknown)}")
    try:
        raw["estimators"] = tuple(_spec_from_dict(e) for e in raw.get("estimators", ()))
        return ExperimentConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise SimulationError(f"invalid experiment config: {exc}") from exc


def default_threads() -> int:
    """Worker count from the PF_THREADS environment variable (default 1)."""
    try:
        return max(1, int(os.environ.get("PF_THREADS", "1")))
    except ValueError:
        return 1
