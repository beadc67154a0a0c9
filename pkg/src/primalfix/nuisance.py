"""Nuisance functionals: outcome regression, propensity, sequential regressions and
density-ratio products.

All fitted quantities are cached as per-row arrays on the rows being estimated.
Fitting on one set of rows and evaluating on another is how cross-fitting is built
(see :func:`evaluate_nuisances` and its ``folds`` argument).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .data import Dataset
from .graph import CausalPartition
from .learners import BasisLearner, FitError, Learner, PROB_CLIP, SaturatedLearner

__all__ = [
    "STRATEGIES",
    "NuisanceError",
    "NuisanceConfig",
    "NuisanceSet",
    "ConditionalGaussian",
    "GaussianDensity",
    "CellDensity",
    "ULSIF",
    "CellRatio",
    "RatioModel",
    "SequentialFit",
    "ratio_products",
    "fit_sequential_regressions",
    "fit_density_ratio_products",
    "evaluate_nuisances",
    "exact_config",
    "MIN_ARM_DENSRATIO",
]

STRATEGIES = ("dnorm", "densratio", "bayes")
MIN_ARM_DENSRATIO = 10


class NuisanceError(ValueError):
    """Raised when a nuisance functional cannot be estimated from the data."""


# ---------------------------------------------------------------- conditional densities


class DensityEstimator(Protocol):
    def fit(self, z: np.ndarray, x: np.ndarray) -> "FittedDensity": ...


class FittedDensity(Protocol):
    def logpdf(self, z: np.ndarray, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ConditionalGaussian:
    """Multivariate normal with regression means and a shared residual covariance."""

    means: tuple
    covariance: np.ndarray

    def mean(self, x: np.ndarray) -> np.ndarray:
        return np.column_stack([m.predict(x) for m in self.means])

    def logpdf(self, z: np.ndarray, x: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float).reshape(len(x), -1)
        resid = z - self.mean(x)
        chol = np.linalg.cholesky(self.covariance)
        sol = np.linalg.solve(chol, resid.T)
        d = z.shape[1]
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        return -0.5 * (np.sum(sol**2, axis=0) + logdet + d * np.log(2 * np.pi))


@dataclass(frozen=True)
class GaussianDensity:
    """Normal conditional density: one mean regression per component plus the
    residual covariance with ``loading`` added to the diagonal."""

    learner: Learner = field(default_factory=BasisLearner)
    loading: float = 1e-8

    def fit(self, z: np.ndarray, x: np.ndarray) -> ConditionalGaussian:
        z = np.asarray(z, dtype=float).reshape(len(x), -1)
        means = tuple(self.learner.fit(x, z[:, j], "gaussian") for j in range(z.shape[1]))
        resid = z - np.column_stack([m.predict(x) for m in means])
        cov = resid.T @ resid / max(len(z), 1) + self.loading * np.eye(z.shape[1])
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise NuisanceError("mediator residual covariance is not positive definite") from None
        return ConditionalGaussian(means, cov)


def _row_keys(*blocks: np.ndarray) -> np.ndarray:
    """Integer label per row identifying its distinct value across all blocks."""
    stacked = np.vstack(blocks)
    if stacked.shape[1] == 0:
        return np.zeros(len(stacked), dtype=int)
    _, inv = np.unique(stacked, axis=0, return_inverse=True)
    return inv.reshape(-1)


@dataclass(frozen=True)
class _FittedCellDensity:
    joint: np.ndarray
    cond: np.ndarray

    def logpdf(self, z: np.ndarray, x: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float).reshape(len(x), -1)
        x = np.asarray(x, dtype=float).reshape(len(z), -1)
        num = _lookup_counts(self.joint, np.hstack([x, z]))
        den = _lookup_counts(self.cond, x)
        if np.any(den == 0):
            raise NuisanceError("positivity violation: conditioning event with no rows")
        with np.errstate(divide="ignore"):
            return np.log(num) - np.log(den)


def _lookup_counts(rows: np.ndarray, query: np.ndarray) -> np.ndarray:
    keys = _row_keys(rows, query)
    counts = np.bincount(keys[: len(rows)], minlength=keys.max() + 1 if len(keys) else 0)
    return counts[keys[len(rows):]].astype(float)


@dataclass(frozen=True)
class CellDensity:
    """Empirical conditional frequencies for discrete mediators and predictors."""

    def fit(self, z: np.ndarray, x: np.ndarray) -> _FittedCellDensity:
        z = np.asarray(z, dtype=float).reshape(len(x), -1)
        x = np.asarray(x, dtype=float).reshape(len(z), -1)
        return _FittedCellDensity(np.hstack([x, z]), x)


# ---------------------------------------------------------------- direct density ratios


class RatioEstimator(Protocol):
    def fit(self, numerator: np.ndarray, denominator: np.ndarray, rng: np.random.Generator): ...


def _gauss_kernel(x: np.ndarray, centers: np.ndarray, sigma: float) -> np.ndarray:
    d2 = (
        np.sum(x**2, axis=1)[:, None]
        + np.sum(centers**2, axis=1)[None, :]
        - 2.0 * x @ centers.T
    )
    return np.exp(-np.maximum(d2, 0.0) / (2.0 * sigma**2))


@dataclass(frozen=True)
class _FittedULSIF:
    centers: np.ndarray
    shift: np.ndarray
    scale: np.ndarray
    sigma: float
    theta: np.ndarray
    lam: float
    floor: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        xs = (np.asarray(x, dtype=float).reshape(len(x), -1) - self.shift) / self.scale
        return np.maximum(_gauss_kernel(xs, self.centers, self.sigma) @ self.theta, self.floor)


@dataclass(frozen=True)
class ULSIF:
    """Unconstrained least-squares importance fitting of p_numerator / p_denominator.

    Gaussian kernel on standardized features with ``n_centers`` centers drawn from the
    numerator rows; bandwidth is the median pairwise distance (computed on at most
    ``bandwidth_sample`` pooled rows); the ridge penalty is chosen from ``lambdas`` by
    ``cv_folds``-fold cross-validation of the squared-loss criterion.
    """

    n_centers: int = 100
    lambdas: tuple[float, ...] = (1e-3, 1e-2, 1e-1, 1.0)
    cv_folds: int = 5
    bandwidth_sample: int = 1000
    floor: float = PROB_CLIP
    min_rows: int = MIN_ARM_DENSRATIO

    @staticmethod
    def _solve(k_nu: np.ndarray, k_de: np.ndarray, lam: float) -> np.ndarray:
        h_mat = k_de.T @ k_de / len(k_de)
        h_vec = k_nu.mean(axis=0)
        return np.linalg.solve(h_mat + lam * np.eye(len(h_vec)), h_vec)

    def fit(self, numerator: np.ndarray, denominator: np.ndarray, rng: np.random.Generator) -> _FittedULSIF:
        nu = np.asarray(numerator, dtype=float)
        de = np.asarray(denominator, dtype=float)
        nu = nu.reshape(len(nu), -1)
        de = de.reshape(len(de), -1)
        smallest = min(len(nu), len(de))
        if smallest < max(self.min_rows, self.cv_folds):
            raise NuisanceError(
                f"insufficient arm: {smallest} rows in the smaller treatment arm, "
                f"need {max(self.min_rows, self.cv_folds)} for kernel ratio fitting"
            )
        pooled = np.vstack([nu, de])
        shift = pooled.mean(axis=0)
        scale = pooled.std(axis=0)
        scale[scale <= 0] = 1.0
        nu_s = (nu - shift) / scale
        de_s = (de - shift) / scale
        pick = rng.choice(len(nu_s), size=min(self.n_centers, len(nu_s)), replace=False)
        centers = nu_s[np.sort(pick)]
        pooled_s = np.vstack([nu_s, de_s])
        if len(pooled_s) > self.bandwidth_sample:
            sub = rng.choice(len(pooled_s), size=self.bandwidth_sample, replace=False)
            pooled_s = pooled_s[np.sort(sub)]
        dists = pdist(pooled_s)
        sigma = float(np.median(dists)) if dists.size else 1.0
        if not sigma > 0:
            sigma = 1.0
        k_nu = _gauss_kernel(nu_s, centers, sigma)
        k_de = _gauss_kernel(de_s, centers, sigma)
        fold_nu = rng.permutation(len(nu_s)) % self.cv_folds
        fold_de = rng.permutation(len(de_s)) % self.cv_folds
        scores = []
        for lam in self.lambdas:
            score = 0.0
            for f in range(self.cv_folds):
                theta = self._solve(k_nu[fold_nu != f], k_de[fold_de != f], lam)
                r_nu = k_nu[fold_nu == f] @ theta
                r_de = k_de[fold_de == f] @ theta
                score += 0.5 * np.mean(r_de**2) - np.mean(r_nu)
            scores.append(score / self.cv_folds)
        lam = self.lambdas[int(np.argmin(scores))]
        theta = self._solve(k_nu, k_de, lam)
        return _FittedULSIF(centers, shift, scale, sigma, theta, lam, self.floor)


@dataclass(frozen=True)
class _FittedCellRatio:
    numerator: np.ndarray
    denominator: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(len(x), -1)
        num = _lookup_counts(self.numerator, x) / len(self.numerator)
        den = _lookup_counts(self.denominator, x) / len(self.denominator)
        if np.any(den == 0):
            raise NuisanceError("positivity violation: configuration absent from the denominator arm")
        return num / den


@dataclass(frozen=True)
class CellRatio:
    """Ratio of empirical frequencies; exact for discrete data."""

    def fit(self, numerator, denominator, rng=None) -> _FittedCellRatio:
        nu = np.asarray(numerator, dtype=float)
        de = np.asarray(denominator, dtype=float)
        return _FittedCellRatio(nu.reshape(len(nu), -1), de.reshape(len(de), -1))


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class NuisanceConfig:
    """How each nuisance functional is learned.

    Parameters
    ----------
    learner : Learner
        Outcome regression and sequential regressions.
    treatment_learner : Learner, optional
        Propensity score; defaults to ``learner``.
    ratio_learner : Learner, optional
        Binary regressions of the Bayes strategy; defaults to ``treatment_learner``.
    density : DensityEstimator, optional
        Mediator densities of the ``dnorm`` strategy; defaults to a Gaussian model
        whose means use ``learner``.
    ratio_estimator : RatioEstimator, optional
        Direct ratio fits of the ``densratio`` strategy; defaults to :class:`ULSIF`.
    omit_regression, omit_ratio : frozenset of str
        Vertices removed from the predictors of the regression group (outcome and
        sequential regressions) or the ratio group (propensity and mediator ratios).
        Used to misspecify one group on purpose.
    subset_sequential : bool
        Fit each sequential regression only on rows with the treatment at the
        required level, instead of on all rows with the treatment as a predictor.
    clip : float
        Probabilities are clipped to ``[clip, 1 - clip]``; ratios are floored at ``clip``.
    seed : int
        Seed for randomized fits (kernel centers and CV splits).
    """

    learner: Learner = field(default_factory=BasisLearner)
    treatment_learner: Learner | None = None
    ratio_learner: Learner | None = None
    density: DensityEstimator | None = None
    ratio_estimator: RatioEstimator | None = None
    omit_regression: frozenset[str] = frozenset()
    omit_ratio: frozenset[str] = frozenset()
    subset_sequential: bool = False
    clip: float = PROB_CLIP
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "omit_regression", frozenset(self.omit_regression))
        object.__setattr__(self, "omit_ratio", frozenset(self.omit_ratio))

    @property
    def propensity_learner(self) -> Learner:
        return self.treatment_learner or self.learner

    @property
    def classifier(self) -> Learner:
        return self.ratio_learner or self.propensity_learner

    @property
    def density_estimator(self) -> DensityEstimator:
        return self.density or GaussianDensity(self.learner)

    @property
    def direct_ratio(self) -> RatioEstimator:
        return self.ratio_estimator or ULSIF(floor=self.clip)


def exact_config(clip: float = 0.0) -> NuisanceConfig:
    """Saturated learners for discrete data: every nuisance equals its empirical value."""
    cells = SaturatedLearner(clip=clip if clip > 0 else None)
    return NuisanceConfig(
        learner=cells,
        density=CellDensity(),
        ratio_estimator=CellRatio(),
        clip=clip,
    )


# ---------------------------------------------------------------- helpers


def _level_value(p_one: np.ndarray, level: int) -> np.ndarray:
    return p_one if level == 1 else 1.0 - p_one


def _drop(names: Sequence[str], omit: frozenset[str]) -> tuple[str, ...]:
    return tuple(v for v in names if v not in omit)


def _binary_mask(ds: Dataset, names: Sequence[str]) -> list[bool]:
    return [ds.kind(c).value == "binary" for c in ds.column_names(names)]


def _family(ds: Dataset, outcome: str) -> str:
    return "binomial" if ds.is_binary(outcome) else "gaussian"


def _diagnostics_of(model) -> tuple[str, ...]:
    return tuple(getattr(model, "diagnostics", ()))


@dataclass(frozen=True)
class _Regression:
    """A learner fitted on named predictor vertices."""

    predictors: tuple[str, ...]
    model: object

    def predict(self, ds: Dataset, overrides: dict | None = None) -> np.ndarray:
        return np.asarray(self.model.predict(ds.matrix(self.predictors, overrides)), dtype=float)


def _fit_regression(learner, ds: Dataset, predictors, y, family) -> _Regression:
    x = ds.matrix(predictors)
    try:
        model = learner.fit(x, y, family, _binary_mask(ds, predictors))
    except FitError as exc:
        raise NuisanceError(str(exc)) from exc
    return _Regression(tuple(predictors), model)


# ---------------------------------------------------------------- sequential regressions


@dataclass(frozen=True)
class SequentialFit:
    """Fitted outcome regression and sequential regressions B_K..B_1."""

    outcome: _Regression
    steps: tuple[_Regression, ...]
    a0: int
    partition: CausalPartition
    subset: bool

    def _eval(self, reg: _Regression, ds: Dataset, vertex: str) -> np.ndarray:
        p = self.partition
        level = p.level(vertex, self.a0)
        if self.subset or p.treatment not in reg.predictors:
            return reg.predict(ds)
        return reg.predict(ds, {p.treatment: level})

    def outcome_at_level(self, ds: Dataset) -> np.ndarray:
        return self._eval(self.outcome, ds, self.partition.outcome)

    def evaluate(self, ds: Dataset) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
        """Outcome regression at a_Y and each B_k at a_{Z_k}, on the rows of ``ds``."""
        mu = self.outcome_at_level(ds)
        bs = tuple(self._eval(reg, ds, z) for reg, z in zip(self.steps, self.partition.mediators))
        return mu, bs

    @property
    def diagnostics(self) -> tuple[str, ...]:
        out = list(_diagnostics_of(self.outcome.model))
        for reg in self.steps:
            out += _diagnostics_of(reg.model)
        return tuple(out)


def _level_rows(ds: Dataset, p: CausalPartition, vertex: str, a0: int) -> np.ndarray:
    """Rows whose treatment equals the level assigned to ``vertex``."""
    return ds.scalar(p.treatment) == p.level(vertex, a0)


def fit_one_sequential(
    ds: Dataset,
    p: CausalPartition,
    k: int,
    pseudo: np.ndarray,
    config: NuisanceConfig,
    a0: int,
) -> _Regression:
    """Regress the pseudo-outcome for mediator ``k`` (0-based) on its regression inputs."""
    z = p.mediators[k]
    predictors = _drop(p.regression_inputs(z), config.omit_regression)
    family = _family(ds, p.outcome)
    if config.subset_sequential:
        rows = _level_rows(ds, p, z, a0)
        predictors = tuple(v for v in predictors if v != p.treatment)
        return _fit_regression(config.learner, ds.take(rows), predictors, pseudo[rows], family)
    return _fit_regression(config.learner, ds, predictors, pseudo, family)


def fit_sequential_regressions(
    ds: Dataset, p: CausalPartition, config: NuisanceConfig, a0: int
) -> SequentialFit:
    """Fit the outcome regression and the recursive regressions on ``ds``.

    B_{K+1} is the outcome regression evaluated at a_Y. For k = K..1 the evaluations of
    B_{k+1} are regressed on mp(Z_k) plus the earlier inputs of B_{k+1}, and the fit is
    evaluated at A = a_{Z_k}.
    """
    y = ds.scalar(p.outcome)
    family = _family(ds, p.outcome)
    mu_preds = _drop(p.pillow(p.outcome), config.omit_regression)
    if config.subset_sequential:
        rows = _level_rows(ds, p, p.outcome, a0)
        mu_preds = tuple(v for v in mu_preds if v != p.treatment)
        outcome = _fit_regression(config.learner, ds.take(rows), mu_preds, y[rows], family)
    else:
        outcome = _fit_regression(config.learner, ds, mu_preds, y, family)
    fit = SequentialFit(outcome, (), a0, p, config.subset_sequential)
    pseudo = fit.outcome_at_level(ds)
    steps: list[_Regression] = [None] * p.K  # type: ignore[list-item]
    for k in range(p.K - 1, -1, -1):
        reg = fit_one_sequential(ds, p, k, pseudo, config, a0)
        steps[k] = reg
        pseudo = fit._eval(reg, ds, p.mediators[k])
    return replace(fit, steps=tuple(steps))


# ---------------------------------------------------------------- density-ratio products


def ratio_products(
    p: CausalPartition,
    a0: int,
    p_treat: np.ndarray,
    mediator_ratios: Sequence[np.ndarray],
    clip: float,
) -> tuple[tuple[np.ndarray, ...], np.ndarray]:
    """Compose per-mediator ratios and the treatment odds into R_{Z_1..Z_K} and R_Y."""
    a1 = 1 - a0
    odds = _level_value(p_treat, a1) / _level_value(p_treat, a0)
    by_name = dict(zip(p.mediators, mediator_ratios))

    def product(v):
        uses_odds, terms = p.ratio_terms(v)
        out = odds.copy() if uses_odds else np.ones_like(p_treat)
        for z in terms:
            out = out * by_name[z]
        return np.maximum(out, clip)

    return tuple(product(z) for z in p.mediators), product(p.outcome)


def bayes_ratio(h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Density ratio from P(a | z, c) and P(a | c)."""
    return h / (1.0 - h) * (1.0 - g) / g


@dataclass(frozen=True)
class _MediatorRatio:
    """Fitted pieces of the ratio f(z | c, a_z) / f(z | c, 1 - a_z) for one mediator."""

    vertex: str
    level: int
    cond: tuple[str, ...]
    uses_treatment: bool
    kind: str
    parts: tuple
    tied_to_propensity: bool = False


@dataclass(frozen=True)
class RatioModel:
    """Per-mediator ratio fits for one strategy."""

    strategy: str
    mediators: tuple[_MediatorRatio, ...]
    clip: float

    def evaluate(self, ds: Dataset, p: CausalPartition, p_treat: np.ndarray):
        """Mediator ratios and, if Z_1 reuses the propensity, h_{Z_1} on the rows of ``ds``."""
        ratios, tied_h = [], None
        a_name = p.treatment
        for m in self.mediators:
            z = ds.vertex(m.vertex)
            if m.kind == "density":
                (dens,) = m.parts
                preds = m.cond + ((a_name,) if m.uses_treatment else ())
                order = [v for v in p.order if v in preds]
                x_num = ds.matrix(order, {a_name: m.level} if m.uses_treatment else None)
                x_den = ds.matrix(order, {a_name: 1 - m.level} if m.uses_treatment else None)
                r = np.exp(dens.logpdf(z, x_num) - dens.logpdf(z, x_den))
            elif m.kind == "direct":
                joint, marginal = m.parts
                r = joint.predict(ds.matrix((m.vertex,) + m.cond))
                if marginal is not None:
                    r = r * marginal.predict(ds.matrix(m.cond))
            else:
                h_model, g_model = m.parts
                lo, hi = self.clip, 1 - self.clip
                h = np.clip(h_model.predict(ds), lo, hi)
                if m.tied_to_propensity:
                    tied_h = h
                    g = np.clip(_level_value(p_treat, m.level), lo, hi)
                else:
                    g = np.clip(g_model.predict(ds), lo, hi)
                r = bayes_ratio(h, g)
            ratios.append(np.maximum(np.asarray(r, dtype=float), self.clip))
        return tuple(ratios), tied_h


def fit_density_ratio_products(
    ds: Dataset,
    p: CausalPartition,
    strategy: str,
    config: NuisanceConfig,
    a0: int,
    propensity_predictors: tuple[str, ...] | None = None,
) -> RatioModel:
    """Fit the mediator density ratios entering R_{Z_k} and R_Y.

    ``dnorm`` fits a conditional density of Z_k given mp(Z_k) and evaluates it at both
    treatment levels. ``densratio`` fits p(z, c | a_z) / p(z, c | 1 - a_z) and multiplies it
    by a separate fit of p(c | 1 - a_z) / p(c | a_z) to obtain the conditional ratio;
    fitting the reverse marginal avoids dividing by an estimate that can reach the floor. ``bayes`` fits
    h = P(A = a_z | Z_k, c) and g = P(A = a_z | c); g for Z_1 is the propensity score
    when both condition on the same vertices.
    """
    if strategy not in STRATEGIES:
        raise NuisanceError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    a = ds.scalar(p.treatment)
    rng = np.random.default_rng(config.seed)
    out = []
    for idx, z in enumerate(p.mediators):
        level = p.level(z, a0)
        pillow = p.pillow(z)
        uses_a = p.treatment in pillow
        cond = _drop(p.pillow_without_treatment(z), config.omit_ratio)
        if strategy == "dnorm":
            preds = tuple(v for v in p.order if v in cond or (uses_a and v == p.treatment))
            dens = config.density_estimator.fit(ds.vertex(z), ds.matrix(preds))
            out.append(_MediatorRatio(z, level, cond, uses_a, "density", (dens,)))
        elif strategy == "densratio":
            num_rows, den_rows = a == level, a == 1 - level
            est = config.direct_ratio
            zc = ds.matrix((z,) + cond)
            joint = est.fit(zc[num_rows], zc[den_rows], np.random.default_rng(rng.integers(2**63)))
            marginal = None
            if cond:
                cc = ds.matrix(cond)
                # reverse direction: p(c | 1 - a_z) / p(c | a_z) multiplies the joint ratio
                marginal = est.fit(cc[den_rows], cc[num_rows], np.random.default_rng(rng.integers(2**63)))
            out.append(_MediatorRatio(z, level, cond, uses_a, "direct", (joint, marginal)))
        else:
            target = (a == level).astype(float)
            clf = config.classifier
            h = _fit_regression(clf, ds, (z,) + cond, target, "binomial")
            tied = idx == 0 and propensity_predictors is not None and set(cond) == set(propensity_predictors)
            g = None if tied else _fit_regression(clf, ds, cond, target, "binomial")
            out.append(_MediatorRatio(z, level, cond, uses_a, "bayes", (h, g), tied))
    return RatioModel(strategy, tuple(out), config.clip)


# ---------------------------------------------------------------- assembled nuisance set


@dataclass(frozen=True)
class NuisanceSet:
    """Per-row nuisance evaluations used by every estimator.

    Attributes
    ----------
    p_treat : array
        P(A = 1 | mp(A)), clipped.
    mu : array
        Outcome regression at A = a_Y.
    B : tuple of arrays
        B_k at A = a_{Z_k} for k = 1..K (mediator order).
    mediator_ratios : tuple of arrays
        f^r_{Z_k} for k = 1..K.
    R, R_Y : tuple of arrays, array
        Density-ratio products.
    tied_h : array or None
        h_{Z_1} when g_{Z_1} is the propensity score (Bayes strategy); the ratio of
        Z_1 then moves with the propensity during targeting.
    folds : tuple of (train, test) index arrays
        Row split used for fitting; a single pair covering all rows when not cross-fitted.
    """

    partition: CausalPartition
    a0: int
    strategy: str
    config: NuisanceConfig
    dataset: Dataset
    p_treat: np.ndarray
    mu: np.ndarray
    B: tuple[np.ndarray, ...]
    mediator_ratios: tuple[np.ndarray, ...]
    R: tuple[np.ndarray, ...]
    R_Y: np.ndarray
    tied_h: np.ndarray | None
    folds: tuple
    models: tuple = ()
    diagnostics: tuple[str, ...] = ()

    @property
    def K(self) -> int:
        return self.partition.K

    @property
    def binary_outcome(self) -> bool:
        return self.dataset.is_binary(self.partition.outcome)

    @property
    def pi_a1(self) -> np.ndarray:
        return _level_value(self.p_treat, 1 - self.a0)

    @property
    def first_regression(self) -> np.ndarray:
        """B_{Z_1} at a_0, or the outcome regression at a_Y when there are no mediators."""
        return self.B[0] if self.K else self.mu

    def with_propensity(self, p_treat: np.ndarray) -> "NuisanceSet":
        """Replace the propensity and recompute every quantity that depends on it."""
        p_treat = np.clip(p_treat, self.config.clip, 1 - self.config.clip)
        ratios = list(self.mediator_ratios)
        if self.tied_h is not None:
            g = _level_value(p_treat, self.a0)
            ratios[0] = np.maximum(bayes_ratio(self.tied_h, g), self.config.clip)
        R, R_Y = ratio_products(self.partition, self.a0, p_treat, ratios, self.config.clip)
        return replace(self, p_treat=p_treat, mediator_ratios=tuple(ratios), R=R, R_Y=R_Y)

    def refit_sequential(self, k: int, pseudo: np.ndarray) -> np.ndarray:
        """Refit B_k (0-based) on a new pseudo-outcome, honouring the fold split."""
        p = self.partition
        out = np.empty(self.dataset.n)
        for train, test in self.folds:
            ds_train = self.dataset.take(train)
            reg = fit_one_sequential(ds_train, p, k, pseudo[train], self.config, self.a0)
            ds_test = self.dataset.take(test)
            if self.config.subset_sequential or p.treatment not in reg.predictors:
                out[test] = reg.predict(ds_test)
            else:
                out[test] = reg.predict(ds_test, {p.treatment: p.level(p.mediators[k], self.a0)})
        return out

    def check(self) -> None:
        """Raise if any cached array has the wrong length or a non-finite value."""
        n = self.dataset.n
        arrays = [self.p_treat, self.mu, self.R_Y, *self.B, *self.R, *self.mediator_ratios]
        if len(self.B) != self.K or len(self.R) != self.K:
            raise NuisanceError("nuisance caches do not match the number of mediators")
        for arr in arrays:
            if arr.shape != (n,):
                raise NuisanceError("nuisance cache has the wrong length")
            if not np.all(np.isfinite(arr)):
                raise NuisanceError("nuisance cache contains non-finite values")


def _all_rows(n: int):
    idx = np.arange(n)
    return ((idx, idx),)


def evaluate_nuisances(
    dataset: Dataset,
    partition: CausalPartition,
    config: NuisanceConfig | None = None,
    strategy: str = "bayes",
    a0: int = 1,
    folds: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
) -> NuisanceSet:
    """Fit every nuisance functional and cache its evaluations.

    With ``folds``, each ``(train, test)`` pair fits all models on ``train`` rows and
    evaluates them on ``test`` rows; the test sets must partition the rows.
    """
    config = config or NuisanceConfig()
    if strategy not in STRATEGIES:
        raise NuisanceError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if a0 not in (0, 1):
        raise NuisanceError("a0 must be 0 or 1")
    p = partition
    n = dataset.n
    folds = tuple(folds) if folds is not None else _all_rows(n)
    a_all = dataset.scalar(p.treatment)
    for train, _ in folds:
        arms = np.unique(a_all[train])
        if len(arms) < 2:
            raise NuisanceError("degenerate treatment arm in the fitting rows")
    p_treat = np.empty(n)
    mu = np.empty(n)
    B = [np.empty(n) for _ in range(p.K)]
    ratios = [np.empty(n) for _ in range(p.K)]
    tied_h = None
    models = []
    diagnostics: list[str] = []
    pi_preds = _drop(p.pillow(p.treatment), config.omit_ratio)
    for fold_index, (train, test) in enumerate(folds):
        ds_train = dataset.take(train)
        ds_test = dataset.take(test)
        a_train = ds_train.scalar(p.treatment)
        pi = _fit_regression(config.propensity_learner, ds_train, pi_preds, a_train, "binomial")
        p_treat[test] = np.clip(pi.predict(ds_test), config.clip, 1 - config.clip)
        seq = fit_sequential_regressions(ds_train, p, config, a0)
        mu_t, b_t = seq.evaluate(ds_test)
        mu[test] = mu_t
        for k in range(p.K):
            B[k][test] = b_t[k]
        fold_config = replace(config, seed=config.seed + fold_index) if len(folds) > 1 else config
        rm = fit_density_ratio_products(ds_train, p, strategy, fold_config, a0, pi_preds)
        r_t, h_t = rm.evaluate(ds_test, p, p_treat[test])
        for k in range(p.K):
            ratios[k][test] = r_t[k]
        if h_t is not None:
            if tied_h is None:
                tied_h = np.empty(n)
            tied_h[test] = h_t
        models.append({"propensity": pi, "regressions": seq, "ratios": rm})
        diagnostics += _diagnostics_of(pi.model)
        diagnostics += seq.diagnostics
    R, R_Y = ratio_products(p, a0, p_treat, ratios, config.clip)
    out = NuisanceSet(
        partition=p,
        a0=a0,
        strategy=strategy,
        config=config,
        dataset=dataset,
        p_treat=p_treat,
        mu=mu,
        B=tuple(B),
        mediator_ratios=tuple(ratios),
        R=R,
        R_Y=R_Y,
        tied_h=tied_h,
        folds=folds,
        models=tuple(models),
        diagnostics=tuple(dict.fromkeys(diagnostics)),
    )
    out.check()
    return out
