"""Least squares, logistic regression and the supervised-learner contract.

Every nuisance regression in the package goes through a learner: an object with
``fit(x, y, family, binary=None)`` returning a fitted model with ``predict(x)``.
``family`` is ``"gaussian"`` for a continuous response or ``"binomial"`` for a
response in ``[0, 1]`` (binary or fractional). ``binary`` optionally flags which
raw columns of ``x`` are binary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy.special import expit

from .data import DesignSpec, expand_basis

__all__ = [
    "FitError",
    "LinearModel",
    "LogisticModel",
    "fit_ols",
    "fit_logistic",
    "Learner",
    "FittedLearner",
    "BasisLearner",
    "SaturatedLearner",
    "TreeEnsembleLearner",
    "PROB_CLIP",
]

PROB_CLIP = 1e-6
RIDGE_JITTER = 1e-8


class FitError(ValueError):
    """Raised when a model cannot be fitted to the supplied data."""


@dataclass(frozen=True)
class LinearModel:
    """Least-squares fit. ``design`` records how the columns were built, when known."""

    coefficients: np.ndarray
    residual_variance: float
    design: DesignSpec | None = None
    rank_deficient: bool = False

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.coefficients

    @property
    def diagnostics(self) -> tuple[str, ...]:
        return ("rank deficient",) if self.rank_deficient else ()


@dataclass(frozen=True)
class LogisticModel:
    """Binomial-likelihood fit with a logit link."""

    coefficients: np.ndarray
    converged: bool
    iterations: int
    design: DesignSpec | None = None
    separation: bool = False
    clip: float = PROB_CLIP

    def linear_predictor(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.coefficients

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.clip(expit(self.linear_predictor(x)), self.clip, 1.0 - self.clip)

    @property
    def diagnostics(self) -> tuple[str, ...]:
        out = []
        if self.separation:
            out.append("separation")
        if not self.converged:
            out.append("logistic fit did not converge")
        return tuple(out)


def fit_ols(x: np.ndarray, y: np.ndarray, design: DesignSpec | None = None) -> LinearModel:
    """Least squares through a QR decomposition.

    A rank-deficient design is solved with a ridge penalty of ``1e-8`` instead,
    and the returned model is flagged.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise FitError("least squares needs at least one row")
    n, p = x.shape
    if p == 0:
        return LinearModel(np.zeros(0), float(np.mean(y**2)), design)
    rank_deficient = n < p
    if not rank_deficient:
        q, r = np.linalg.qr(x)
        diag = np.abs(np.diag(r))
        rank_deficient = bool(diag.min() <= 1e-10 * max(diag.max(), 1.0))
    if rank_deficient:
        beta = np.linalg.solve(x.T @ x + RIDGE_JITTER * np.eye(p), x.T @ y)
    else:
        from scipy.linalg import solve_triangular

        beta = solve_triangular(r, q.T @ y)
    resid = y - x @ beta
    dof = max(n - p, 1)
    return LinearModel(beta, float(resid @ resid / dof), design, rank_deficient)


def _weighted_lstsq(x: np.ndarray, z: np.ndarray, w: np.ndarray) -> np.ndarray:
    sw = np.sqrt(w)
    xw = x * sw[:, None]
    gram = xw.T @ xw
    rhs = xw.T @ (z * sw)
    try:
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.solve(gram + RIDGE_JITTER * np.eye(x.shape[1]), rhs)


def _deviance(y, eta):
    # binomial deviance written to stay finite for large |eta|
    return float(np.sum(np.logaddexp(0.0, eta) - y * eta))


def fit_logistic(
    x: np.ndarray,
    y: np.ndarray,
    design: DesignSpec | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
    clip: float = PROB_CLIP,
) -> LogisticModel:
    """Maximum-likelihood logistic regression by iteratively reweighted least squares.

    ``y`` may be fractional in ``[0, 1]``; a 0/1 response must contain both classes.
    Iteration stops when no coefficient moves by more than ``tol``. When the
    classes are perfectly separated the coefficients diverge; the fit is then
    stopped, flagged with ``separation`` and its predictions are clipped.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[0] == 0:
        raise FitError("logistic regression needs at least one row")
    if np.any((y < 0) | (y > 1)):
        raise FitError("logistic response must lie in [0, 1]")
    is_binary = bool(np.all((y == 0) | (y == 1)))
    if is_binary and (y.min() == y.max()):
        raise FitError("logistic response has a single class")
    p = x.shape[1]
    beta = np.zeros(p)
    eta = x @ beta
    dev = _deviance(y, eta)
    converged = False
    separation = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        w = np.maximum(mu * (1 - mu), 1e-12)
        z = eta + (y - mu) / w
        new = _weighted_lstsq(x, z, w)
        step = new - beta
        # halve the step until the deviance does not increase
        for _ in range(30):
            cand = beta + step
            cand_eta = x @ cand
            cand_dev = _deviance(y, cand_eta)
            if cand_dev <= dev + 1e-12 * max(1.0, abs(dev)):
                break
            step = step / 2
        beta, eta, dev = cand, cand_eta, cand_dev
        if np.max(np.abs(step)) < tol:
            converged = True
            break
        if is_binary and np.max(np.abs(eta)) > 30:
            fitted = (eta > 0).astype(float)
            if np.all(fitted == y) or dev < 1e-8:
                separation = True
                break
    if not converged and not separation and is_binary:
        separation = bool(np.all((eta > 0).astype(float) == y))
    return LogisticModel(beta, converged, it, design, separation, clip)


class FittedLearner(Protocol):
    def predict(self, x: np.ndarray) -> np.ndarray: ...


class Learner(Protocol):
    """Supervised learner contract shared by every nuisance regression."""

    def fit(
        self, x: np.ndarray, y: np.ndarray, family: str, binary: Sequence[bool] | None = None
    ) -> FittedLearner: ...


def _check_family(family: str) -> None:
    if family not in ("gaussian", "binomial"):
        raise FitError(f"unknown family {family!r}")


@dataclass(frozen=True)
class _FittedBasis:
    model: LinearModel | LogisticModel
    basis: str
    degree: int
    intercept: bool
    binary: tuple[bool, ...]

    def predict(self, x: np.ndarray) -> np.ndarray:
        design = expand_basis(x, self.basis, self.degree, self.intercept, self.binary)
        return self.model.predict(design)

    @property
    def diagnostics(self) -> tuple[str, ...]:
        return self.model.diagnostics


@dataclass(frozen=True)
class BasisLearner:
    """Parametric regression on a basis expansion of the raw predictors.

    Gaussian responses use least squares, binomial responses use logistic regression.
    """

    basis: str = "main_terms"
    degree: int = 2
    intercept: bool = True

    def fit(self, x, y, family, binary=None) -> _FittedBasis:
        _check_family(family)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        binary = tuple(binary) if binary is not None else tuple(
            bool(np.all((x[:, j] == 0) | (x[:, j] == 1))) for j in range(x.shape[1])
        )
        design = expand_basis(x, self.basis, self.degree, self.intercept, binary)
        if family == "gaussian":
            model = fit_ols(design, y)
        else:
            model = fit_logistic(design, y)
        return _FittedBasis(model, self.basis, self.degree, self.intercept, binary)


@dataclass(frozen=True)
class _FittedCells:
    keys: np.ndarray
    means: np.ndarray
    clip: float | None

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(len(x), -1)
        if self.keys.shape[1] == 0:
            out = np.full(len(x), self.means[0])
        else:
            both = np.vstack([self.keys, x])
            _, inverse = np.unique(both, axis=0, return_inverse=True)
            inverse = inverse.reshape(-1)
            lookup = np.full(inverse.max() + 1, -1)
            lookup[inverse[: len(self.keys)]] = np.arange(len(self.keys))
            idx = lookup[inverse[len(self.keys):]]
            if np.any(idx < 0):
                bad = x[np.argmax(idx < 0)]
                raise FitError(f"positivity violation: no training rows with predictors {bad.tolist()}")
            out = self.means[idx]
        if self.clip is not None:
            out = np.clip(out, self.clip, 1 - self.clip)
        return out


@dataclass(frozen=True)
class SaturatedLearner:
    """Cell means over every distinct predictor configuration.

    Exact for discrete predictors: on a dataset whose empirical law equals a target
    law, the fitted values are the exact conditional expectations.
    ``clip`` applies to binomial responses only.
    """

    clip: float | None = None

    def fit(self, x, y, family, binary=None) -> _FittedCells:
        _check_family(family)
        x = np.asarray(x, dtype=float).reshape(len(y), -1)
        y = np.asarray(y, dtype=float)
        if x.shape[1] == 0:
            return _FittedCells(np.empty((1, 0)), np.array([y.mean()]), None)
        keys, inverse = np.unique(x, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        sums = np.bincount(inverse, weights=y, minlength=len(keys))
        counts = np.bincount(inverse, minlength=len(keys))
        clip = self.clip if family == "binomial" else None
        return _FittedCells(keys, sums / counts, clip)


@dataclass(frozen=True)
class _FittedForest:
    forest: object
    clip: float | None

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = self.forest.predict(np.asarray(x, dtype=float))
        if self.clip is not None:
            out = np.clip(out, self.clip, 1 - self.clip)
        return out


@dataclass(frozen=True)
class TreeEnsembleLearner:
    """Random forest of fully grown trees with a minimum leaf size.

    A deliberately rough learner: its in-sample fit is much better than its
    out-of-sample fit, which is the situation cross-fitting is designed for.
    Each split considers ``sqrt(p)`` candidate predictors. Binomial responses are
    fitted as probabilities and clipped.
    """

    n_estimators: int = 10
    max_depth: int | None = None
    min_samples_leaf: int = 5
    max_features: float | str = "sqrt"
    seed: int = 0
    clip: float = PROB_CLIP

    def fit(self, x, y, family, binary=None) -> _FittedForest:
        from sklearn.ensemble import RandomForestRegressor

        _check_family(family)
        x = np.asarray(x, dtype=float).reshape(len(y), -1)
        if x.shape[1] == 0:
            return SaturatedLearner(self.clip).fit(x, y, family)
        forest = RandomForestRegressor(
            n_estimators=self.n_estimators,
            max_depth=self.max_depth,
            min_samples_leaf=self.min_samples_leaf,
            max_features=self.max_features,
            random_state=self.seed,
            n_jobs=1,
        )
        forest.fit(x, np.asarray(y, dtype=float))
        return _FittedForest(forest, self.clip if family == "binomial" else None)
