"""Weighted binary-outcome regression for treatment and censoring-weight models.

Supports the logit and cauchit links and simple per-covariate transforms
(identity, square, shifted log). Fitting is by iteratively reweighted least
squares for the logit link and by damped Fisher scoring with step halving for
the cauchit link, whose log-likelihood is not concave.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

__all__ = [
    "TermSpec",
    "BinaryRegression",
    "ConvergenceError",
    "PerfectSeparationError",
    "build_design_matrix",
]

PROB_CLAMP = 1e-8
_SEPARATION_BOUND = 30.0


class ConvergenceError(RuntimeError):
    """Raised when a fit does not converge within the iteration cap."""


class PerfectSeparationError(RuntimeError):
    """Raised when coefficients diverge, indicating (quasi-)separation."""


@dataclass(frozen=True)
class TermSpec:
    """One model term derived from a single covariate column.

    Parameters
    ----------
    covariate : int
        Column index into the covariate block the term is built from.
    transform : {"identity", "square", "log_shift"}
        Transformation applied to the covariate.
    shift : float
        Offset for ``log_shift``, i.e. ``log(x + shift)``.
    baseline : bool
        If True the term uses the baseline (visit-0) covariate value instead
        of the current one. Only meaningful for longitudinal model fitting.
    """

    covariate: int = 0
    transform: str = "identity"
    shift: float = 0.0
    baseline: bool = False

    def label(self):
        src = f"L0[{self.covariate}]" if self.baseline else f"L[{self.covariate}]"
        if self.transform == "identity":
            return src
        if self.transform == "square":
            return f"{src}^2"
        if self.transform == "log_shift":
            return f"log({src}+{self.shift:g})"
        raise ValueError(f"unknown transform {self.transform!r}")

    def apply(self, x, on_invalid="raise"):
        """Evaluate the transform.

        ``on_invalid`` controls rows where a log argument is not positive:
        ``"raise"`` (default), ``"nan"`` (mark for row dropping at fit time)
        or ``"floor"`` (clamp the argument to a tiny positive value so
        evaluation stays finite).
        """
        x = np.asarray(x, dtype=float)
        if self.transform == "identity":
            return x
        if self.transform == "square":
            return x * x
        if self.transform == "log_shift":
            shifted = x + self.shift
            bad = shifted <= 0
            if np.any(bad):
                if on_invalid == "raise":
                    raise ValueError(
                        f"term {self.label()}: argument not positive "
                        f"(min {shifted.min():.4g})"
                    )
                if on_invalid == "nan":
                    shifted = np.where(bad, np.nan, shifted)
                else:
                    shifted = np.maximum(shifted, np.exp(-30.0))
            return np.log(shifted)
        raise ValueError(f"unknown transform {self.transform!r}")

    def to_dict(self):
        return {
            "covariate": self.covariate,
            "transform": self.transform,
            "shift": self.shift,
            "baseline": self.baseline,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def build_design_matrix(current, terms, baseline=None, on_invalid="raise"):
    """Evaluate ``terms`` on covariate values, without an intercept column.

    Parameters
    ----------
    current : ndarray, shape (n, p)
        Current covariate values, one column per covariate.
    terms : sequence of TermSpec
    baseline : ndarray, shape (n, p), optional
        Visit-0 covariate values for terms with ``baseline=True``.
    on_invalid : str
        Passed to :meth:`TermSpec.apply` for undefined transform arguments.

    Returns
    -------
    ndarray, shape (n, len(terms))
    """
    current = np.atleast_2d(np.asarray(current, dtype=float))
    n = current.shape[0]
    cols = np.empty((n, len(terms)))
    for j, term in enumerate(terms):
        src = baseline if term.baseline else current
        if src is None:
            raise ValueError("baseline covariates required by a term but not given")
        cols[:, j] = term.apply(
            np.asarray(src, dtype=float)[:, term.covariate], on_invalid=on_invalid
        )
    return cols


def _expit(eta):
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ex = np.exp(eta[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _cauchit_cdf(eta):
    return 0.5 + np.arctan(eta) / np.pi


def _cauchit_pdf(eta):
    return 1.0 / (np.pi * (1.0 + eta * eta))


class BinaryRegression(BaseEstimator):
    """Weighted binary regression with a logit or cauchit link.

    The design matrix passed to :meth:`fit` must not contain an intercept;
    one is always prepended, so ``coef_[0]`` is the intercept.

    Parameters
    ----------
    link : {"logit", "cauchit"}
    max_iter : int
        Hard iteration cap.
    score_tol : float
        Convergence when the max absolute score falls below this.
    loglik_tol : float
        Convergence when the relative log-likelihood change falls below this.

    Attributes
    ----------
    coef_ : ndarray, shape (1 + n_terms,)
        Intercept followed by one coefficient per design column.
    n_iter_ : int
    max_score_ : float
        Max absolute component of the weighted score at the solution.
    converged_ : bool
    """

    def __init__(self, link="logit", max_iter=100, score_tol=1e-8, loglik_tol=1e-10):
        self.link = link
        self.max_iter = max_iter
        self.score_tol = score_tol
        self.loglik_tol = loglik_tol

    def _check_link(self):
        if self.link not in ("logit", "cauchit"):
            raise ValueError(f"unknown link {self.link!r}")

    def fit(self, X, y, sample_weight=None, term_labels=None):
        """Maximize the weighted Bernoulli log-likelihood.

        Parameters
        ----------
        X : ndarray, shape (n, p)
            Design matrix without intercept. ``p`` may be 0.
        y : ndarray, shape (n,)
            Binary outcomes.
        sample_weight : ndarray, shape (n,), optional
            Nonnegative case weights.
        term_labels : sequence of str, optional
            Names used in separation error messages.
        """
        self._check_link()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float)
        if X.shape[0] != y.shape[0]:
            X = X.reshape(y.shape[0], -1)
        if not np.isfinite(X).all():
            raise ValueError("non-finite covariate values")
        if np.any((y != 0) & (y != 1)):
            raise ValueError("outcomes must be 0/1")
        if sample_weight is None:
            w = np.ones_like(y)
        else:
            w = np.asarray(sample_weight, dtype=float)
            if np.any(w < 0):
                raise ValueError("negative case weights")
        used = w > 0
        ybar = np.average(y[used], weights=w[used]) if used.any() else np.nan
        if not (0.0 < ybar < 1.0):
            raise ValueError("outcomes are all one class; model is not identifiable")

        Xd = np.column_stack([np.ones(y.shape[0]), X])
        # covariate scale for the separation check, intercept scale is 1
        scale = np.ones(Xd.shape[1])
        if Xd.shape[1] > 1:
            sd = X.std(axis=0)
            scale[1:] = np.where(sd > 0, sd, 1.0)
        self._labels = list(term_labels) if term_labels is not None else [
            f"x{j}" for j in range(X.shape[1])
        ]

        if self.link == "logit":
            beta, n_iter, converged = self._fit_logit(Xd, y, w, scale)
        else:
            beta, n_iter, converged = self._fit_cauchit(Xd, y, w, scale)

        self.coef_ = beta
        self.n_iter_ = n_iter
        self.converged_ = converged
        self.max_score_ = float(np.abs(self._score(Xd, y, w, beta)).max())
        if not converged:
            raise ConvergenceError(
                f"{self.link} fit did not converge in {self.max_iter} iterations "
                f"(max score {self.max_score_:.3g})"
            )
        return self

    def _check_separation(self, beta, scale):
        std_beta = beta * scale
        if np.any(np.abs(std_beta[1:]) > _SEPARATION_BOUND):
            j = int(np.argmax(np.abs(std_beta[1:])))
            raise PerfectSeparationError(
                f"coefficient for term '{self._labels[j]}' diverged "
                f"(standardized |beta| = {np.abs(std_beta[1:][j]):.1f}); "
                "data are (quasi-)separated"
            )

    def _mu(self, eta):
        if self.link == "logit":
            return _expit(eta)
        return _cauchit_cdf(eta)

    def _loglik(self, Xd, y, w, beta):
        p = np.clip(self._mu(Xd @ beta), PROB_CLAMP, 1.0 - PROB_CLAMP)
        return float(np.sum(w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))

    def _score(self, Xd, y, w, beta):
        eta = Xd @ beta
        p = np.clip(self._mu(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
        if self.link == "logit":
            resid = w * (y - p)
        else:
            resid = w * (y - p) * _cauchit_pdf(eta) / (p * (1.0 - p))
        return Xd.T @ resid

    def _fit_logit(self, Xd, y, w, scale):
        beta = np.zeros(Xd.shape[1])
        ll = self._loglik(Xd, y, w, beta)
        for it in range(1, self.max_iter + 1):
            eta = Xd @ beta
            p = np.clip(_expit(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
            wirls = w * p * (1.0 - p)
            z = eta + (y - p) / (p * (1.0 - p))
            wx = Xd * wirls[:, None]
            try:
                beta = np.linalg.solve(Xd.T @ wx, wx.T @ z)
            except np.linalg.LinAlgError as err:
                raise ConvergenceError(f"singular IRLS system: {err}") from err
            self._check_separation(beta, scale)
            ll_new = self._loglik(Xd, y, w, beta)
            score_max = np.abs(self._score(Xd, y, w, beta)).max()
            rel = abs(ll_new - ll) / max(abs(ll), 1.0)
            ll = ll_new
            if score_max < self.score_tol or rel < self.loglik_tol:
                return beta, it, True
        return beta, self.max_iter, False

    def _fit_cauchit(self, Xd, y, w, scale):
        beta = np.zeros(Xd.shape[1])
        ll = self._loglik(Xd, y, w, beta)
        for it in range(1, self.max_iter + 1):
            eta = Xd @ beta
            p = np.clip(_cauchit_cdf(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
            f = _cauchit_pdf(eta)
            score = Xd.T @ (w * (y - p) * f / (p * (1.0 - p)))
            # expected information keeps the step direction ascent-aligned
            info_w = w * f * f / (p * (1.0 - p))
            info = Xd.T @ (Xd * info_w[:, None])
            try:
                step = np.linalg.solve(info, score)
            except np.linalg.LinAlgError as err:
                raise ConvergenceError(f"singular information matrix: {err}") from err
            # step halving on likelihood decrease
            factor = 1.0
            for _ in range(30):
                cand = beta + factor * step
                ll_new = self._loglik(Xd, y, w, cand)
                if ll_new >= ll - 1e-12:
                    break
                factor *= 0.5
            beta = beta + factor * step
            self._check_separation(beta, scale)
            ll_new = self._loglik(Xd, y, w, beta)
            score_max = np.abs(self._score(Xd, y, w, beta)).max()
            rel = abs(ll_new - ll) / max(abs(ll), 1.0)
            ll = ll_new
            if score_max < self.score_tol or rel < self.loglik_tol:
                return beta, it, True
        return beta, self.max_iter, False

    def linear_predictor(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.coef_.size - 1:
            X = X.reshape(-1, self.coef_.size - 1)
        return self.coef_[0] + X @ self.coef_[1:]

    def predict_proba(self, X):
        """P(y=1 | X), clamped away from 0 and 1.

        Accepts an (n, p) design matrix (without intercept); with p = 0 the
        intercept-only probability is broadcast over the n rows.
        """
        if not np.isfinite(np.asarray(X, dtype=float)).all():
            raise ValueError("non-finite covariate values")
        eta = self.linear_predictor(X)
        return np.clip(self._mu(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)

    def observed_information(self, X, sample_weight=None):
        """Expected information matrix at the fit, for coefficient SEs."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Xd = np.column_stack([np.ones(X.shape[0]), X])
        eta = Xd @ self.coef_
        p = np.clip(self._mu(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
        w = np.ones(X.shape[0]) if sample_weight is None else np.asarray(sample_weight, float)
        if self.link == "logit":
            info_w = w * p * (1.0 - p)
        else:
            f = _cauchit_pdf(eta)
            info_w = w * f * f / (p * (1.0 - p))
        return Xd.T @ (Xd * info_w[:, None])

    def to_dict(self):
        return {"link": self.link, "coef": self.coef_.tolist()}

    @classmethod
    def from_dict(cls, d):
        model = cls(link=d["link"])
        model.coef_ = np.asarray(d["coef"], dtype=float)
        model.n_iter_ = 0
        model.converged_ = True
        model.max_score_ = np.nan
        model._labels = [f"x{j}" for j in range(model.coef_.size - 1)]
        return model
