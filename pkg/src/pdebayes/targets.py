"""Posterior targets and chain states for the samplers.

A target turns parameter vectors into ChainStates carrying the cached
log-posterior, misfit value, and (lazily) the gradients that
gradient-based proposals need. PosteriorTarget composes a forward model
with a Gaussian prior; DenseGaussian provides the same operator interface
as the field prior for small dense problems, which makes linear-Gaussian
oracle targets and low-dimensional sampler tests cheap to build.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg


class TargetEvaluationError(RuntimeError):
    """The target could not be evaluated at the requested point."""


class ChainState:
    """One evaluated point of a target, with lazy gradient caches."""

    __slots__ = ("target", "m", "log_posterior", "misfit_cost",
                 "_grad_phi", "_grad_logpost", "model_state")

    def __init__(self, target, m, log_posterior, misfit_cost, model_state=None):
        self.target = target
        self.m = m
        self.log_posterior = log_posterior
        self.misfit_cost = misfit_cost
        self.model_state = model_state
        self._grad_phi = None
        self._grad_logpost = None

    @property
    def grad_log_posterior(self) -> np.ndarray:
        if self._grad_logpost is None:
            self.target.fill_gradient(self)
        return self._grad_logpost

    @property
    def grad_misfit(self) -> np.ndarray:
        if self._grad_phi is None:
            self.target.fill_gradient(self)
        return self._grad_phi

    def qoi(self) -> float:
        return self.target.qoi(self)


class PosteriorTarget:
    """Unnormalized posterior -misfit(m) - prior.cost(m) over a forward model."""

    supports_gradient = True

    def __init__(self, model, prior):
        self.model = model
        self.prior = prior

    @property
    def dim(self) -> int:
        return self.prior.dim

    def make_state(self, m: np.ndarray) -> ChainState:
        try:
            model_state = self.model.evaluate(m)
        except (np.linalg.LinAlgError, RuntimeError) as exc:
            raise TargetEvaluationError(str(exc)) from exc
        phi = model_state.cost
        log_post = -phi - self.prior.cost(m)
        if not np.isfinite(log_post):
            raise TargetEvaluationError(f"log posterior {log_post} at evaluated point")
        return ChainState(self, np.asarray(m, dtype=float), log_post, phi, model_state)

    def fill_gradient(self, state: ChainState) -> None:
        state._grad_phi = state.model_state.gradient()
        state._grad_logpost = -state._grad_phi - self.prior.grad(state.m)

    def qoi(self, state: ChainState) -> float:
        try:
            return state.model_state.qoi()
        except RuntimeError:
            return float("nan")

    def log_posterior(self, m: np.ndarray) -> float:
        return self.make_state(m).log_posterior

    def grad_log_posterior(self, m: np.ndarray) -> np.ndarray:
        return self.make_state(m).grad_log_posterior

    @property
    def solve_total(self) -> int:
        counter = getattr(self.model, "counter", None)
        return counter.total if counter is not None else 0


class CallableTarget:
    """Target wrapping a plain log-density function (test and demo use)."""

    def __init__(self, log_density, grad_log_density=None, dim=None, qoi=None):
        self._logpdf = log_density
        self._grad = grad_log_density
        self._qoi = qoi
        self.dim = dim
        self.supports_gradient = grad_log_density is not None
        self.solve_total = 0

    def make_state(self, m) -> ChainState:
        m = np.asarray(m, dtype=float)
        lp = float(self._logpdf(m))
        if np.isnan(lp):
            raise TargetEvaluationError("log density is NaN")
        return ChainState(self, m, lp, -lp)

    def fill_gradient(self, state: ChainState) -> None:
        if self._grad is None:
            raise TargetEvaluationError("target has no gradient")
        g = np.asarray(self._grad(state.m), dtype=float)
        state._grad_logpost = g
        state._grad_phi = -g

    def qoi(self, state: ChainState) -> float:
        if self._qoi is None:
            return float("nan")
        return float(self._qoi(state.m))


class DenseGaussian:
    """Dense N(mean, cov) exposing the field-prior operator interface.

    Suitable as the reference measure of proposals on small problems and as
    the prior of dense oracle targets. The square-root factor is the lower
    Cholesky factor of the covariance.
    """

    def __init__(self, mean: np.ndarray, cov: np.ndarray):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match the mean")
        self._chol = np.linalg.cholesky(self.cov)
        self._cho_factor = scipy.linalg.cho_factor(self.cov, lower=True)

    @property
    def dim(self) -> int:
        return self.mean.size

    def cost(self, m: np.ndarray) -> float:
        d = m - self.mean
        return 0.5 * float(d @ self.apply_precision(d))

    def grad(self, m: np.ndarray) -> np.ndarray:
        return self.apply_precision(m - self.mean)

    def apply_covariance(self, v: np.ndarray) -> np.ndarray:
        return self.cov @ v

    def apply_precision(self, v: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self._cho_factor, v)

    def apply_cov_factor(self, z: np.ndarray) -> np.ndarray:
        return self._chol @ z

    def apply_cov_factor_inv(self, v: np.ndarray) -> np.ndarray:
        return scipy.linalg.solve_triangular(self._chol, v, lower=True)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self._chol @ rng.standard_normal(self.dim)
