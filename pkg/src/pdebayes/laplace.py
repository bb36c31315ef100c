"""MAP estimation and the low-rank Gaussian approximation of the posterior.

compute_map runs an inexact Newton-CG iteration on the negative log-posterior
(misfit plus prior quadratic). The curvature of the misfit at the MAP point is
then compressed by a double-pass randomized solver for the generalized
eigenproblem  H_misfit v = lam C^{-1} v,  and the retained pairs define a
Gaussian N(m_map, H^{-1}) whose covariance actions use the low-rank
Sherman-Morrison-Woodbury form  H^{-1} = C - V diag(lam/(1+lam)) V^T.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)


class MapConvergenceError(RuntimeError):
    def __init__(self, grad_norm, iterations, m):
        super().__init__(
            f"Newton iteration did not converge in {iterations} steps; "
            f"final gradient norm {grad_norm:.3e}")
        self.grad_norm = grad_norm
        self.iterations = iterations
        self.m = m


class EigensolverBreakdown(RuntimeError):
    """The randomized sketch lost rank during orthonormalization."""


@dataclass
class NewtonConfig:
    grad_rel_tol: float = 1e-6
    grad_abs_tol: float = 1e-12
    max_newton_iters: int = 50
    max_cg_iters: int = 200
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    gn_phase_iters: int = 5
    max_backtracks: int = 30

    def __post_init__(self):
        if min(self.grad_rel_tol, self.grad_abs_tol, self.armijo_c) <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtracking factor must lie in (0,1)")


@dataclass
class MapResult:
    m: np.ndarray
    cost: float
    grad_norm: float
    iterations: int
    converged: bool
    cost_history: list = field(default_factory=list)
    reason: str = "gradient"


def _cg_newton_direction(hess_apply, grad, tol, max_iters):
    """Truncated CG on H d = -g with negative-curvature exit."""
    d = np.zeros_like(grad)
    r = -grad
    p = r.copy()
    rr = r @ r
    for j in range(max_iters):
        hp = hess_apply(p)
        php = p @ hp
        if php <= 0:
            # Negative curvature: fall back to the last iterate, or steepest
            # descent if it happens immediately.
            if j == 0:
                return -grad, j + 1
            return d, j + 1
        alpha = rr / php
        d += alpha * p
        r -= alpha * hp
        rr_new = r @ r
        if math.sqrt(rr_new) <= tol:
            return d, j + 1
        p = r + (rr_new / rr) * p
        rr = rr_new
    return d, max_iters


def compute_map(model, prior, m0: np.ndarray | None = None,
                cfg: NewtonConfig | None = None) -> MapResult:
    """Minimize misfit(m) + prior.cost(m) by inexact Newton-CG.

    Uses the Gauss-Newton Hessian for the first cfg.gn_phase_iters
    iterations, Eisenstat-Walker forcing min(0.5, sqrt(|g|/|g0|)) for the
    inner CG tolerance, and Armijo backtracking. Raises MapConvergenceError
    if the gradient norm target is not reached.
    """
    cfg = cfg or NewtonConfig()
    m = np.array(prior.mean if m0 is None else m0, dtype=float)

    state = model.evaluate(m)
    cost = state.cost + prior.cost(m)
    grad = state.gradient() + prior.grad(m)
    gnorm0 = float(np.linalg.norm(grad))
    tol = max(cfg.grad_abs_tol, cfg.grad_rel_tol * gnorm0)
    history = [cost]

    for it in range(cfg.max_newton_iters):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            return MapResult(m, cost, gnorm, it, True, history)

        gauss_newton = it < cfg.gn_phase_iters
        forcing = min(0.5, math.sqrt(gnorm / gnorm0))

        def hess_apply(v, _state=state, _gn=gauss_newton):
            return _state.hessian_action(v, gauss_newton=_gn) + prior.apply_precision(v)

        direction, _ = _cg_newton_direction(hess_apply, grad, forcing * gnorm,
                                            cfg.max_cg_iters)
        slope = float(grad @ direction)
        if slope >= 0:
            direction = -grad
            slope = -gnorm**2

        alpha = 1.0
        for _ in range(cfg.max_backtracks):
            try:
                trial_state = model.evaluate(m + alpha * direction)
                trial_cost = trial_state.cost + prior.cost(m + alpha * direction)
            except Exception:
                trial_cost = np.inf
                trial_state = None
            if trial_cost <= cost + cfg.armijo_c * alpha * slope:
                break
            alpha *= cfg.backtrack_factor
        else:
            # Sufficient decrease is unattainable at this precision; stop at
            # the best point rather than looping without progress.
            logger.warning("line search stalled at iteration %d, |grad| = %.3e",
                           it, gnorm)
            return MapResult(m, cost, gnorm, it, False, history,
                             reason="line_search_stall")

        m = m + alpha * direction
        state = trial_state
        cost = trial_cost
        grad = state.gradient() + prior.grad(m)
        history.append(cost)

    gnorm = float(np.linalg.norm(grad))
    if gnorm <= tol:
        return MapResult(m, cost, gnorm, cfg.max_newton_iters, True, history)
    raise MapConvergenceError(gnorm, cfg.max_newton_iters, m)


def _chol_qr(Y: np.ndarray, inner_apply) -> np.ndarray:
    """Orthonormalize the columns of Y in the inner_apply inner product.

    A Euclidean QR pass first tames the conditioning of the sketch (its
    columns span many orders of magnitude when the spectrum decays fast);
    two weighted Cholesky-QR passes then enforce the requested inner product.
    """
    q, _ = np.linalg.qr(Y)
    for _ in range(2):
        z = np.column_stack([inner_apply(q[:, j]) for j in range(q.shape[1])])
        gram = q.T @ z
        gram = 0.5 * (gram + gram.T)
        try:
            chol = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError as exc:
            raise EigensolverBreakdown(
                "sketch became rank deficient during orthonormalization") from exc
        q = scipy.linalg.solve_triangular(chol, q.T, lower=True).T
    return q


def doublepass_randomized_eig(hess_action, prior, k: int, p: int = 20,
                              rng: np.random.Generator | None = None):
    """Dominant pairs of the generalized problem H v = lam C^{-1} v.

    First pass applies C * H once to a Gaussian block of k+p columns to
    capture the dominant range; the block is then orthonormalized against
    C^{-1} and a second pass of H builds the small projected problem.
    Returns (lam, V) with lam descending and V^T C^{-1} V = I.
    """
    rng = rng or np.random.default_rng(0)
    n = prior.dim
    if k + p > n:
        raise ValueError(f"requested {k}+{p} columns exceeds dimension {n}")
    omega = rng.standard_normal((n, k + p))
    y = np.column_stack(
        [prior.apply_covariance(hess_action(omega[:, j])) for j in range(k + p)])
    if not np.abs(y).max() > 0:
        raise EigensolverBreakdown("operator annihilated the Gaussian sketch")
    q = _chol_qr(y, prior.apply_precision)
    hq = np.column_stack([hess_action(q[:, j]) for j in range(k + p)])
    t = q.T @ hq
    t = 0.5 * (t + t.T)
    lam, s = np.linalg.eigh(t)
    order = np.argsort(lam)[::-1][:k]
    return lam[order], q @ s[:, order]


def truncate_spectrum(lam: np.ndarray, vecs: np.ndarray, threshold: float = 1.0):
    """Keep the pairs with lam > threshold; an empty result is legitimate."""
    lam = np.asarray(lam, dtype=float)
    if np.any(np.diff(lam) > 0):
        raise ValueError("eigenvalues must be sorted descending")
    r = int(np.sum(lam > threshold))
    return lam[:r], vecs[:, :r]


class LaplaceApprox:
    """Gaussian N(m_map, H^{-1}) with H = C^{-1} + V diag(lam) V^T C^{-1}-style
    low-rank curvature, exposing the same operator interface as the prior.

    The log density is reported up to a fixed additive constant (zero at the
    mean); every consumer uses only differences.
    """

    def __init__(self, prior, m_map: np.ndarray, lam: np.ndarray, vecs: np.ndarray):
        lam = np.asarray(lam, dtype=float)
        vecs = np.asarray(vecs, dtype=float)
        if vecs.shape != (prior.dim, lam.size):
            raise ValueError("eigenvector block has wrong shape")
        self.prior = prior
        self.m_map = np.asarray(m_map, dtype=float)
        self.lam = lam
        self.vecs = vecs
        self.rank = lam.size
        self._d = lam / (1.0 + lam)
        # W = C^{-1} V drives precision actions and subspace projections;
        # U = M^{-1/2} A V is the orthonormal block of the sampling factor.
        self._w = np.column_stack(
            [prior.apply_precision(vecs[:, j]) for j in range(self.rank)]
        ) if self.rank else np.zeros((prior.dim, 0))
        self._u = np.column_stack(
            [prior.apply_cov_factor_inv(vecs[:, j]) for j in range(self.rank)]
        ) if self.rank else np.zeros((prior.dim, 0))

    @classmethod
    def from_spectrum(cls, prior, m_map, lam, vecs, threshold: float = 1.0):
        lam_r, v_r = truncate_spectrum(lam, vecs, threshold)
        return cls(prior, m_map, lam_r, v_r)

    @property
    def dim(self) -> int:
        return self.prior.dim

    @property
    def mean(self) -> np.ndarray:
        return self.m_map

    def project(self, m: np.ndarray) -> np.ndarray:
        """Coefficients of m along the retained directions: V^T C^{-1} m."""
        return self._w.T @ m

    def apply_covariance(self, v: np.ndarray) -> np.ndarray:
        """Sherman-Morrison-Woodbury action (C - V D V^T) v."""
        return self.prior.apply_covariance(v) - self.vecs @ (self._d * (self.vecs.T @ v))

    apply_hinv = apply_covariance

    def apply_precision(self, v: np.ndarray) -> np.ndarray:
        """H v = C^{-1} v + W diag(lam) W^T v with W = C^{-1} V."""
        return self.prior.apply_precision(v) + self._w @ (self.lam * (self._w.T @ v))

    def apply_cov_factor(self, z: np.ndarray) -> np.ndarray:
        """Factor S with S S^T = H^{-1}, built from the prior factor."""
        if self.rank:
            corr = (1.0 / np.sqrt(1.0 + self.lam)) - 1.0
            z = z + self._u @ (corr * (self._u.T @ z))
        return self.prior.apply_cov_factor(z)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.dim)
        return self.m_map + self.apply_cov_factor(z)

    def log_density(self, m: np.ndarray) -> float:
        d = m - self.m_map
        quad = d @ self.prior.apply_precision(d)
        if self.rank:
            c = self._w.T @ d
            quad += float(self.lam @ (c * c))
        return -0.5 * float(quad)
