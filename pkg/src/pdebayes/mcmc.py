"""Transition kernels and proposal distributions over the posterior.

Seven Gaussian proposals (random walk, pCN, MALA, their curvature-informed
counterparts using the low-rank posterior Gaussian, and the
dimension-robust Langevin variants) share one template: a state-dependent
mean plus a scaled reference covariance whose square root and precision are
applied through prior or Laplace factor operations, never densely. The
kernels (Metropolis-Hastings, delayed rejection, and the subspace
Gibbs sampler over the likelihood-informed directions) combine freely with
the proposals. All acceptance arithmetic is in log space.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .targets import ChainState, TargetEvaluationError

logger = logging.getLogger(__name__)

LOG_HALF = math.log(0.5)


def _log1m_exp(log_p: float) -> float:
    """log(1 - exp(log_p)) for log_p <= 0; -inf when log_p >= 0."""
    if log_p >= 0.0:
        return -math.inf
    if log_p < LOG_HALF:
        return math.log1p(-math.exp(log_p))
    return math.log(-math.expm1(log_p))


class GaussianProposal:
    """Gaussian proposal with covariance scale^2 times a reference covariance.

    Subclasses define the state-dependent mean. Log densities are reported up
    to the (state-independent) normalizing constant, evaluated through the
    reference precision.
    """

    requires_gradient = False
    name = "gaussian"

    def __init__(self, reference, scale: float):
        if scale <= 0:
            raise ValueError("proposal scale must be positive")
        self.reference = reference
        self.scale = scale

    def mean(self, state: ChainState) -> np.ndarray:
        raise NotImplementedError

    def sample(self, state: ChainState, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.reference.dim)
        return self.mean(state) + self.scale * self.reference.apply_cov_factor(z)

    def log_density(self, from_state: ChainState, to: np.ndarray) -> float:
        d = to - self.mean(from_state)
        quad = float(d @ self.reference.apply_precision(d))
        return -0.5 * quad / self.scale**2


class RandomWalkProposal(GaussianProposal):
    """Centered at the current state; covariance step^2 times the reference."""

    name = "rw"

    def mean(self, state: ChainState) -> np.ndarray:
        return state.m


class AutoregressiveProposal(GaussianProposal):
    """Crank-Nicolson style contraction toward the reference mean.

    With the prior as reference this is the preconditioned Crank-Nicolson
    proposal (a prior draw at beta = 1); with the low-rank posterior Gaussian
    it becomes its curvature-informed variant.
    """

    name = "pcn"

    def __init__(self, reference, beta: float):
        if not 0 < beta <= 1:
            raise ValueError(f"autoregressive parameter beta must be in (0, 1], got {beta}")
        super().__init__(reference, beta)
        self.beta = beta
        self._keep = math.sqrt(1.0 - beta**2)

    def mean(self, state: ChainState) -> np.ndarray:
        ref_mean = self.reference.mean
        return ref_mean + self._keep * (state.m - ref_mean)


class LangevinProposal(GaussianProposal):
    """One-step Euler-Maruyama Langevin move preconditioned by the reference.

    Mean m + tau * Cov * grad log pi(m), covariance 2 tau Cov.
    """

    name = "mala"
    requires_gradient = True

    def __init__(self, reference, tau: float):
        if tau <= 0:
            raise ValueError("Langevin step size tau must be positive")
        super().__init__(reference, math.sqrt(2.0 * tau))
        self.tau = tau

    def mean(self, state: ChainState) -> np.ndarray:
        return state.m + self.tau * self.reference.apply_covariance(
            state.grad_log_posterior)


class DimensionRobustLangevinProposal(GaussianProposal):
    """Semi-implicit Langevin move that stays well defined under refinement.

    Mean sqrt(1-beta^2) m + (beta sqrt(h)/2)(ref_mean - Cov grad misfit),
    covariance beta^2 Cov, with beta = 4 sqrt(h)/(4+h). With the prior as
    reference the drift term is mean_prior - C grad_misfit; with the low-rank
    posterior Gaussian it is m - Hinv (Cprior^{-1}(m - mean_prior) + grad_misfit),
    both realized through operator actions.
    """

    name = "inf-mala"
    requires_gradient = True

    def __init__(self, reference, h: float, prior=None):
        if h <= 0:
            raise ValueError("step parameter h must be positive")
        beta = 4.0 * math.sqrt(h) / (4.0 + h)
        super().__init__(reference, beta)
        self.h = h
        self.beta = beta
        self._keep = math.sqrt(max(0.0, 1.0 - beta**2))
        self._prior = prior   # set for the curvature-informed variant

    def mean(self, state: ChainState) -> np.ndarray:
        ref = self.reference
        if self._prior is None:
            drift = ref.mean - ref.apply_covariance(state.grad_misfit)
        else:
            pull = self._prior.apply_precision(state.m - self._prior.mean)
            drift = state.m - ref.apply_covariance(pull + state.grad_misfit)
        return self._keep * state.m + 0.5 * self.beta * math.sqrt(self.h) * drift


def random_walk(reference, step: float = 1.0) -> RandomWalkProposal:
    return RandomWalkProposal(reference, step)


def pcn(prior, beta: float) -> AutoregressiveProposal:
    return AutoregressiveProposal(prior, beta)


def mala(reference, tau: float) -> LangevinProposal:
    return LangevinProposal(reference, tau)


def inf_mala(prior, h: float) -> DimensionRobustLangevinProposal:
    return DimensionRobustLangevinProposal(prior, h)


def h_pcn(laplace, beta: float) -> AutoregressiveProposal:
    prop = AutoregressiveProposal(laplace, beta)
    prop.name = "h-pcn"
    return prop


def h_mala(laplace, tau: float) -> LangevinProposal:
    prop = LangevinProposal(laplace, tau)
    prop.name = "h-mala"
    return prop


def h_inf_mala(laplace, h: float) -> DimensionRobustLangevinProposal:
    prop = DimensionRobustLangevinProposal(laplace, h, prior=laplace.prior)
    prop.name = "h-inf-mala"
    return prop


# ---------------------------------------------------------------------------
# Metropolis-Hastings
# ---------------------------------------------------------------------------

def mh_accept_log_prob(proposal, current: ChainState, proposed: ChainState) -> float:
    """log of min{1, posterior ratio times proposal density ratio}."""
    log_gamma = (proposed.log_posterior - current.log_posterior
                 + proposal.log_density(proposed, current.m)
                 - proposal.log_density(current, proposed.m))
    if math.isnan(log_gamma):
        logger.warning("NaN acceptance ratio; rejecting the proposed point")
        return -math.inf
    return min(0.0, log_gamma)


def mh_accept_prob(proposal, current: ChainState, proposed: ChainState) -> float:
    return math.exp(mh_accept_log_prob(proposal, current, proposed))


class MHKernel:
    """Single-proposal Metropolis-Hastings transition kernel."""

    def __init__(self, proposal):
        self.proposals = [proposal]

    @property
    def proposal(self):
        return self.proposals[0]

    def validate(self, target) -> None:
        if self.proposal.requires_gradient and not getattr(
                target, "supports_gradient", True):
            raise ValueError("proposal needs gradients the target cannot provide")

    def step(self, target, current: ChainState, rng: np.random.Generator):
        try:
            proposed = target.make_state(self.proposal.sample(current, rng))
            log_alpha = mh_accept_log_prob(self.proposal, current, proposed)
        except TargetEvaluationError as exc:
            logger.warning("model failure at proposed point: %s", exc)
            return current, 0
        if math.log(max(rng.random(), 1e-300)) < log_alpha:
            return proposed, 1
        return current, 0


# ---------------------------------------------------------------------------
# Delayed rejection
# ---------------------------------------------------------------------------

def dr_accept_log_prob(proposals, current: ChainState, rejected: list,
                       proposed: ChainState) -> float:
    """Recursive stage acceptance probability of the delayed rejection rule.

    rejected holds the states turned down at stages 1..j-1; proposed is the
    stage-j candidate. A unit acceptance probability in a denominator forces
    rejection of the branch (the event has probability zero in the continuous
    setting, so stationarity is unaffected).
    """
    j = len(rejected) + 1
    qj = proposals[j - 1]
    log_gamma = (proposed.log_posterior - current.log_posterior
                 + qj.log_density(proposed, current.m)
                 - qj.log_density(current, proposed.m))
    for k in range(1, j):
        qk = proposals[k - 1]
        log_gamma += (qk.log_density(proposed, rejected[j - k - 1].m)
                      - qk.log_density(current, rejected[k - 1].m))
        # Reversed path: from the stage-j candidate back through the
        # rejected states in reverse order.
        fwd = dr_accept_log_prob(proposals, proposed,
                                 rejected[j - k:][::-1], rejected[j - k - 1])
        bwd = dr_accept_log_prob(proposals, current,
                                 rejected[:k - 1], rejected[k - 1])
        log_num = _log1m_exp(fwd)
        log_den = _log1m_exp(bwd)
        if log_den == -math.inf:
            return -math.inf
        log_gamma += log_num - log_den
    if math.isnan(log_gamma):
        logger.warning("NaN delayed-rejection ratio; rejecting the branch")
        return -math.inf
    return min(0.0, log_gamma)


def dr_accept_prob(proposals, current, rejected, proposed) -> float:
    return math.exp(dr_accept_log_prob(proposals, current, rejected, proposed))


class DRKernel:
    """Delayed rejection through an ordered sequence of proposals."""

    def __init__(self, proposals):
        if len(proposals) < 1:
            raise ValueError("delayed rejection needs at least one proposal")
        self.proposals = list(proposals)

    def validate(self, target) -> None:
        for prop in self.proposals:
            if prop.requires_gradient and not getattr(target, "supports_gradient", True):
                raise ValueError("proposal needs gradients the target cannot provide")

    def step(self, target, current: ChainState, rng: np.random.Generator):
        rejected = []
        for j, proposal in enumerate(self.proposals, start=1):
            try:
                proposed = target.make_state(proposal.sample(current, rng))
                log_alpha = dr_accept_log_prob(self.proposals, current,
                                               rejected, proposed)
            except TargetEvaluationError as exc:
                logger.warning("model failure at stage-%d point: %s", j, exc)
                return current, 0
            if math.log(max(rng.random(), 1e-300)) < log_alpha:
                return proposed, j
            rejected.append(proposed)
        return current, 0


# ---------------------------------------------------------------------------
# Subspace Metropolis-within-Gibbs over the informed directions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubspaceGibbsConfig:
    lis_step: float = 0.1        # tau: scale of the informed-subspace move
    cs_beta: float = 0.8         # pCN parameter of the complement move
    lis_center: str = "map"      # map | current | prior

    def __post_init__(self):
        if not 0 < self.cs_beta <= 1:
            raise ValueError("complement-space beta must be in (0, 1]")
        if self.lis_step <= 0:
            raise ValueError("subspace step must be positive")
        if self.lis_center == "map" and not 0 < self.lis_step <= 1:
            raise ValueError("map-centered subspace step must be in (0, 1]")
        if self.lis_center not in ("map", "current", "prior"):
            raise ValueError(f"unknown subspace centering '{self.lis_center}'")


class DiliKernel:
    """Gibbs scan: informed-subspace move, then pCN in the complement.

    The state splits as m = V r + c with r the coefficients along the
    retained curvature directions (C^{-1}-orthonormal) and c the oblique
    complement. The r move is Metropolis with a Gaussian proposal whose
    covariance is the subspace posterior Gaussian (1+lam)^{-1} scaled by the
    step, centered per configuration; the c move is pCN against the prior
    restricted to the complement. Both acceptances evaluate the full
    posterior at the recombined point.
    """

    def __init__(self, laplace, config: SubspaceGibbsConfig | None = None):
        if laplace.rank < 1:
            raise ValueError("subspace kernel needs at least one retained direction")
        self.laplace = laplace
        self.prior = laplace.prior
        self.config = config or SubspaceGibbsConfig()
        self.vecs = laplace.vecs
        self._w = laplace._w
        lam = laplace.lam
        self._lis_sd = np.sqrt(self.config.lis_step / (1.0 + lam))
        self._lis_prec = (1.0 + lam) / self.config.lis_step
        self._r_map = self._w.T @ laplace.m_map
        self._r_prior = self._w.T @ self.prior.mean
        self._c_prior = self.prior.mean - self.vecs @ self._r_prior

    def validate(self, target) -> None:
        pass

    def split(self, m: np.ndarray):
        r = self._w.T @ m
        return r, m - self.vecs @ r

    def _lis_mean(self, r: np.ndarray) -> np.ndarray:
        cfg = self.config
        if cfg.lis_center == "map":
            return self._r_map + math.sqrt(1.0 - cfg.lis_step) * (r - self._r_map)
        if cfg.lis_center == "prior":
            return self._r_prior + math.sqrt(max(0.0, 1.0 - cfg.lis_step)) * (r - self._r_prior)
        return r

    def _lis_log_density(self, r_from: np.ndarray, r_to: np.ndarray) -> float:
        d = r_to - self._lis_mean(r_from)
        return -0.5 * float(d @ (self._lis_prec * d))

    def step(self, target, current: ChainState, rng: np.random.Generator):
        cfg = self.config
        r, c = self.split(current.m)

        # Informed-subspace move at c fixed.
        r_prop = self._lis_mean(r) + self._lis_sd * rng.standard_normal(r.size)
        mid = current
        lis_accepted = 0
        try:
            candidate = target.make_state(current.m + self.vecs @ (r_prop - r))
            log_alpha = (candidate.log_posterior - current.log_posterior
                         + self._lis_log_density(r_prop, r)
                         - self._lis_log_density(r, r_prop))
            if not math.isnan(log_alpha) and math.log(max(rng.random(), 1e-300)) < log_alpha:
                mid, lis_accepted = candidate, 1
                r = r_prop
        except TargetEvaluationError as exc:
            logger.warning("model failure in subspace move: %s", exc)

        # Complement move at r fixed: pCN against the prior restricted to
        # the complement; the prior quadratic form splits exactly across the
        # two components, so the correction uses the full prior precision.
        keep = math.sqrt(1.0 - cfg.cs_beta**2)
        noise = self.prior.apply_cov_factor(rng.standard_normal(self.prior.dim))
        noise = noise - self.vecs @ (self._w.T @ noise)
        c_prop = (self._c_prior + keep * (c - self._c_prior) + cfg.cs_beta * noise)
        try:
            candidate = target.make_state(mid.m + (c_prop - c))
            d_fwd = c_prop - self._c_prior - keep * (c - self._c_prior)
            d_bwd = c - self._c_prior - keep * (c_prop - self._c_prior)
            corr = -0.5 / cfg.cs_beta**2 * (
                float(d_bwd @ self.prior.apply_precision(d_bwd))
                - float(d_fwd @ self.prior.apply_precision(d_fwd)))
            log_alpha = candidate.log_posterior - mid.log_posterior + corr
            if not math.isnan(log_alpha) and math.log(max(rng.random(), 1e-300)) < log_alpha:
                return candidate, (lis_accepted, 1)
        except TargetEvaluationError as exc:
            logger.warning("model failure in complement move: %s", exc)
        return mid, (lis_accepted, 0)


# ---------------------------------------------------------------------------
# Chain execution
# ---------------------------------------------------------------------------

@dataclass
class ChainRecord:
    """Per-iteration record of one chain plus acceptance/solve accounting."""

    coords: np.ndarray            # (N, k) projected coefficients
    qoi: np.ndarray               # (N,) with NaN for failed evaluations
    log_posterior: np.ndarray     # (N,)
    accepted: np.ndarray          # (N,) stage index or 0/1 flag
    stage_attempts: np.ndarray
    stage_accepts: np.ndarray
    solves: int
    seed: int
    kernel_name: str

    @property
    def n_steps(self) -> int:
        return self.log_posterior.size

    def acceptance_rates(self) -> np.ndarray:
        att = np.maximum(self.stage_attempts, 1)
        return self.stage_accepts / att


def run_chain(target, kernel, start: np.ndarray, n_steps: int, seed: int,
              projector=None, kernel_name: str = "") -> ChainRecord:
    """Apply the kernel n_steps times, recording projections and the QoI.

    Deterministic for fixed inputs: the chain owns a fresh generator seeded
    with `seed`. Model failures at proposed points reject the move and are
    logged; QoI failures record NaN for that sample only.
    """
    if n_steps < 1:
        raise ValueError("chain length must be at least 1")
    kernel.validate(target)
    rng = np.random.default_rng(seed)
    state = target.make_state(np.asarray(start, dtype=float))

    n_stages = len(getattr(kernel, "proposals", (None,))) if not isinstance(
        kernel, DiliKernel) else 2
    k = 0 if projector is None else projector(state.m).size
    coords = np.empty((n_steps, k))
    qoi = np.empty(n_steps)
    logpost = np.empty(n_steps)
    accepted = np.zeros(n_steps, dtype=np.int64)
    stage_attempts = np.zeros(n_stages, dtype=np.int64)
    stage_accepts = np.zeros(n_stages, dtype=np.int64)

    solves0 = target.solve_total
    for i in range(n_steps):
        state, info = kernel.step(target, state, rng)
        if isinstance(kernel, DiliKernel):
            lis_acc, cs_acc = info
            stage_attempts += 1
            stage_accepts[0] += lis_acc
            stage_accepts[1] += cs_acc
            accepted[i] = 1 if (lis_acc or cs_acc) else 0
        else:
            stage = int(info)
            if stage == 0:
                stage_attempts += 1
            else:
                stage_attempts[:stage] += 1
                stage_accepts[stage - 1] += 1
            accepted[i] = stage
        if k:
            coords[i] = projector(state.m)
        qoi[i] = state.qoi()
        logpost[i] = state.log_posterior

    return ChainRecord(coords=coords, qoi=qoi, log_posterior=logpost,
                       accepted=accepted, stage_attempts=stage_attempts,
                       stage_accepts=stage_accepts,
                       solves=target.solve_total - solves0,
                       seed=seed, kernel_name=kernel_name)
