"""Multi-chain convergence and efficiency diagnostics.

Implements the within/between chain covariance split, the pooled posterior
covariance estimate, the multivariate potential scale reduction factor, the
multi-chain variogram autocorrelation estimate with the paired truncation
rule for the effective sample size, and per-chain moment estimates of the
quantity of interest. All functions are pure in the ensemble.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)


@dataclass
class ChainEnsemble:
    """M chains by N samples of k projected coordinates plus per-sample QoI."""

    coords: np.ndarray            # (M, N, k)
    qoi: np.ndarray | None = None       # (M, N), NaN marks failed samples
    solves: np.ndarray | None = None    # per-chain PDE solve counts
    stage_attempts: np.ndarray | None = None
    stage_accepts: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if self.coords.ndim != 3:
            raise ValueError("coords must have shape (chains, samples, coords)")
        if np.isnan(self.coords).any():
            raise ValueError("projected coordinates must not contain NaN")

    @property
    def num_chains(self) -> int:
        return self.coords.shape[0]

    @property
    def num_samples(self) -> int:
        return self.coords.shape[1]

    @property
    def num_coords(self) -> int:
        return self.coords.shape[2]

    @classmethod
    def from_records(cls, records) -> "ChainEnsemble":
        lengths = {r.n_steps for r in records}
        if len(lengths) != 1:
            raise ValueError("all chains must have equal length")
        return cls(
            coords=np.stack([r.coords for r in records]),
            qoi=np.stack([r.qoi for r in records]),
            solves=np.array([r.solves for r in records]),
            stage_attempts=np.stack([r.stage_attempts for r in records]),
            stage_accepts=np.stack([r.stage_accepts for r in records]),
        )


def project_to_lis(vecs: np.ndarray, prior, m: np.ndarray) -> np.ndarray:
    """Coefficients of m along the given directions: vecs^T C^{-1} m."""
    if vecs.shape[1] < 1:
        raise ValueError("projection needs at least one direction")
    return vecs.T @ prior.apply_precision(m)


def within_between_cov(coords: np.ndarray):
    """Within-chain covariance W and between-chain covariance B.

    W averages the per-chain sample covariances (denominator N-1); B scales
    the covariance of the chain means by N. Raises on degenerate input and
    flags constant chains, which make W singular.
    """
    coords = np.asarray(coords, dtype=float)
    m_chains, n, k = coords.shape
    if n < 2 or m_chains < 2:
        raise ValueError("need at least 2 chains of at least 2 samples")
    chain_means = coords.mean(axis=1)                      # (M, k)
    dev = coords - chain_means[:, None, :]
    w = np.einsum("mni,mnj->ij", dev, dev) / (m_chains * (n - 1))
    grand = chain_means.mean(axis=0)
    dmean = chain_means - grand
    b = n * (dmean.T @ dmean) / (m_chains - 1)
    if np.any(np.diag(w) == 0.0):
        logger.warning("constant chain coordinate detected; W is singular")
    return w, b


def vhat(w: np.ndarray, b: np.ndarray, n: int, m: int) -> np.ndarray:
    """Pooled posterior covariance estimate ((N-1)/N) W + ((M+1)/(MN)) B."""
    return ((n - 1) / n) * w + ((m + 1) / (m * n)) * b


def mpsrf(w: np.ndarray, b: np.ndarray, n: int, m: int) -> float:
    """Multivariate potential scale reduction factor.

    sqrt((N-1)/N + ((M+1)/(MN)) lam_max) with lam_max the largest generalized
    eigenvalue of B v = lam W v. A singular W receives one shot of logged
    jitter (1e-12 tr(W)/k) before failing.
    """
    w = np.asarray(w, dtype=float)
    b = np.asarray(b, dtype=float)
    k = w.shape[0]
    try:
        lam = scipy.linalg.eigh(b, w, eigvals_only=True)
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
        jitter = 1e-12 * np.trace(w) / k
        logger.warning("W singular in MPSRF; adding jitter %.3e", jitter)
        try:
            lam = scipy.linalg.eigh(b, w + jitter * np.eye(k), eigvals_only=True)
        except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as exc:
            raise np.linalg.LinAlgError(
                "within-chain covariance is singular even after jitter") from exc
    lam_max = float(lam[-1])
    return float(np.sqrt((n - 1) / n + (m + 1) / (m * n) * lam_max))


def variogram(coords: np.ndarray, coordinate: int, lag: int) -> float:
    """Multi-chain lag-t squared-increment average v_it."""
    coords = np.asarray(coords, dtype=float)
    m_chains, n = coords.shape[0], coords.shape[1]
    if not 0 <= lag < n:
        raise ValueError("lag must satisfy 0 <= t < N")
    if lag == 0:
        return 0.0
    x = coords[:, :, coordinate]
    diff = x[:, lag:] - x[:, :-lag]
    return float(np.sum(diff * diff) / (m_chains * (n - lag)))


def acf_estimate(coords: np.ndarray, coordinate: int, lag: int,
                 vhat_ii: float | None = None) -> float:
    """Variogram-based autocorrelation estimate 1 - v_it / (2 Vhat_ii)."""
    coords = np.asarray(coords, dtype=float)
    if vhat_ii is None:
        w, b = within_between_cov(coords)
        vh = vhat(w, b, coords.shape[1], coords.shape[0])
        vhat_ii = float(vh[coordinate, coordinate])
    if vhat_ii == 0.0:
        raise ZeroDivisionError(
            "pooled variance is zero (constant chains); autocorrelation undefined")
    return 1.0 - variogram(coords, coordinate, lag) / (2.0 * vhat_ii)


def ess(coords: np.ndarray, coordinate: int,
        vhat_ii: float | None = None) -> float:
    """Effective sample size MN / (1 + 2 sum_{t=1}^{t'} rho_t).

    The truncation lag t' is the first index T at which the successive pair
    rho_{2T} + rho_{2T+1} turns negative; the result is clamped to (0, MN].
    """
    coords = np.asarray(coords, dtype=float)
    m_chains, n = coords.shape[0], coords.shape[1]
    if n < 4:
        raise ValueError("effective sample size needs at least 4 samples")
    total = m_chains * n
    if vhat_ii is None:
        w, b = within_between_cov(coords)
        vh = vhat(w, b, n, m_chains)
        vhat_ii = float(vh[coordinate, coordinate])
    if vhat_ii == 0.0:
        raise ZeroDivisionError(
            "pooled variance is zero (constant chains); ESS undefined")

    x = coords[:, :, coordinate]
    rho = {0: 1.0}

    def rho_at(t: int) -> float:
        if t not in rho:
            diff = x[:, t:] - x[:, :-t]
            v = np.sum(diff * diff) / (m_chains * (n - t))
            rho[t] = 1.0 - v / (2.0 * vhat_ii)
        return rho[t]

    t_trunc = 0
    for t_pair in range(0, (n - 1) // 2):
        if rho_at(2 * t_pair) + rho_at(2 * t_pair + 1) < 0.0:
            t_trunc = t_pair
            break
        t_trunc = t_pair
    acf_sum = sum(rho_at(t) for t in range(1, t_trunc + 1))

    denom = 1.0 + 2.0 * acf_sum
    if denom <= 0.0:
        return float(total)
    return float(min(total / denom, total))


@dataclass
class DiagnosticsReport:
    """Summary of a multi-chain run: convergence, efficiency, QoI moments."""

    mpsrf: float
    ess_values: np.ndarray
    ess_min: float
    ess_min_index: int
    ess_max: float
    ess_max_index: int
    ess_avg: float
    acceptance_rates: np.ndarray
    total_solves: int
    nps_per_es: float
    qoi_moments: np.ndarray | None = None       # (M, 3)
    qoi_missing: np.ndarray | None = None       # per-chain missing counts
    extra: dict = field(default_factory=dict)


def qoi_moments(qoi: np.ndarray, orders=(1, 2, 3)):
    """Per-chain moment estimates of the QoI, skipping NaN entries.

    Returns (moments (M, len(orders)), missing counts (M,)). A chain with no
    valid entries is flagged with NaN moments and a warning.
    """
    qoi = np.atleast_2d(np.asarray(qoi, dtype=float))
    m_chains = qoi.shape[0]
    missing = np.sum(np.isnan(qoi), axis=1)
    out = np.full((m_chains, len(orders)), np.nan)
    for j in range(m_chains):
        valid = qoi[j][~np.isnan(qoi[j])]
        if valid.size == 0:
            logger.warning("chain %d has no valid QoI samples", j)
            continue
        for c, k in enumerate(orders):
            out[j, c] = float(np.mean(valid**k))
    return out, missing


def summarize(ensemble: ChainEnsemble) -> DiagnosticsReport:
    """Full diagnostics over an ensemble of recorded chains."""
    coords = ensemble.coords
    m_chains, n, k = coords.shape
    w, b = within_between_cov(coords)
    vh = vhat(w, b, n, m_chains)
    scale = mpsrf(w, b, n, m_chains)
    ess_vals = np.array([ess(coords, i, vhat_ii=float(vh[i, i]))
                         for i in range(k)])
    imin = int(np.argmin(ess_vals))
    imax = int(np.argmax(ess_vals))

    if ensemble.stage_attempts is not None:
        att = np.maximum(ensemble.stage_attempts.sum(axis=0), 1)
        rates = ensemble.stage_accepts.sum(axis=0) / att
    else:
        rates = np.array([])
    total_solves = int(ensemble.solves.sum()) if ensemble.solves is not None else 0
    avg = float(ess_vals.mean())
    nps = total_solves / avg if avg > 0 else float("inf")

    moments = missing = None
    if ensemble.qoi is not None:
        moments, missing = qoi_moments(ensemble.qoi)

    return DiagnosticsReport(
        mpsrf=scale, ess_values=ess_vals,
        ess_min=float(ess_vals[imin]), ess_min_index=imin,
        ess_max=float(ess_vals[imax]), ess_max_index=imax,
        ess_avg=avg, acceptance_rates=rates,
        total_solves=total_solves, nps_per_es=nps,
        qoi_moments=moments, qoi_missing=missing)
