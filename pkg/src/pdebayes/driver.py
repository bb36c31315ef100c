"""Experiment orchestration: data, MAP, low-rank posterior, chains, reports.

run_experiment executes the full pipeline for one configuration and writes
all artifacts into the output directory: the truth field and data, the MAP
field, the curvature spectrum, one CSV per chain, plot-ready ACF and
histogram tables for the quantity of interest, and a key-value diagnostics
report. Every byte of output is determined by (config, seeds).
"""

from __future__ import annotations

import logging
import os

import numpy as np

from . import mcmc
from .config import ExperimentConfig, serialize
from .diagnostics import ChainEnsemble, acf_estimate, summarize, vhat, within_between_cov
from .fem import build_unit_square_mesh, point_observation_operator
from .laplace import LaplaceApprox, NewtonConfig, compute_map, doublepass_randomized_eig
from .models import (LinearizedPoissonProblem, PoissonProblem,
                     generate_synthetic_data)
from .prior import BiLaplacianPrior
from .targets import PosteriorTarget

logger = logging.getLogger(__name__)

FLOAT_FMT = "%.17g"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _fmt(x) -> str:
    return FLOAT_FMT % float(x)


def build_prior_for(cfg: ExperimentConfig, mesh) -> BiLaplacianPrior:
    return BiLaplacianPrior(
        mesh, cfg.prior_gamma, cfg.prior_delta,
        robin_beta=cfg.prior_robin_beta,
        theta1=cfg.prior_theta1, theta2=cfg.prior_theta2,
        alpha=cfg.prior_alpha, mean=cfg.prior_mean)


def _make_problem(kind: str, mesh, points, sigma):
    if kind == "linearized":
        return LinearizedPoissonProblem(mesh, points, sigma)
    return PoissonProblem(mesh, points, sigma)


def draw_observation_points(cfg: ExperimentConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.data_seed)
    return rng.uniform(cfg.data_box_lo, cfg.data_box_hi, size=(cfg.data_count, 2))


def synthesize_data(cfg: ExperimentConfig, points: np.ndarray):
    """Truth field and observations, on the configured truth mesh.

    The truth field is a prior sample on the truth mesh; observations come
    from a once-refined solve so the inversion never sees its own
    discretization. Returns (truth mesh size, m_true, data vector).
    """
    n_truth = cfg.data_truth_mesh or cfg.mesh_n
    mesh_t = build_unit_square_mesh(n_truth)
    prior_t = build_prior_for(cfg, mesh_t)
    m_true = prior_t.sample(np.random.default_rng(cfg.data_seed + 1))
    if cfg.model_kind == "linearized":
        fine = build_unit_square_mesh(2 * n_truth)
        lift = point_observation_operator(mesh_t, fine.vertices)
        fine_problem = LinearizedPoissonProblem(fine, points, cfg.data_sigma)
        d = fine_problem.observe(fine_problem.solve_forward(lift @ m_true))
        if not cfg.data_exact:
            noise_rng = np.random.default_rng(cfg.data_seed + 2)
            d = d + cfg.data_sigma * noise_rng.standard_normal(d.shape)
    else:
        problem_t = PoissonProblem(mesh_t, points, cfg.data_sigma)
        d = generate_synthetic_data(problem_t, m_true, cfg.data_sigma,
                                    seed=cfg.data_seed + 2, exact=cfg.data_exact)
    return n_truth, m_true, d


def build_kernel(cfg: ExperimentConfig, prior, laplace):
    method = cfg.mcmc_method
    if method == "rw":
        return mcmc.MHKernel(mcmc.random_walk(prior, cfg.mcmc_step))
    if method == "pcn":
        return mcmc.MHKernel(mcmc.pcn(prior, cfg.mcmc_beta))
    if method == "mala":
        return mcmc.MHKernel(mcmc.mala(prior, cfg.mcmc_tau))
    if method == "inf-mala":
        return mcmc.MHKernel(mcmc.inf_mala(prior, cfg.mcmc_h))
    if method == "h-pcn":
        return mcmc.MHKernel(mcmc.h_pcn(laplace, cfg.mcmc_beta))
    if method == "h-mala":
        return mcmc.MHKernel(mcmc.h_mala(laplace, cfg.mcmc_tau))
    if method == "h-inf-mala":
        return mcmc.MHKernel(mcmc.h_inf_mala(laplace, cfg.mcmc_h))
    if method == "dr":
        stage1 = mcmc.h_pcn(laplace, cfg.mcmc_dr_beta)
        if cfg.mcmc_dr_stage2 == "h-inf-mala":
            stage2 = mcmc.h_inf_mala(laplace, cfg.mcmc_h)
        else:
            stage2 = mcmc.h_mala(laplace, cfg.mcmc_tau)
        return mcmc.DRKernel([stage1, stage2])
    if method == "dili":
        spec = mcmc.SubspaceGibbsConfig(lis_step=cfg.mcmc_dili_tau,
                                        cs_beta=cfg.mcmc_dili_beta,
                                        lis_center=cfg.mcmc_dili_center)
        return mcmc.DiliKernel(laplace, spec)
    raise ValueError(f"unknown method '{method}'")


def write_chain_csv(record: mcmc.ChainRecord, path: str) -> None:
    """CSV with a seed/kernel comment header; full float precision."""
    k = record.coords.shape[1]
    cols = ["iter", "accepted", "log_posterior", "qoi"] + [
        f"c_{j + 1}" for j in range(k)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# seed={record.seed}, kernel={record.kernel_name}\n")
        fh.write(",".join(cols) + "\n")
        for i in range(record.n_steps):
            row = [str(i), str(int(record.accepted[i])),
                   _fmt(record.log_posterior[i]), _fmt(record.qoi[i])]
            row.extend(_fmt(v) for v in record.coords[i])
            fh.write(",".join(row) + "\n")


def read_chain_csv(path: str):
    """Read back a chain CSV; returns (header comment, column names, array)."""
    with open(path, "r", encoding="utf-8") as fh:
        comment = fh.readline().strip()
        names = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return comment, names, data


def write_report(entries: dict, path: str) -> None:
    """Report as `key = value` lines with stable ordering."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in entries.items():
            if isinstance(value, float):
                fh.write(f"{key} = {_fmt(value)}\n")
            else:
                fh.write(f"{key} = {value}\n")


def read_report(path: str) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                key, _, val = line.partition("=")
                out[key.strip()] = val.strip()
    return out


def _write_field(path: str, values: np.ndarray, header: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {header}\n")
        for v in values:
            fh.write(_fmt(v) + "\n")


def _write_qoi_tables(out_dir: str, ensemble: ChainEnsemble, max_lag: int = 500):
    qoi = ensemble.qoi
    finite = np.isfinite(qoi)
    acf_path = os.path.join(out_dir, "acf_qoi.txt")
    if finite.all():
        shaped = qoi[:, :, None]
        w, b = within_between_cov(shaped)
        vh = float(vhat(w, b, qoi.shape[1], qoi.shape[0])[0, 0])
        lags = range(0, min(max_lag, qoi.shape[1] - 1) + 1)
        with open(acf_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("# lag rho\n")
            for t in lags:
                if vh > 0:
                    fh.write(f"{t} {_fmt(acf_estimate(shaped, 0, t, vhat_ii=vh))}\n")
    else:
        with open(acf_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("# lag rho\n# skipped: QoI contains failed samples\n")

    hist_path = os.path.join(out_dir, "hist_qoi.txt")
    values = qoi[finite]
    with open(hist_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# bin_lo bin_hi count density\n")
        if values.size:
            counts, edges = np.histogram(values, bins=50, density=False)
            width = edges[1] - edges[0]
            total = values.size
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                fh.write(f"{_fmt(lo)} {_fmt(hi)} {c} {_fmt(c / (total * width))}\n")


def _oracle_check(problem, prior, laplace, map_m, rng) -> dict:
    """Dense Gaussian-posterior comparison for the linearized model."""
    f_mat = problem.dense_forward_matrix()
    a_dense = prior.A.toarray()
    r_dense = a_dense @ ((1.0 / prior._ml)[:, None] * a_dense)
    h_dense = f_mat.T @ f_mat / problem.sigma**2 + r_dense
    mean_dense = np.linalg.solve(
        h_dense, f_mat.T @ problem.data / problem.sigma**2 + r_dense @ prior.mean)
    map_err = float(np.linalg.norm(map_m - mean_dense)
                    / np.linalg.norm(mean_dense))
    v = rng.standard_normal(prior.dim)
    hinv_dense = np.linalg.solve(h_dense, v)
    hinv_err = float(np.linalg.norm(laplace.apply_covariance(v) - hinv_dense)
                     / np.linalg.norm(hinv_dense))
    passed = map_err <= 1e-6 and hinv_err <= 1e-6
    return {"oracle_map_rel_err": map_err, "oracle_hinv_rel_err": hinv_err,
            "oracle_pass": "true" if passed else "false"}


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None) -> dict:
    """Execute data -> MAP -> low-rank posterior -> chains -> diagnostics.

    Returns the report dictionary; writes all artifacts under out_dir.
    Failures are re-raised as StageError with the failing stage name;
    artifacts produced before the failure are left in place.
    """
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_used.txt"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(serialize(cfg))

    stage = "setup"
    try:
        mesh = build_unit_square_mesh(cfg.mesh_n)
        prior = build_prior_for(cfg, mesh)
        points = draw_observation_points(cfg)

        stage = "data"
        n_truth, m_true, data = synthesize_data(cfg, points)
        problem = _make_problem(cfg.model_kind, mesh, points, cfg.data_sigma)
        problem.set_data(data)
        _write_field(os.path.join(out_dir, "truth.txt"), m_true,
                     f"truth field, mesh n={n_truth}")
        with open(os.path.join(out_dir, "data.txt"), "w",
                  encoding="utf-8", newline="\n") as fh:
            fh.write("# x y value\n")
            for (x, y), v in zip(points, data):
                fh.write(f"{_fmt(x)} {_fmt(y)} {_fmt(v)}\n")

        stage = "map"
        newton_cfg = NewtonConfig(
            grad_rel_tol=cfg.newton_grad_rel_tol,
            grad_abs_tol=cfg.newton_grad_abs_tol,
            max_newton_iters=cfg.newton_max_iters,
            max_cg_iters=cfg.newton_max_cg_iters,
            armijo_c=cfg.newton_armijo_c,
            backtrack_factor=cfg.newton_backtrack,
            gn_phase_iters=cfg.newton_gn_iters)
        map_result = compute_map(problem, prior, cfg=newton_cfg)
        _write_field(os.path.join(out_dir, "map.txt"), map_result.m,
                     f"MAP field, mesh n={cfg.mesh_n}")

        stage = "eig"
        map_state = problem.evaluate(map_result.m)
        lam, vecs = doublepass_randomized_eig(
            lambda v: map_state.hessian_action(v, gauss_newton=False),
            prior, k=cfg.eig_k, p=cfg.eig_oversampling,
            rng=np.random.default_rng(cfg.eig_seed))
        with open(os.path.join(out_dir, "eigenvalues.txt"), "w",
                  encoding="utf-8", newline="\n") as fh:
            fh.write("# index eigenvalue\n")
            for i, lv in enumerate(lam, start=1):
                fh.write(f"{i} {_fmt(lv)}\n")
        laplace = LaplaceApprox.from_spectrum(prior, map_result.m, lam, vecs,
                                              threshold=cfg.eig_threshold)

        stage = "chains"
        setup_solves = _solves_of(problem)
        kernel = build_kernel(cfg, prior, laplace)
        target = PosteriorTarget(problem, prior)
        k_proj = min(cfg.mcmc_project_dim, vecs.shape[1])
        w_proj = np.column_stack(
            [prior.apply_precision(vecs[:, j]) for j in range(k_proj)])

        def projector(m):
            return w_proj.T @ m

        records = []
        for i in range(cfg.mcmc_chains):
            start_rng = np.random.default_rng([cfg.mcmc_seed, i])
            if cfg.mcmc_start == "laplace_sample":
                start = laplace.sample(start_rng)
            elif cfg.mcmc_start == "prior_sample":
                start = prior.sample(start_rng)
            else:
                start = map_result.m
            rec = mcmc.run_chain(target, kernel, start, cfg.mcmc_samples,
                                 seed=cfg.mcmc_seed + i, projector=projector,
                                 kernel_name=cfg.mcmc_method)
            records.append(rec)
            write_chain_csv(rec, os.path.join(out_dir, f"chain_{i:02d}.csv"))

        stage = "diagnostics"
        ensemble = ChainEnsemble.from_records(records)
        report_data = summarize(ensemble)
        _write_qoi_tables(out_dir, ensemble)

        entries = {
            "method": cfg.mcmc_method,
            "chains": cfg.mcmc_chains,
            "samples": cfg.mcmc_samples,
            "mesh_n": cfg.mesh_n,
            "parameter_dim": prior.dim,
            "map_iterations": map_result.iterations,
            "map_grad_norm": map_result.grad_norm,
            "eig_rank_retained": laplace.rank,
            "project_dim": k_proj,
            "mpsrf": report_data.mpsrf,
            "ess_min": report_data.ess_min,
            "ess_min_index": report_data.ess_min_index + 1,
            "ess_max": report_data.ess_max,
            "ess_max_index": report_data.ess_max_index + 1,
            "ess_avg": report_data.ess_avg,
            "ar": ",".join(_fmt(r) for r in report_data.acceptance_rates),
            "setup_solves": setup_solves,
            "sampling_solves": report_data.total_solves,
            "nps_per_es": report_data.nps_per_es,
        }
        if report_data.qoi_moments is not None:
            for j in range(report_data.qoi_moments.shape[0]):
                g1, g2, g3 = report_data.qoi_moments[j]
                entries[f"qoi_moments_chain_{j:02d}"] = ",".join(
                    _fmt(v) for v in (g1, g2, g3))
                entries[f"qoi_missing_chain_{j:02d}"] = int(
                    report_data.qoi_missing[j])
        if cfg.model_kind == "linearized":
            entries.update(_oracle_check(problem, prior, laplace, map_result.m,
                                         np.random.default_rng(cfg.eig_seed + 1)))
        write_report(entries, os.path.join(out_dir, "report.txt"))
        return entries
    except Exception as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(stage, exc) from exc


def _solves_of(problem) -> int:
    counter = getattr(problem, "counter", None)
    return counter.total if counter is not None else 0
