"""Gaussian field prior built from a Robin-damped anisotropic elliptic operator.

The covariance is the squared inverse of A = gamma*K_Theta + delta*M + beta*M_b,
discretized with P1 elements. Mass lumping makes the covariance square root
A^{-1} M_l^{1/2} diagonal-friendly, and the precision A M_l^{-1} A is defined
with the same lumped mass so that precision and covariance actions are exact
mutual inverses.
"""

from __future__ import annotations

import math

import numpy as np

from .fem import (BOUNDARY_TAGS, Mesh, SpdSolver, assemble_boundary_mass,
                  assemble_mass, assemble_stiffness)


def anisotropy_tensor(theta1: float, theta2: float, alpha: float) -> np.ndarray:
    """SPD 2x2 diffusion tensor with principal values theta1, theta2.

    The principal axis of theta1 points along (sin(alpha), cos(alpha)); the
    eigenvalues are exactly theta1 and theta2, so the tensor is SPD whenever
    both are positive, and reduces to theta1 * I when they coincide.
    """
    sa, ca = math.sin(alpha), math.cos(alpha)
    u = np.array([sa, ca])
    v = np.array([ca, -sa])
    return theta1 * np.outer(u, u) + theta2 * np.outer(v, v)


def default_robin_coefficient(gamma: float, delta: float) -> float:
    return math.sqrt(gamma * delta) / 1.42


class BiLaplacianPrior:
    """Gaussian measure N(mean, C) with C = A^{-1} M_l A^{-1}.

    Immutable after construction; A is factorized once and shared read-only.
    """

    def __init__(self, mesh: Mesh, gamma: float, delta: float,
                 robin_beta: float | None = None,
                 theta1: float = 1.0, theta2: float = 1.0, alpha: float = 0.0,
                 mean: np.ndarray | float = 0.0):
        for name, value in (("gamma", gamma), ("delta", delta),
                            ("theta1", theta1), ("theta2", theta2)):
            if value <= 0:
                raise ValueError(f"prior parameter {name} must be positive, got {value}")
        if robin_beta is None:
            robin_beta = default_robin_coefficient(gamma, delta)
        if robin_beta < 0:
            raise ValueError("robin coefficient must be nonnegative")

        self.mesh = mesh
        self.gamma = gamma
        self.delta = delta
        self.robin_beta = robin_beta
        self.theta = anisotropy_tensor(theta1, theta2, alpha)

        self.M = assemble_mass(mesh)
        ml = assemble_mass(mesh, lumped=True).diagonal()
        self._ml = ml
        self._ml_sqrt = np.sqrt(ml)
        self._ml_inv = 1.0 / ml

        self.A = (gamma * assemble_stiffness(mesh, self.theta)
                  + delta * self.M).tocsr()
        if robin_beta > 0:
            self.A = (self.A + robin_beta
                      * assemble_boundary_mass(mesh, BOUNDARY_TAGS)).tocsr()
        self._solver = SpdSolver(self.A)

        mean = np.asarray(mean, dtype=float)
        if mean.ndim == 0:
            mean = np.full(mesh.num_vertices, float(mean))
        if mean.shape != (mesh.num_vertices,):
            raise ValueError("prior mean has wrong length")
        self.mean = mean

    @property
    def dim(self) -> int:
        return self.mesh.num_vertices

    # -- quadratic form -------------------------------------------------

    def cost(self, m: np.ndarray) -> float:
        d = m - self.mean
        return 0.5 * float(d @ self.apply_precision(d))

    def grad(self, m: np.ndarray) -> np.ndarray:
        return self.apply_precision(m - self.mean)

    # -- operator actions ------------------------------------------------

    def apply_covariance(self, v: np.ndarray) -> np.ndarray:
        """C v = A^{-1} M_l A^{-1} v."""
        return self._solver.solve(self._ml * self._solver.solve(v))

    def apply_precision(self, v: np.ndarray) -> np.ndarray:
        """C^{-1} v = A M_l^{-1} A v."""
        return self.A @ (self._ml_inv * (self.A @ v))

    def apply_cov_factor(self, z: np.ndarray) -> np.ndarray:
        """Square root factor S z = A^{-1} M_l^{1/2} z with S S^T = C."""
        return self._solver.solve(self._ml_sqrt * z)

    def apply_cov_factor_inv(self, v: np.ndarray) -> np.ndarray:
        return self._ml_inv * self._ml_sqrt * (self.A @ v)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Draw mean + S z with z iid standard normal; deterministic per rng state."""
        z = rng.standard_normal(self.dim)
        return self.mean + self.apply_cov_factor(z)
