"""Shared oracle implementations for the test suite.

Deliberately independent of the library code paths: plain loops over
elements instead of vectorized scatter, numpy.linalg instead of sparse
factorizations, and direct transcriptions of the diagnostic formulas.
"""

import numpy as np


# ---------------------------------------------------------------------------
# Dense finite element assembly (loop-based reference)
# ---------------------------------------------------------------------------

def dense_stiffness(mesh, coeff=None, tensor=None):
    """Triangle-by-triangle P1 stiffness assembly with explicit local solves."""
    n = mesh.num_vertices
    out = np.zeros((n, n))
    for t, tri in enumerate(mesh.triangles):
        pts = mesh.vertices[tri]
        mat = np.column_stack([np.ones(3), pts])        # [1 x y]
        area = 0.5 * abs(np.linalg.det(mat))
        grads = np.linalg.inv(mat)[1:, :].T             # rows: grad of each phi
        c = 1.0 if coeff is None else coeff[t]
        th = np.eye(2) if tensor is None else tensor
        for a in range(3):
            for b in range(3):
                out[tri[a], tri[b]] += area * c * grads[a] @ th @ grads[b]
    return out


def dense_mass(mesh, lumped=False):
    n = mesh.num_vertices
    out = np.zeros((n, n))
    local = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 12.0
    for tri in mesh.triangles:
        pts = mesh.vertices[tri]
        mat = np.column_stack([np.ones(3), pts])
        area = 0.5 * abs(np.linalg.det(mat))
        for a in range(3):
            for b in range(3):
                out[tri[a], tri[b]] += area * local[a, b]
    if lumped:
        return np.diag(out.sum(axis=1))
    return out


def dense_boundary_mass(mesh, tags):
    n = mesh.num_vertices
    out = np.zeros((n, n))
    local = np.array([[2, 1], [1, 2]]) / 6.0
    for tag in tags:
        for v0, v1 in mesh.boundary_edges[tag]:
            h = np.linalg.norm(mesh.vertices[v1] - mesh.vertices[v0])
            for a, va in enumerate((v0, v1)):
                for b, vb in enumerate((v0, v1)):
                    out[va, vb] += h * local[a, b]
    return out


def dense_prior_matrices(prior):
    """Dense (A, R, C) of a field prior, via numpy inverses."""
    a = prior.A.toarray()
    ml_inv = np.diag(1.0 / prior._ml)
    r = a @ ml_inv @ a
    return a, r, np.linalg.inv(r)


# ---------------------------------------------------------------------------
# Dense Poisson solves (reference forward/adjoint)
# ---------------------------------------------------------------------------

def dense_poisson_solve(mesh, m, dirichlet_values, dirichlet_idx):
    """Forward solve with dense elimination; coefficient exp(m) at centroids."""
    coeff = np.exp(m[mesh.triangles].mean(axis=1))
    k = dense_stiffness(mesh, coeff=coeff)
    n = mesh.num_vertices
    free = np.setdiff1d(np.arange(n), dirichlet_idx)
    u = np.array(dirichlet_values, dtype=float)
    rhs = -k[np.ix_(free, dirichlet_idx)] @ u[dirichlet_idx]
    u[free] = np.linalg.solve(k[np.ix_(free, free)], rhs)
    return u


# ---------------------------------------------------------------------------
# Dense linear-Gaussian model (shares the model protocol)
# ---------------------------------------------------------------------------

class DenseLinearModel:
    """Misfit 0.5 |F m - d|^2 / sigma^2 with explicit matrices."""

    class State:
        def __init__(self, model, m):
            self.model = model
            self.m = np.asarray(m, dtype=float)
            self.residual = model.F @ self.m - model.d
            self.cost = 0.5 * float(self.residual @ self.residual) / model.sigma**2

        def gradient(self):
            return self.model.F.T @ self.residual / self.model.sigma**2

        def hessian_action(self, v, gauss_newton=False):
            return self.model.F.T @ (self.model.F @ v) / self.model.sigma**2

        def qoi(self):
            return float(self.m[0])

    def __init__(self, F, d, sigma):
        self.F = np.asarray(F, dtype=float)
        self.d = np.asarray(d, dtype=float)
        self.sigma = float(sigma)
        self.dim = self.F.shape[1]

    def evaluate(self, m):
        return self.State(self, m)


def dense_gaussian_posterior(F, d, sigma, prior_mean, prior_cov):
    """Exact posterior (mean, cov) of the linear-Gaussian model."""
    prec = F.T @ F / sigma**2 + np.linalg.inv(prior_cov)
    cov = np.linalg.inv(prec)
    mean = cov @ (F.T @ d / sigma**2 + np.linalg.solve(prior_cov, prior_mean))
    return mean, cov


# ---------------------------------------------------------------------------
# Discrete proposals for exact enumeration of kernels
# ---------------------------------------------------------------------------

class TableProposal:
    """Proposal over a finite state set with an explicit probability table."""

    requires_gradient = False

    def __init__(self, states, table):
        self.states = [float(s) for s in states]
        self.table = np.asarray(table, dtype=float)
        assert np.allclose(self.table.sum(axis=1), 1.0)

    def _index(self, m):
        value = float(np.atleast_1d(m)[0])
        return self.states.index(value)

    def sample(self, state, rng):
        i = self._index(state.m)
        j = rng.choice(len(self.states), p=self.table[i])
        return np.array([self.states[j]])

    def log_density(self, from_state, to):
        i = self._index(from_state.m)
        j = self._index(to)
        p = self.table[i, j]
        return float(np.log(p)) if p > 0 else -np.inf


# ---------------------------------------------------------------------------
# Reference diagnostics (verbatim loop transcriptions)
# ---------------------------------------------------------------------------

def ref_within_between(coords):
    m, n, k = coords.shape
    means = np.zeros((m, k))
    for j in range(m):
        for i in range(n):
            means[j] += coords[j, i]
        means[j] /= n
    w = np.zeros((k, k))
    for j in range(m):
        for i in range(n):
            dev = coords[j, i] - means[j]
            w += np.outer(dev, dev)
    w /= m * (n - 1)
    grand = means.mean(axis=0)
    b = np.zeros((k, k))
    for j in range(m):
        dev = means[j] - grand
        b += np.outer(dev, dev)
    b *= n / (m - 1)
    return w, b


def ref_vhat(w, b, n, m):
    return (n - 1) / n * w + (m + 1) / (m * n) * b


def ref_mpsrf(w, b, n, m):
    lam = np.linalg.eigvals(np.linalg.inv(w) @ b)
    lam_max = float(np.max(lam.real))
    return np.sqrt((n - 1) / n + (m + 1) / (m * n) * lam_max)


def ref_variogram(coords, i, t):
    m, n, _ = coords.shape
    acc = 0.0
    for j in range(m):
        for k in range(t, n):
            acc += (coords[j, k, i] - coords[j, k - t, i]) ** 2
    return acc / (m * (n - t))


def ref_acf(coords, i, t, vii):
    return 1.0 - ref_variogram(coords, i, t) / (2.0 * vii)


def ref_ess(coords, i):
    m, n, _ = coords.shape
    w, b = ref_within_between(coords)
    vii = ref_vhat(w, b, n, m)[i, i]
    rho = [1.0]
    for t in range(1, n):
        rho.append(ref_acf(coords, i, t, vii))
    t_trunc = 0
    for tp in range((n - 1) // 2):
        t_trunc = tp
        if rho[2 * tp] + rho[2 * tp + 1] < 0:
            break
    total = m * n
    denom = 1.0 + 2.0 * sum(rho[1:t_trunc + 1])
    if denom <= 0:
        return float(total)
    return float(min(total / denom, total))


def ar1_chains(m, n, phi, rng, sd=1.0):
    """Stationary AR(1) chains with lag-1 coefficient phi."""
    out = np.empty((m, n))
    innov_sd = sd * np.sqrt(1 - phi**2)
    for j in range(m):
        out[j, 0] = sd * rng.standard_normal()
        for i in range(1, n):
            out[j, i] = phi * out[j, i - 1] + innov_sd * rng.standard_normal()
    return out
