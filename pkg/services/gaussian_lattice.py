"""
Gaussian Squared-Observation Lattice
------------------------------------
Gaussian Markov random field prior on an M x M periodic lattice,

    p(x) proportional to exp(-1/2 (lambda1 sum_edges (x_k - x_l)^2 + lambda2 sum_k x_k^2)),

observed through y_k ~ N(x_k^2, obs_sd^2). The squared observation makes
each site's posterior bimodal in sign, which is what single-site samplers
struggle with.
"""

from functools import cached_property

import numpy as np
from scipy import integrate, linalg, optimize
from scipy.stats import norm

from config.settings import DEFAULT_RW_STEP_SD, GSM_GRID_POINTS
from services.annealing import MarkovKernelSpec
from services.errors import DimensionMismatch, NonPositiveVariance, QuadratureNonFinite
from services.lattice import LatticeModel, periodic_edges
from utils.logger import dcsmc_logger

# Quadrature window half-width on the squared scale, beyond the observation
WINDOW_MARGIN = 6.0


class SiteInitializer:
    """
    Leaf initializer mu_k(x) proportional to N(y_k | x^2, obs_sd^2) exp(-lambda2 x^2 / 2).

    The normalizing constant comes from adaptive quadrature over a window
    [-R, R] with R^2 = max(y_k, 0) + 6. Samples are drawn from a
    piecewise-uniform approximation on a dense grid; log_density reports
    the density of that sampler so importance weights stay exact, while
    target_log_density is the quadrature-normalized mu_k itself.
    """

    dim = 1

    def __init__(self, y, lambda2, obs_sd, grid_points=GSM_GRID_POINTS):
        if obs_sd <= 0:
            raise NonPositiveVariance(obs_sd)
        self.y = float(y)
        self.lambda2 = float(lambda2)
        self.obs_sd = float(obs_sd)
        self.radius = float(np.sqrt(max(self.y, 0.0) + WINDOW_MARGIN))
        self.grid = np.linspace(-self.radius, self.radius, grid_points + 1)
        self.cell = self.grid[1] - self.grid[0]

        log_f = self.log_unnormalized(self.grid)
        self.peak = float(log_f.max())
        self.log_z = self._log_normalizer()

        values = np.exp(log_f - self.peak)
        mass = 0.5 * (values[:-1] + values[1:])
        total = mass.sum()
        if not np.isfinite(total) or total <= 0:
            raise QuadratureNonFinite(f"grid mass vanished for y={self.y}")
        self.cell_probs = mass / total
        self.cdf = np.cumsum(self.cell_probs)
        self.cdf[-1] = 1.0
        with np.errstate(divide="ignore"):
            self.cell_log_density = np.log(self.cell_probs) - np.log(self.cell)

    def log_unnormalized(self, x):
        x = np.asarray(x, dtype=np.float64)
        return norm.logpdf(self.y, loc=x * x, scale=self.obs_sd) - 0.5 * self.lambda2 * x * x

    def _log_normalizer(self):
        points = [-np.sqrt(self.y), np.sqrt(self.y)] if self.y > 0 else [0.0]
        value, _ = integrate.quad(
            lambda x: np.exp(self.log_unnormalized(x) - self.peak),
            -self.radius, self.radius,
            points=points, epsabs=0.0, epsrel=1e-10, limit=500,
        )
        if not np.isfinite(value) or value <= 0:
            raise QuadratureNonFinite(f"normalizer for y={self.y} is {value}")
        return float(np.log(value) + self.peak)

    def target_log_density(self, x):
        return self.log_unnormalized(x) - self.log_z

    def sampler_log_density(self, x):
        x = np.asarray(x, dtype=np.float64)
        cells = np.floor((x - self.grid[0]) / self.cell).astype(np.int64)
        inside = (cells >= 0) & (cells < self.cell_probs.shape[0])
        out = np.full(x.shape, -np.inf)
        out[inside] = self.cell_log_density[cells[inside]]
        return out

    def sample(self, parent_states, gen):
        n = parent_states.shape[0]
        cells = np.searchsorted(self.cdf, gen.random(n), side="right")
        x = self.grid[cells] + gen.random(n) * self.cell
        return x.reshape(n, 1), self.cell_log_density[cells]

    def log_density(self, parent_states, incremental):
        return self.sampler_log_density(np.asarray(incremental).reshape(-1))

    def modes(self):
        """Local maxima of mu_k, refined from the grid by bounded scalar search."""
        log_f = self.log_unnormalized(self.grid)
        interior = np.nonzero((log_f[1:-1] >= log_f[:-2]) & (log_f[1:-1] >= log_f[2:]))[0] + 1
        found = []
        for i in interior:
            result = optimize.minimize_scalar(
                lambda x: -self.log_unnormalized(x),
                bounds=(self.grid[i - 1], self.grid[i + 1]),
                method="bounded",
                options={"xatol": 1e-10},
            )
            found.append(float(result.x))
        return sorted(found)


class GaussianSquaredLattice(LatticeModel):
    tag = "gsm"
    state_dtype = np.float64

    def __init__(self, M, lambda1, lambda2, obs_sd, y, step_sd=DEFAULT_RW_STEP_SD):
        super().__init__(M)
        for value in (lambda1, lambda2, obs_sd):
            if value <= 0:
                raise NonPositiveVariance(value)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.shape[0] != self.n_sites:
            raise DimensionMismatch(self.n_sites, y.shape[0])
        self.lambda1 = float(lambda1)
        self.lambda2 = float(lambda2)
        self.obs_sd = float(obs_sd)
        self.y = y
        self.step_sd = float(step_sd)

    def unary(self, values, sites):
        values = np.asarray(values, dtype=np.float64)
        y = self.y[sites]
        return norm.logpdf(y, loc=values * values, scale=self.obs_sd) - 0.5 * self.lambda2 * values * values

    def pair(self, a, b):
        diff = np.asarray(a, dtype=np.float64) - b
        return -0.5 * self.lambda1 * diff * diff

    def pair_table(self, A, B):
        cross = A @ B.T
        sq_a = (A * A).sum(axis=1)[:, None]
        sq_b = (B * B).sum(axis=1)[None, :]
        return -0.5 * self.lambda1 * (sq_a + sq_b - 2.0 * cross)

    @cached_property
    def initializers(self):
        dcsmc_logger.debug(f"Building {self.n_sites} GSM site initializers")
        return [SiteInitializer(self.y[k], self.lambda2, self.obs_sd) for k in range(self.n_sites)]

    def leaf_proposal(self, site):
        return gsm_site_init(self, site)

    def default_kernel_spec(self):
        return MarkovKernelSpec(kind="random-walk", step_sd=self.step_sd)

    def energy(self, config):
        return gsm_energy(self, config)

    def describe(self):
        return {"kind": self.tag, "M": self.M, "lambda1": self.lambda1,
                "lambda2": self.lambda2, "obs_sd": self.obs_sd}


def gsm_site_init(model, site):
    """Sampler and log density for site k's initializer mu_k."""
    return model.initializers[site]


def gsm_energy(model, config):
    """Prior energy 1/2 (lambda1 sum_edges (x_k - x_l)^2 + lambda2 sum_k x_k^2)."""
    single = np.ndim(config) == 1
    config = model.check_config(config).astype(np.float64)
    diff = config[:, model.edges[:, 0]] - config[:, model.edges[:, 1]] if model.edges.size else np.zeros((config.shape[0], 0))
    energy = 0.5 * (model.lambda1 * (diff * diff).sum(axis=1) + model.lambda2 * (config * config).sum(axis=1))
    return float(energy[0]) if single else energy


def prior_precision(M, lambda1, lambda2):
    """Precision matrix lambda1 * L + lambda2 * I of the periodic GMRF prior."""
    n = M * M
    precision = lambda2 * np.eye(n)
    for k, l in periodic_edges(M):
        precision[k, k] += lambda1
        precision[l, l] += lambda1
        precision[k, l] -= lambda1
        precision[l, k] -= lambda1
    return precision


def simulate_gsm_observations(M, lambda1, lambda2, obs_sd, seed):
    """
    Draw a latent field from the prior and observe its square with noise.

    Returns:
        (latent x, observations y), both of length M^2
    """
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    upper = linalg.cholesky(prior_precision(M, lambda1, lambda2), lower=False)
    # x = U^{-1} z has covariance (U^T U)^{-1}
    x = linalg.solve_triangular(upper, gen.standard_normal(M * M), lower=False)
    y = x * x + obs_sd * gen.standard_normal(M * M)
    return x, y
