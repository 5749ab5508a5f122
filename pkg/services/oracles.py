"""
Exact Oracles
-------------
Normalizing constants and expectations of small models, by enumeration or
adaptive quadrature. Used to check the samplers' estimates.
"""

import itertools

import numpy as np
from scipy import integrate
from scipy.special import logsumexp
from scipy.stats import norm

from services.errors import TooLarge
from services.gaussian_lattice import GaussianSquaredLattice
from services.hierarchical_model import HierarchicalBinomial, binomial_log_lik
from services.ising_model import IsingLattice

MAX_ENUMERATED_SIDE = 4


def enumerate_spins(n_sites):
    """All 2^n spin configurations as an int8 array, one per row."""
    codes = np.arange(2 ** n_sites, dtype=np.int64)[:, None]
    bits = (codes >> np.arange(n_sites)[None, :]) & 1
    return (2 * bits - 1).astype(np.int8)


def _ising_log_weights(model):
    if model.M > MAX_ENUMERATED_SIDE:
        raise TooLarge(f"enumeration needs M <= {MAX_ENUMERATED_SIDE}, got {model.M}")
    configs = enumerate_spins(model.n_sites)
    return configs, model.log_gamma(configs)


def brute_force_expectation(model, fn):
    """E[fn(x)] under an enumerable Ising model; fn maps (K, M^2) configs to (K,)."""
    configs, log_w = _ising_log_weights(model)
    weights = np.exp(log_w - logsumexp(log_w))
    return float(np.dot(weights, fn(configs)))


def _log_quad(fn, lo, hi, shift=0.0, **kwargs):
    value, _ = integrate.quad(lambda x: np.exp(fn(x) - shift), lo, hi,
                              epsabs=0.0, epsrel=1e-10, limit=500, **kwargs)
    return float(np.log(value) + shift)


def _hier_log_z(model):
    root = model.root
    if root.is_leaf:
        return _log_quad(lambda t: binomial_log_lik(t, root.successes, root.trials), -40.0, 40.0)
    if not all(c.is_leaf for c in root.children) or len(root.children) > 2:
        raise TooLarge("quadrature supports a root with at most two leaf children")

    leaves = root.children
    if len(leaves) == 1:
        # The flat root prior absorbs the single edge, sigma2 integrates to 1
        leaf = leaves[0]
        return _log_quad(lambda t: binomial_log_lik(t, leaf.successes, leaf.trials), -40.0, 40.0)

    first, second = leaves
    # Integrating the flat root theta leaves N(theta_1; theta_2, 2 sigma2)
    def over_thetas(sigma2):
        def integrand(t1, t2):
            return np.exp(
                binomial_log_lik(t1, first.successes, first.trials)
                + binomial_log_lik(t2, second.successes, second.trials)
                + norm.logpdf(t1, loc=t2, scale=np.sqrt(2.0 * sigma2))
            )
        value, _ = integrate.dblquad(integrand, -25.0, 25.0, -25.0, 25.0, epsabs=1e-13, epsrel=1e-9)
        return value * np.exp(-sigma2)

    value, _ = integrate.quad(over_thetas, 0.0, np.inf, epsabs=1e-13, epsrel=1e-8, limit=200)
    return float(np.log(value))


def brute_force_log_z(model):
    """
    log Z of a small model.

    Ising models up to 4 x 4 are enumerated exactly; a single-site GSM
    lattice and hierarchical trees with at most three continuous
    dimensions use adaptive quadrature (about 1e-6 relative accuracy).

    Raises:
        TooLarge: the model is outside those limits
    """
    if isinstance(model, IsingLattice):
        _, log_w = _ising_log_weights(model)
        return float(logsumexp(log_w))
    if isinstance(model, GaussianSquaredLattice):
        if model.n_sites != 1:
            raise TooLarge("GSM quadrature supports a single site")
        init = model.initializers[0]
        return _log_quad(lambda x: init.log_unnormalized(x), -init.radius, init.radius,
                         shift=init.peak, points=[-np.sqrt(max(init.y, 0.0)), np.sqrt(max(init.y, 0.0))])
    if isinstance(model, HierarchicalBinomial):
        return _hier_log_z(model)
    raise TooLarge(f"no oracle for {type(model).__name__}")


def transfer_matrix_log_z(M, beta):
    """
    log Z of the periodic Ising model by row-to-row transfer matrices.

    Independent of the edge-list enumeration; rows wrap horizontally and
    the trace closes the vertical periodicity.
    """
    rows = list(itertools.product((-1, 1), repeat=M))
    rows = np.asarray(rows, dtype=np.float64)
    within = np.array([sum(r[c] * r[(c + 1) % M] for c in range(M)) if M > 1 else 0.0 for r in rows])
    between = rows @ rows.T if M > 1 else np.zeros((2, 2))
    transfer = np.exp(beta * (within[:, None] + between))
    return float(np.log(np.trace(np.linalg.matrix_power(transfer, M))))
