"""
Ising Model
-----------
Periodic square-lattice Ising model with p(x) proportional to
exp(-beta * E(x)), E(x) = -sum over edges of x_k * x_l, spins in {-1, +1}.
"""

import numpy as np

from services.annealing import MarkovKernelSpec
from services.errors import ConfigError
from services.lattice import LatticeModel

LOG_HALF = -np.log(2.0)


class UniformSpinProposal:
    """Leaf initializer: each spin uniform on {-1, +1}."""

    dim = 1

    def sample(self, parent_states, gen):
        n = parent_states.shape[0]
        spins = (2 * gen.integers(0, 2, size=n) - 1).astype(np.int8)
        return spins.reshape(n, 1), np.full(n, LOG_HALF)

    def log_density(self, parent_states, incremental):
        values = np.asarray(incremental).reshape(-1)
        return np.where(np.abs(values) == 1, LOG_HALF, -np.inf)


class IsingLattice(LatticeModel):
    tag = "ising"
    state_dtype = np.int8

    def __init__(self, M, beta, any_side=False):
        super().__init__(M, any_side=any_side)
        if beta < 0:
            raise ConfigError(f"beta must be non-negative, got {beta}")
        self.beta = float(beta)

    def pair(self, a, b):
        return self.beta * (np.asarray(a, dtype=np.float64) * b)

    def pair_table(self, A, B):
        # One BLAS call instead of one outer product per edge
        return self.beta * (A.astype(np.float64) @ B.astype(np.float64).T)

    def leaf_proposal(self, site):
        return UniformSpinProposal()

    def default_kernel_spec(self):
        return single_flip_kernel(self)

    def energy(self, config):
        return ising_energy(self, config)

    def describe(self):
        return {"kind": self.tag, "M": self.M, "beta": self.beta}


def ising_energy(lattice, config):
    """
    Energy -sum_{(k,l)} x_k x_l over the periodic edges, each counted once.

    Accepts one configuration of length M^2 or an (N, M^2) batch.

    Raises:
        DimensionMismatch: configuration length is not M^2
    """
    single = np.ndim(config) == 1
    config = lattice.check_config(config).astype(np.float64)
    if not lattice.edges.size:
        energy = np.zeros(config.shape[0])
    else:
        energy = -(config[:, lattice.edges[:, 0]] * config[:, lattice.edges[:, 1]]).sum(axis=1)
    return float(energy[0]) if single else energy


def magnetization(config):
    return np.asarray(config, dtype=np.float64).mean(axis=-1)


def single_flip_kernel(lattice):
    """Kernel spec for site-sequential single-flip Metropolis-Hastings sweeps."""
    return MarkovKernelSpec(kind="single-flip")
