"""Small hand-built trees with known normalizing constants."""

import numpy as np

from services.dc_tree import DecompositionNode


class GaussianProposal:
    """N(0, 1) per incremental coordinate; usable at any node."""

    def __init__(self, dim=1):
        self.dim = dim

    def sample(self, parent_states, gen):
        n = parent_states.shape[0]
        extra = gen.standard_normal((n, self.dim))
        return extra, self.log_density(parent_states, extra)

    def log_density(self, parent_states, incremental):
        x = np.asarray(incremental, dtype=np.float64).reshape(-1, self.dim)
        return (-0.5 * x * x - 0.5 * np.log(2 * np.pi)).sum(axis=1)


def gaussian_chain(length, scale=0.5):
    """
    Unary chain whose node k targets a product of k + 1 Gaussian factors
    exp(-x^2 / (2 scale^2)). Returns the root.
    """
    def target(k):
        def log_gamma(states):
            return (-0.5 * states[:, :k + 1] ** 2 / scale ** 2).sum(axis=1)
        return log_gamma

    node = DecompositionNode("c0", target(0), 1, proposal=GaussianProposal())
    for k in range(1, length):
        node = DecompositionNode(f"c{k}", target(k), k + 1, children=[node], proposal=GaussianProposal())
    return node


def chain_log_z(length, scale=0.5):
    return length * np.log(np.sqrt(2 * np.pi) * scale)
