"""
Baselines
---------
Comparison samplers sharing the engine's proposals, kernels and seed
discipline: plain sequential importance resampling along a chain, a
single-population tempered SMC sampler over the whole lattice, a
post-order bootstrap filter over a tree, and MCMC chains.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from config.constants import STAGE_CHAIN, STAGE_CHILD_RESAMPLE
from config.settings import DEFAULT_RESAMPLING_SCHEME
from services.annealing import AnnealedStep, method_settings
from services.dc_tree import (
    MergedTuples,
    dc_sir,
    iter_postorder,
    propose_and_weight,
)
from services.errors import ConfigError, DcSmcError, MalformedTree
from services.hierarchical_model import binomial_log_lik
from services.lattice import flat_decompose
from services.particles import ParticlePopulation, fold_logz, resample
from utils.logger import dcsmc_logger


@dataclass
class ChainDiagnostics:
    samples_retained: int
    burn_in: int
    ess: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    acceptance_rate: float = float("nan")


@dataclass
class ChainResult:
    """Diagnostics, posterior-mean estimates and retained traces of a chain batch."""

    diagnostics: ChainDiagnostics
    estimates: dict
    traces: dict


def autoregressive_ess(trace):
    """
    Effective sample size from the autocorrelation of a scalar trace.

    The autocovariance sum is truncated by the initial positive sequence
    rule: consecutive lag pairs are summed until a pair turns non-positive.
    Never exceeds the trace length.
    """
    x = np.asarray(trace, dtype=np.float64)
    n = x.shape[0]
    if n < 4:
        return float(n)
    x = x - x.mean()
    if not np.any(x):
        return float(n)
    spectrum = np.fft.rfft(x, 2 * n)
    acov = np.fft.irfft(spectrum * np.conj(spectrum))[:n] / n
    rho = acov / acov[0]
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(min(n, n / max(tau, 1e-12)))


def sir_run(root, n_particles, rng, scheme=DEFAULT_RESAMPLING_SCHEME):
    """
    Sequential importance resampling along a chain-shaped tree.

    Step k targets the node k levels above the leaf; its draws use the same
    seed path the divide-and-conquer sampler gives that node.

    Raises:
        MalformedTree: some node has more than one child
    """
    chain = []
    node = root
    while True:
        chain.append(node)
        if node.is_leaf:
            break
        if len(node.children) != 1:
            raise MalformedTree(node.node_id, "sir_run needs a chain")
        node = node.children[0]
    chain.reverse()
    depth = len(chain) - 1

    pop = None
    for k, node in enumerate(chain):
        seed = rng.descend((0,) * (depth - k))
        if pop is None:
            tuples = MergedTuples.empty(n_particles)
        else:
            log_z = fold_logz(pop)
            ancestors = resample(pop, scheme, seed.at_stage(STAGE_CHILD_RESAMPLE, 0))
            tuples = MergedTuples([ancestors.states], np.zeros(n_particles), log_z)
        pop = propose_and_weight(node, tuples, seed)
    return pop, fold_logz(pop)


def std_smc_run(model, n_particles, rng, recorder=None, kernel_spec=None, **thresholds):
    """
    Single-population SMC over the full lattice with adaptive tempering.

    Particles start from the product of the site initializers and follow the
    geometric bridge to the full target, with CESS-adaptive steps and
    ESS-triggered resampling. Equivalent to a root with every site as a leaf
    child and every edge entering at once.
    """
    tree = flat_decompose(model, kernel_spec)
    step = AnnealedStep(method_settings("dc-ann", **thresholds))
    return dc_sir(tree, n_particles, rng, step=step, recorder=recorder)


def postorder_smc_run(root, n_particles, rng, scheme=DEFAULT_RESAMPLING_SCHEME):
    """
    One population over a growing forest of complete subtrees.

    Nodes are added in post-order: a leaf starts a new tree, an internal node
    joins the trees of its children (always the most recent roots). The
    population is resampled before every addition after the first, with the
    same proposals and seed paths as the divide-and-conquer sampler.
    """
    pop = None
    root_dims = []
    for node, path in iter_postorder(root):
        seed = rng.descend(path)
        if pop is None:
            prefix = np.zeros((n_particles, 0))
            log_z = 0.0
        else:
            log_z = fold_logz(pop)
            prefix = resample(pop, scheme, seed.at_stage(STAGE_CHILD_RESAMPLE, 0)).states

        if node.is_leaf:
            tuples = MergedTuples.empty(n_particles)
            keep = prefix
        else:
            width = sum(root_dims[-len(node.children):])
            blocks = []
            start = prefix.shape[1] - width
            for child_dim in root_dims[-len(node.children):]:
                blocks.append(prefix[:, start:start + child_dim])
                start += child_dim
            del root_dims[-len(node.children):]
            tuples = MergedTuples(blocks, np.zeros(n_particles), 0.0)
            keep = prefix[:, :prefix.shape[1] - width]

        added = propose_and_weight(node, tuples, seed)
        root_dims.append(node.dim)
        states = np.hstack([keep, added.states]) if keep.shape[1] else added.states
        pop = ParticlePopulation(states, added.log_weights, log_z, seed)

    return pop, fold_logz(pop)


def mh_chain_run(model, kernel_spec, iterations, burn_in, rng, n_chains=1, track_sites=()):
    """
    Site-sequential Metropolis-Hastings chains on a lattice model.

    Chains start from the site initializers and run `iterations` full sweeps
    at the target; the first burn_in sweeps are discarded. Chains are
    independent rows updated together.

    Returns:
        ChainResult with per-chain arrays: mean energy, mean magnetization,
        per-site posterior means; traces of energy and tracked sites.
    """
    if iterations <= burn_in:
        raise DcSmcError("iterations must exceed burn_in")
    started = time.perf_counter()
    node = flat_decompose(model, kernel_spec)
    init_gen = rng.at_stage(STAGE_CHAIN, 0).generator()
    columns = [leaf.proposal.sample(np.zeros((n_chains, 0)), init_gen)[0] for leaf in node.children]
    states = np.hstack(columns).astype(model.state_dtype)

    gen = rng.at_stage(STAGE_CHAIN, 1).generator()
    retained = iterations - burn_in
    energy = np.empty((retained, n_chains))
    tracked = {site: np.empty((retained, n_chains)) for site in track_sites}
    site_sums = np.zeros((n_chains, model.n_sites))
    accepted = np.zeros(n_chains)
    for sweep in range(iterations):
        states, hits = node.kernel.sweep(states, 1.0, gen)
        accepted += hits
        if sweep < burn_in:
            continue
        row = sweep - burn_in
        energy[row] = model.energy(states)
        site_sums += states
        for site in track_sites:
            tracked[site][row] = states[:, site]

    site_means = site_sums / retained
    diagnostics = ChainDiagnostics(
        samples_retained=retained,
        burn_in=burn_in,
        ess={"energy": np.array([autoregressive_ess(energy[:, c]) for c in range(n_chains)])},
        wall_clock_s=time.perf_counter() - started,
        acceptance_rate=float(accepted.sum() / (iterations * model.n_sites * n_chains)),
    )
    estimates = {
        "expected_energy": energy.mean(axis=0),
        "magnetization": site_means.mean(axis=1),
        "site_means": site_means,
    }
    traces = {"energy": energy, **{f"site:{k}": v for k, v in tracked.items()}}
    dcsmc_logger.debug(f"MH chains done: acceptance {diagnostics.acceptance_rate:.3f}")
    return ChainResult(diagnostics, estimates, traces)


class _HierChainState:
    """
    Leaf thetas, internal variances and cached upward messages of one chain.

    A proposal at one node only changes messages on its path to the root,
    so only those are recomputed.
    """

    def __init__(self, model, values):
        self.model = model
        self.nodes = list(model.root.walk())
        self.parent = {}
        for node in self.nodes:
            for child in node.children:
                self.parent[child.node_id] = node
        self.value = dict(values)
        self.message = {}
        for node in reversed(self.nodes):
            if not node.is_leaf:
                self.message[node.node_id] = self._node_message(node, self.message)

    def _node_message(self, node, messages):
        """(precision, precision * mean, log scale) of the product of edge terms."""
        sigma2 = self.value[node.node_id]
        precisions, shifts, scales = [], [], []
        for child in node.children:
            if child.is_leaf:
                precisions.append(1.0 / sigma2)
                shifts.append(self.value[child.node_id] / sigma2)
                scales.append(0.0)
            else:
                p, h, s = messages[child.node_id]
                shrink = 1.0 + p * sigma2
                precisions.append(p / shrink)
                shifts.append(h / shrink)
                scales.append(s)
        return _gaussian_product(np.array(precisions), np.array(shifts), np.array(scales))

    def log_target(self, messages=None, values=None):
        messages = self.message if messages is None else messages
        values = self.value if values is None else values
        total = 0.0
        for node in self.nodes:
            if node.is_leaf:
                total += float(binomial_log_lik(values[node.node_id], node.successes, node.trials))
            else:
                total -= values[node.node_id]
        root = self.model.root
        if not root.is_leaf:
            total += messages[root.node_id][2]
        return total

    def propose(self, node, new_value):
        """Messages on the path to the root after setting node's variable."""
        old = self.value[node.node_id]
        self.value[node.node_id] = new_value
        updated = dict(self.message)
        current = node if not node.is_leaf else self.parent.get(node.node_id)
        while current is not None:
            updated[current.node_id] = self._node_message(current, updated)
            current = self.parent.get(current.node_id)
        self.value[node.node_id] = old
        return updated

    def local_log_target(self, node, value, messages):
        """Terms of the log target that depend on node's variable or on the path."""
        if node.is_leaf:
            own = float(binomial_log_lik(value, node.successes, node.trials))
        else:
            own = -value
        root = self.model.root
        return own + (messages[root.node_id][2] if not root.is_leaf else 0.0)


def _gaussian_product(precisions, shifts, scales):
    """Product of Gaussian factors c_i N(theta; mu_i, 1/P_i) in closed form."""
    total_p = precisions.sum()
    total_h = shifts.sum()
    means = shifts / precisions
    log_scale = (
        scales.sum()
        + 0.5 * np.log(precisions / (2 * np.pi)).sum()
        - 0.5 * (precisions * means * means).sum()
        + 0.5 * total_h * total_h / total_p
        - 0.5 * np.log(total_p / (2 * np.pi))
    )
    return float(total_p), float(total_h), float(log_scale)


def gibbs_run(model, iterations, rng, burn_in=None, proposal_sd=1.0, track_nodes=()):
    """
    Metropolis-within-Gibbs on the hierarchical model's leaf thetas and
    internal variances, internal thetas integrated out.

    Each scan visits every variable once in a fresh uniformly random order
    and proposes a unit-variance normal step. Burn-in defaults to 10% of
    the scans.
    """
    burn_in = iterations // 10 if burn_in is None else burn_in
    if iterations <= burn_in:
        raise DcSmcError("iterations must exceed burn_in")
    started = time.perf_counter()
    gen = rng.at_stage(STAGE_CHAIN, 0).generator()

    values = {}
    for node in model.root.walk():
        if node.is_leaf:
            p = (node.successes + 0.5) / (node.trials + 1.0)
            values[node.node_id] = float(np.log(p) - np.log1p(-p))
        else:
            values[node.node_id] = 1.0
    state = _HierChainState(model, values)
    nodes = state.nodes
    track_nodes = tuple(track_nodes)
    unknown = [n for n in track_nodes if n not in values]
    if unknown:
        raise ConfigError(f"unknown node(s) to track: {', '.join(unknown)}")
    retained = iterations - burn_in
    traces = {node_id: np.empty(retained) for node_id in track_nodes}
    log_target_trace = np.empty(retained)
    accepted = 0

    for scan in range(iterations):
        for index in gen.permutation(len(nodes)):
            node = nodes[index]
            current = state.value[node.node_id]
            proposed = current + proposal_sd * gen.standard_normal()
            log_u = np.log(gen.random())
            if not node.is_leaf and proposed <= 0:
                continue
            messages = state.propose(node, proposed)
            delta = (state.local_log_target(node, proposed, messages)
                     - state.local_log_target(node, current, state.message))
            if log_u < delta:
                state.value[node.node_id] = proposed
                state.message = messages
                accepted += 1
        if scan >= burn_in:
            row = scan - burn_in
            for node_id in track_nodes:
                traces[node_id][row] = state.value[node_id]
            log_target_trace[row] = state.log_target()

    diagnostics = ChainDiagnostics(
        samples_retained=retained,
        burn_in=burn_in,
        ess={node_id: autoregressive_ess(trace) for node_id, trace in traces.items()},
        wall_clock_s=time.perf_counter() - started,
        acceptance_rate=accepted / (iterations * len(nodes)),
    )
    diagnostics.ess["log_target"] = autoregressive_ess(log_target_trace)
    estimates = {
        **{f"mean:{k}": float(v.mean()) for k, v in traces.items()},
        **{f"var:{k}": float(v.var()) for k, v in traces.items()},
    }
    traces["log_target"] = log_target_trace
    return ChainResult(diagnostics, estimates, traces)


__all__ = [
    "ChainDiagnostics",
    "ChainResult",
    "autoregressive_ess",
    "gibbs_run",
    "mh_chain_run",
    "postorder_smc_run",
    "sir_run",
    "std_smc_run",
]
