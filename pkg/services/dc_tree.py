"""
Decomposition Tree
------------------
Tree-structured decompositions of a target and the basic divide-and-conquer
sampler over them. Each node carries an unnormalized log density over its
own variables; children are sampled independently and merged upward.

The recursion is an explicit post-order work-list, so tree depth is never
bounded by the interpreter stack.
"""

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from config.constants import STAGE_CHILD_RESAMPLE, STAGE_PROPOSE
from config.settings import DEFAULT_RESAMPLE_ESS_FRACTION, DEFAULT_RESAMPLING_SCHEME
from services.errors import (
    DcSmcError,
    DimensionMismatch,
    MalformedTree,
    NodeFailure,
    ProposalUnsupported,
)
from services.particles import ParticlePopulation, SeedPath, ess, fold_logz, normalize, resample
from utils.logger import dcsmc_logger


class Proposal(Protocol):
    """Kernel for the node's incremental variables given its children's states."""

    dim: int

    def sample(self, parent_states, gen):
        """Return (incremental states (N, dim), log q (N,))."""

    def log_density(self, parent_states, incremental):
        """Return log q (N,) of given incremental states."""


class MergeTarget(Protocol):
    """
    Coupling between children used by the mixture merge.

    log_ratio is log gamma_check - sum_c log gamma_c on aligned child states;
    log_table evaluates it on every combination of child indices.
    """

    def log_ratio(self, child_states):
        """(N,) for index-aligned child states."""

    def log_table(self, child_states, rows=None):
        """Array of shape (len(rows) or N, N, ..., N) over child combinations."""


@dataclass(eq=False)
class DecompositionNode:
    """
    A node of the decomposition.

    States are laid out as the concatenation of the children's states in
    child order, followed by the node's incremental variables.
    """

    node_id: str
    log_gamma: Callable[[np.ndarray], np.ndarray]
    dim: int
    children: list = field(default_factory=list)
    proposal: Proposal | None = None
    merge_target: MergeTarget | None = None
    kernel: object | None = None
    # Optional model shortcut for log gamma_t - sum_c log gamma_c - log q
    log_increment: Callable | None = None
    # Number of sites a kernel sweep updates, for MCMC accounting
    sites: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def is_leaf(self):
        return not self.children

    @property
    def child_dims(self):
        return [c.dim for c in self.children]

    @property
    def incremental_dim(self):
        return self.dim - sum(self.child_dims)

    def split_states(self, states):
        """Split (N, dim) states into per-child blocks and the incremental block."""
        blocks = []
        start = 0
        for d in self.child_dims:
            blocks.append(states[:, start:start + d])
            start += d
        return blocks, states[:, start:]

    def __repr__(self):
        return f"DecompositionNode({self.node_id!r}, dim={self.dim}, children={len(self.children)})"


@dataclass
class MergedTuples:
    """
    N index-aligned tuples of child states produced by a merge.

    log_correction is added to each particle's incremental weight; it is
    zero for the basic merge and undoes the merge target's coupling for
    the mixture merge. log_z_hat is the running estimate after the merge.
    """

    child_states: list
    log_correction: np.ndarray
    log_z_hat: float = 0.0

    def __len__(self):
        return self.log_correction.shape[0]

    def tuple_at(self, i):
        return tuple(s[i] for s in self.child_states), float(self.log_correction[i])

    def concatenated(self):
        n = len(self)
        if not self.child_states:
            return np.zeros((n, 0))
        return np.hstack(self.child_states)

    @classmethod
    def empty(cls, n):
        return cls([], np.zeros(n), 0.0)


@dataclass(frozen=True)
class TreeReport:
    node_count: int
    leaf_count: int
    depth: int
    nodes_per_level: tuple


def iter_postorder(root):
    """Yield (node, path) children-first without recursion."""
    stack = [(root, (), False)]
    while stack:
        node, path, expanded = stack.pop()
        if expanded or node.is_leaf:
            yield node, path
            continue
        stack.append((node, path, True))
        for position in reversed(range(len(node.children))):
            stack.append((node.children[position], path + (position,), False))


def tree_levels(root):
    """Nodes grouped by depth, root first."""
    levels = []
    frontier = [root]
    while frontier:
        levels.append(frontier)
        frontier = [c for node in frontier for c in node.children]
    return levels


def find_node(root, node_id):
    for node, path in iter_postorder(root):
        if node.node_id == node_id:
            return node, path
    raise MalformedTree(node_id, "not found in tree")


def node_at(root, path):
    node = root
    for position in path:
        node = node.children[position]
    return node


def validate_tree(root, probe_particles=2, seed=0):
    """
    Check the tree is well formed and its dimension bookkeeping holds.

    Leaf proposals are sampled on a few probe particles and every log_gamma
    is evaluated on the concatenated probe states, so shape errors surface
    before a long run starts.

    Raises:
        MalformedTree: duplicate ids, a leaf without a proposal, or a
            log_gamma / proposal whose output shape disagrees with dim.
    """
    seen = set()
    probes = {}
    rng = SeedPath(seed)
    for node, path in iter_postorder(root):
        if node.node_id in seen:
            raise MalformedTree(node.node_id, "duplicate node id")
        seen.add(node.node_id)
        if node.is_leaf and node.proposal is None:
            raise MalformedTree(node.node_id, "leaf has no proposal")
        if node.incremental_dim < 0:
            raise MalformedTree(node.node_id, "children use more dimensions than the node has")
        parent = (np.hstack([probes.pop(id(c)) for c in node.children])
                  if node.children else np.zeros((probe_particles, 0)))
        if node.proposal is not None:
            if node.proposal.dim != node.incremental_dim:
                raise MalformedTree(node.node_id, "proposal dim does not match incremental dim")
            extra, _ = node.proposal.sample(parent, rng.descend(path).generator())
            parent = np.hstack([parent, extra])
        elif node.incremental_dim:
            raise MalformedTree(node.node_id, "incremental variables without a proposal")
        if parent.shape != (probe_particles, node.dim):
            raise MalformedTree(node.node_id, f"probe states have shape {parent.shape}")
        values = np.asarray(node.log_gamma(parent))
        if values.shape != (probe_particles,):
            raise MalformedTree(node.node_id, f"log_gamma returned shape {values.shape}")
        probes[id(node)] = parent

    levels = tree_levels(root)
    report = TreeReport(
        node_count=len(seen),
        leaf_count=sum(1 for n, _ in iter_postorder(root) if n.is_leaf),
        depth=len(levels),
        nodes_per_level=tuple(len(level) for level in levels),
    )
    dcsmc_logger.debug(f"Validated tree {root.node_id}: {report}")
    return report


def binarize(node, prefix="dummy"):
    """
    Rewrite every node with more than two children as a chain of binary
    dummy nodes. Dummy nodes have no incremental variables and their
    target is the product of their children's targets.
    """
    counter = [0]

    def product_of(children):
        def log_gamma(states, _children=tuple(children)):
            total = np.zeros(states.shape[0])
            start = 0
            for c in _children:
                total = total + c.log_gamma(states[:, start:start + c.dim])
                start += c.dim
            return total
        return log_gamma

    def rebuild(current):
        kids = [rebuild(c) for c in current.children]
        if len(kids) <= 2:
            current.children = kids
            return current
        left = kids[0]
        for right in kids[1:-1]:
            counter[0] += 1
            pair = [left, right]
            left = DecompositionNode(
                node_id=f"{prefix}{counter[0]}:{current.node_id}",
                log_gamma=product_of(pair),
                dim=left.dim + right.dim,
                children=pair,
                merge_target=ProductMergeTarget(2),
                meta={"dummy": True},
            )
        current.children = [left, kids[-1]]
        return current

    return rebuild(node)


class ProductMergeTarget:
    """Merge target of independent children: zero coupling."""

    def __init__(self, arity):
        self.arity = arity

    def log_ratio(self, child_states):
        return np.zeros(child_states[0].shape[0])

    def log_table(self, child_states, rows=None):
        n = child_states[0].shape[0]
        first = n if rows is None else len(rows)
        return np.zeros((first,) + (n,) * (len(child_states) - 1))


def merge_basic(child_pops, rng, scheme=DEFAULT_RESAMPLING_SCHEME, adaptive_fraction=None):
    """
    Resample each child population independently and align by index.

    The post-merge estimate is the product of the children's folded estimates.
    With adaptive_fraction set, a child whose ESS is at least that fraction
    of N is not resampled: its particles are shuffled by a uniform
    permutation and its normalized weights (times N) enter the tuple
    correction instead.
    """
    if not child_pops:
        raise DcSmcError("merge needs at least one child population")
    sizes = {p.size for p in child_pops}
    if len(sizes) != 1:
        raise DimensionMismatch(min(sizes), max(sizes))
    log_z_hat = sum(fold_logz(p) for p in child_pops)
    n = child_pops[0].size
    correction = np.zeros(n)
    states = []
    for c, p in enumerate(child_pops):
        stream = rng.at_stage(STAGE_CHILD_RESAMPLE, c)
        if adaptive_fraction is not None and ess(p.log_weights) >= adaptive_fraction * n:
            order = stream.generator().permutation(n)
            weights = normalize(p.log_weights, context=f"child {c}")
            with np.errstate(divide="ignore"):
                correction = correction + np.log(weights[order] * n)
            states.append(p.states[order])
            continue
        states.append(resample(p, scheme, stream).states)
    return MergedTuples(states, correction, log_z_hat)


def propose_incremental(node, tuples, rng):
    """Draw the node's incremental variables; returns (full states, log q)."""
    parent = tuples.concatenated()
    if node.proposal is None:
        return parent, np.zeros(len(tuples))
    extra, log_q = node.proposal.sample(parent, rng.at_stage(STAGE_PROPOSE).generator())
    log_q = np.asarray(log_q, dtype=np.float64)
    if not np.all(np.isfinite(log_q)):
        raise ProposalUnsupported(node.node_id)
    return np.hstack([parent, extra]), log_q


def incremental_log_weight(node, states, tuples, log_q):
    """log gamma_t - sum_c log gamma_c - log q + merge correction."""
    if node.log_increment is not None:
        base = node.log_increment(states)
    else:
        blocks, _ = node.split_states(states)
        base = np.asarray(node.log_gamma(states), dtype=np.float64)
        for child, block in zip(node.children, blocks):
            base = base - child.log_gamma(block)
    return base - log_q + tuples.log_correction


def propose_and_weight(node, tuples, rng):
    """
    Draw the incremental variables and weight the merged particles.

    Args:
        node: the tree node being sampled
        tuples: merged child states (MergedTuples.empty(N) at a leaf)
        rng: the node's SeedPath

    Returns:
        ParticlePopulation over node.dim carrying tuples.log_z_hat
    """
    states, log_q = propose_incremental(node, tuples, rng)
    log_w = incremental_log_weight(node, states, tuples, log_q)
    # NaN from a density evaluation counts as zero weight
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    return ParticlePopulation(states, log_w, tuples.log_z_hat, rng)


class BasicStep:
    """Node update of the basic sampler: resample children, propose, weight."""

    def __init__(self, scheme=DEFAULT_RESAMPLING_SCHEME, adaptive_fraction=None):
        self.scheme = scheme
        self.adaptive_fraction = adaptive_fraction

    def __call__(self, node, child_pops, rng, n_particles, recorder=None):
        if node.is_leaf:
            tuples = MergedTuples.empty(n_particles)
        else:
            tuples = merge_basic(child_pops, rng, self.scheme, self.adaptive_fraction)
        pop = propose_and_weight(node, tuples, rng)
        if recorder is not None:
            recorder.record_node(node.node_id, rng.depth, pop)
        return pop

    def describe(self):
        return {"kind": "basic", "scheme": self.scheme, "adaptive_fraction": self.adaptive_fraction}


def node_step(node, child_pops, rng, n_particles, step=None, recorder=None):
    """
    Run one node's update given its children's populations.

    Any engine error is re-raised as NodeFailure tagged with the node id;
    failures already tagged deeper in the tree pass through unchanged.
    """
    step = step or BasicStep()
    try:
        return step(node, child_pops, rng, n_particles, recorder)
    except NodeFailure:
        raise
    except DcSmcError as exc:
        raise NodeFailure(node.node_id, exc) from exc


def dc_sir(root, n_particles, rng, step=None, recorder=None, sibling_order="forward",
           adaptive_child_resampling=False):
    """
    Divide-and-conquer sampler over a decomposition tree.

    Args:
        root: root DecompositionNode
        n_particles: population size N at every node
        rng: SeedPath of the root; child c of a node at path p uses p + (c,)
        step: node update (BasicStep by default, or an annealed step)
        recorder: optional RunRecorder receiving per-node diagnostics
        sibling_order: 'forward' or 'reverse'; changes only the order
            children are computed in, never their seeds or results
        adaptive_child_resampling: with the default step, skip resampling
            children whose ESS is already high (see merge_basic)

    Returns:
        (root population, log Z estimate)
    """
    if n_particles < 1:
        raise DcSmcError("n_particles must be at least 1")
    if step is None:
        step = BasicStep(adaptive_fraction=DEFAULT_RESAMPLE_ESS_FRACTION if adaptive_child_resampling else None)
    results = {}
    stack = [(root, (), False)]
    while stack:
        node, path, expanded = stack.pop()
        if node.is_leaf or expanded:
            child_pops = [results.pop(path + (c,)) for c in range(len(node.children))]
            results[path] = node_step(node, child_pops, rng.descend(path), n_particles, step, recorder)
            continue
        stack.append((node, path, True))
        positions = range(len(node.children))
        if sibling_order == "forward":
            positions = reversed(positions)
        for position in positions:
            stack.append((node.children[position], path + (position,), False))

    pop = results[()]
    log_z = fold_logz(pop)
    dcsmc_logger.debug(f"dc_sir finished at {root.node_id}: log Z = {log_z:.6f}")
    return pop, log_z
