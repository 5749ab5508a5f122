"""
Hierarchical Binomial-Logistic Model
------------------------------------
Tree of groups with Gaussian increments along edges,

    theta_child = theta_parent + Delta_e,  Delta_e ~ N(0, sigma2_parent),

binomial observations m_t ~ Binom(M_t, logistic(theta_t)) at the leaves,
sigma2 ~ Exp(1) at every internal node and an improper flat prior on the
root's theta. Internal thetas are never sampled: they are integrated out
with Gaussian messages passed up the tree, and only leaf thetas and
internal variances are carried by the particles.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import betaln, gammaln, log_expit
from scipy.stats import norm

from config.constants import STAGE_REINSTANTIATE
from services.dc_tree import DecompositionNode
from services.errors import (
    MalformedRow,
    NonPositiveVariance,
    ProprietyViolation,
    RootImproperPosterior,
)
from utils.logger import dcsmc_logger


@dataclass
class HierTreeNode:
    node_id: str
    children: list = field(default_factory=list)
    successes: int = 0
    trials: int = 0

    @property
    def is_leaf(self):
        return not self.children

    @cached_property
    def width(self):
        return sum(1 for _ in self.walk())

    def walk(self):
        """Pre-order traversal without recursion."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


class HierarchicalBinomial:
    """A validated tree of binomial observations."""

    tag = "hier"
    state_dtype = np.float64

    def __init__(self, root):
        self.root = root
        leaves = [n for n in root.walk() if n.is_leaf]
        for leaf in leaves:
            if not 0 <= leaf.successes <= leaf.trials:
                raise MalformedRow(0, f"{leaf.node_id}: successes outside [0, trials]")
        if not any(0 < leaf.successes < leaf.trials for leaf in leaves):
            raise ProprietyViolation("every leaf has zero or full success counts")
        self.leaves = leaves

    @classmethod
    def from_records(cls, records, root_id="root"):
        """
        Build root -> county -> district -> school -> year-leaf from records.

        Records are mappings with county, district, school, year, trials and
        successes. Children are ordered by id so the tree is deterministic.
        """
        root = HierTreeNode(root_id)
        index = {root_id: root}
        seen_leaves = set()
        for line, rec in enumerate(records, start=2):
            path = [
                f"county:{rec['county']}",
                f"district:{rec['district']}",
                f"school:{rec['school']}",
            ]
            leaf_id = f"year:{rec['school']}:{rec['year']}"
            if leaf_id in seen_leaves:
                raise MalformedRow(line, f"duplicate leaf {leaf_id}")
            seen_leaves.add(leaf_id)
            parent = root
            for node_id in path:
                if node_id not in index:
                    index[node_id] = HierTreeNode(node_id)
                    parent.children.append(index[node_id])
                parent = index[node_id]
            parent.children.append(HierTreeNode(leaf_id, successes=int(rec["successes"]),
                                                trials=int(rec["trials"])))
        for node in root.walk():
            node.children.sort(key=lambda c: c.node_id)
        return cls(root)

    def counts(self):
        kinds = {}
        for node in self.root.walk():
            kind = node.node_id.split(":", 1)[0]
            kinds[kind] = kinds.get(kind, 0) + 1
        return {
            "counties": kinds.get("county", 0),
            "districts": kinds.get("district", 0),
            "schools": kinds.get("school", 0),
            "leaves": len(self.leaves),
            "trials": int(sum(leaf.trials for leaf in self.leaves)),
        }

    def describe(self):
        return {"kind": self.tag, **self.counts()}


@dataclass
class GaussianMessage:
    """
    c * N(theta; mu, 1/precision) with log c = log_scale; all fields may be
    arrays over particles. Precision zero encodes a flat message c * 1.
    """

    precision: np.ndarray
    precision_times_mean: np.ndarray
    log_scale: np.ndarray

    @classmethod
    def flat(cls, log_scale=0.0):
        return cls(np.zeros_like(np.asarray(log_scale, dtype=np.float64)),
                   np.zeros_like(np.asarray(log_scale, dtype=np.float64)),
                   np.asarray(log_scale, dtype=np.float64))

    @classmethod
    def from_point(cls, theta, sigma2):
        """N(theta; theta_parent, sigma2) viewed as a function of theta_parent."""
        theta = np.asarray(theta, dtype=np.float64)
        sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), theta.shape)
        return cls(1.0 / sigma2, theta / sigma2, np.zeros(theta.shape))

    @property
    def mean(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.precision_times_mean / self.precision

    def convolve(self, sigma2):
        """Integrate against N(theta; theta_parent, sigma2) over theta."""
        shrink = 1.0 + self.precision * sigma2
        return GaussianMessage(self.precision / shrink, self.precision_times_mean / shrink, self.log_scale)

    def multiply(self, other):
        p1, p2 = self.precision, other.precision
        both = (p1 > 0) & (p2 > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            mu1 = self.precision_times_mean / p1
            mu2 = other.precision_times_mean / p2
            spread = np.sqrt(1.0 / p1 + 1.0 / p2)
            cross = np.where(both, norm.logpdf(mu1, loc=mu2, scale=np.where(both, spread, 1.0)), 0.0)
        return GaussianMessage(
            p1 + p2,
            self.precision_times_mean + other.precision_times_mean,
            self.log_scale + other.log_scale + cross,
        )

    def log_integral(self):
        """log of the integral over theta under a flat prior."""
        if np.any(np.asarray(self.precision) <= 0):
            raise RootImproperPosterior("message has zero precision at the root")
        return np.asarray(self.log_scale, dtype=np.float64)

    def sample(self, gen):
        if np.any(np.asarray(self.precision) <= 0):
            raise RootImproperPosterior("cannot sample a flat message")
        sd = 1.0 / np.sqrt(self.precision)
        return self.mean + sd * gen.standard_normal(np.shape(self.precision))


def hier_upward_message(children, sigma2):
    """
    Message over theta_t from its children, integrating each child's theta.

    Args:
        children: per child either a GaussianMessage over the child's theta
            (internal child) or an array of sampled leaf thetas
        sigma2: variance on the node's out-edges, scalar or per particle

    Raises:
        NonPositiveVariance: sigma2 is not strictly positive
    """
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(~(sigma2 > 0)):
        raise NonPositiveVariance(float(np.min(sigma2)))
    message = None
    for child in children:
        if isinstance(child, GaussianMessage):
            term = child.convolve(sigma2)
        else:
            # Leaf thetas enter directly through their edge factor
            term = GaussianMessage.from_point(child, sigma2)
        message = term if message is None else message.multiply(term)
    return message


def binomial_log_lik(theta, successes, trials):
    theta = np.asarray(theta, dtype=np.float64)
    log_choose = gammaln(trials + 1) - gammaln(successes + 1) - gammaln(trials - successes + 1)
    return log_choose + successes * log_expit(theta) + (trials - successes) * log_expit(-theta)


def logistic_log_pdf(theta):
    return log_expit(theta) + log_expit(-theta)


class LeafProposal:
    """p ~ Beta(1 + m, 1 + M - m), theta = logit(p)."""

    dim = 1

    def __init__(self, successes, trials):
        self.a = 1.0 + successes
        self.b = 1.0 + trials - successes
        self.log_beta = float(betaln(self.a, self.b))

    def log_density_theta(self, theta):
        # Beta density times the Jacobian p (1 - p)
        return self.a * log_expit(theta) + self.b * log_expit(-theta) - self.log_beta

    def sample(self, parent_states, gen):
        n = parent_states.shape[0]
        p = gen.beta(self.a, self.b, size=n)
        with np.errstate(divide="ignore"):
            theta = np.log(p) - np.log1p(-p)
        return theta.reshape(n, 1), self.log_density_theta(theta)

    def log_density(self, parent_states, incremental):
        return self.log_density_theta(np.asarray(incremental).reshape(-1))


def hier_leaf_proposal(successes, trials, gen, size=1):
    """Draw leaf thetas; returns (theta, log density)."""
    theta, log_q = LeafProposal(successes, trials).sample(np.zeros((size, 0)), gen)
    return theta[:, 0], log_q


class VarianceProposal:
    """sigma2 ~ Exp(1), the prior on every internal variance."""

    dim = 1

    def sample(self, parent_states, gen):
        n = parent_states.shape[0]
        sigma2 = gen.exponential(1.0, size=n)
        return sigma2.reshape(n, 1), -sigma2

    def log_density(self, parent_states, incremental):
        values = np.asarray(incremental).reshape(-1)
        return np.where(values > 0, -values, -np.inf)


def _subtree(hnode, block, collect=None):
    """
    Evaluate a subtree's state block.

    Returns (message over theta at hnode or None for a leaf, sum of
    leaf binomial log-likelihoods and internal Exp(1) log priors).
    collect, when given, receives every internal node's message.
    """
    if hnode.is_leaf:
        return None, binomial_log_lik(block[:, 0], hnode.successes, hnode.trials)
    sigma2 = block[:, -1]
    inputs = []
    total = np.where(sigma2 > 0, -sigma2, -np.inf)
    start = 0
    for child in hnode.children:
        width = subtree_dim(child)
        child_block = block[:, start:start + width]
        message, part = _subtree(child, child_block, collect)
        inputs.append(child_block[:, 0] if message is None else message)
        total = total + part
        start += width
    safe = np.where(sigma2 > 0, sigma2, 1.0)
    message = hier_upward_message(inputs, safe)
    if collect is not None:
        collect[hnode.node_id] = message
    return message, total


def subtree_dim(hnode):
    """Leaf thetas plus internal variances below and including hnode: one column per node."""
    return hnode.width


def subtree_log_gamma(hnode, block, is_root=False):
    """Unnormalized log target of the subtree rooted at hnode."""
    message, total = _subtree(hnode, block)
    if message is None:
        return total if is_root else total + logistic_log_pdf(block[:, 0])
    return total + message.log_integral()


def hier_internal_step(hnode, child_blocks, sigma2):
    """
    Incremental log weight for an internal node given its children's
    states and a proposed sigma2 ~ Exp(1).

    The Exp(1) prior cancels the proposal, child binomials cancel, and
    what remains is the ratio of marginal likelihood integrals:
    log K_t - sum_internal_c log K_c - sum_leaf_c log logistic(theta_c).
    """
    inputs = []
    log_w = np.zeros(np.shape(sigma2))
    for child, block in zip(hnode.children, child_blocks):
        if child.is_leaf:
            inputs.append(block[:, 0])
            log_w = log_w - logistic_log_pdf(block[:, 0])
        else:
            message, _ = _subtree(child, block)
            inputs.append(message)
            log_w = log_w - message.log_integral()
    message = hier_upward_message(inputs, sigma2)
    return log_w + message.log_integral()


def hier_decompose(model):
    """
    Decomposition tree mirroring the model's tree.

    Leaves sample theta from the Beta/logit proposal; internal nodes propose
    sigma2 from Exp(1). Non-root leaves target binomial times a standard
    logistic density on theta, which makes the leaf weight the constant
    -log(M + 1).
    """
    root = model.root

    def build(hnode):
        is_root = hnode is root
        if hnode.is_leaf:
            return DecompositionNode(
                node_id=hnode.node_id,
                log_gamma=lambda states, h=hnode, r=is_root: subtree_log_gamma(h, states, r),
                dim=1,
                proposal=LeafProposal(hnode.successes, hnode.trials),
                meta={"hier": hnode},
            )
        children = [build(c) for c in hnode.children]

        def log_increment(states, h=hnode, kids=children):
            blocks = []
            start = 0
            for kid in kids:
                blocks.append(states[:, start:start + kid.dim])
                start += kid.dim
            return hier_internal_step(h, blocks, states[:, -1])

        return DecompositionNode(
            node_id=hnode.node_id,
            log_gamma=lambda states, h=hnode: subtree_log_gamma(h, states),
            dim=sum(c.dim for c in children) + 1,
            children=children,
            proposal=VarianceProposal(),
            log_increment=log_increment,
            meta={"hier": hnode},
        )

    tree = build(root)
    dcsmc_logger.debug(f"Built hierarchical decomposition: {model.counts()}")
    return tree


def column_layout(model):
    """Column of each node's own variable (leaf theta or internal sigma2) in the root state."""
    layout = {}

    def place(hnode, start):
        if hnode.is_leaf:
            layout[hnode.node_id] = start
            return start + 1
        position = start
        for child in hnode.children:
            position = place(child, position)
        layout[hnode.node_id] = position
        return position + 1

    place(model.root, 0)
    return layout


def hier_reinstantiate_theta(model, states, rng, node_ids=None):
    """
    Sample internal thetas given leaf thetas and variances, top down.

    The root draws from its normalized upward message; each internal child
    combines its own upward message with the edge factor from its parent's
    draw. Leaf thetas are copied from the states.

    Returns:
        dict node_id -> (N,) theta samples
    """
    messages = {}
    _subtree(model.root, states, collect=messages)
    layout = column_layout(model)
    gen = rng.at_stage(STAGE_REINSTANTIATE).generator()
    thetas = {}
    if model.root.is_leaf:
        thetas[model.root.node_id] = states[:, 0]
    else:
        thetas[model.root.node_id] = messages[model.root.node_id].sample(gen)
    for hnode in model.root.walk():
        if hnode.is_leaf:
            continue
        sigma2 = states[:, layout[hnode.node_id]]
        for child in hnode.children:
            if child.is_leaf:
                thetas[child.node_id] = states[:, layout[child.node_id]]
                continue
            edge = GaussianMessage.from_point(thetas[hnode.node_id], sigma2)
            thetas[child.node_id] = messages[child.node_id].multiply(edge).sample(gen)
    if node_ids is not None:
        return {k: thetas[k] for k in node_ids}
    return thetas


def synthetic_hierarchical_dataset(seed, counties=3, districts=2, schools=3, years=3,
                                   mean_trials=60, edge_sd=0.6):
    """
    Records drawn from the model itself, shaped like the school dataset.

    Every internal node gets the same edge standard deviation; trials are
    Poisson around mean_trials (at least 1).
    """
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    records = []
    root_theta = 0.3
    for c in range(counties):
        county_theta = root_theta + edge_sd * gen.standard_normal()
        for d in range(districts):
            district = f"{c + 1}{d + 1:02d}"
            district_theta = county_theta + edge_sd * gen.standard_normal()
            for s in range(schools):
                school = f"{district}X{s + 1:03d}"
                school_theta = district_theta + edge_sd * gen.standard_normal()
                for y in range(years):
                    theta = school_theta + edge_sd * gen.standard_normal()
                    trials = max(1, int(gen.poisson(mean_trials)))
                    successes = int(gen.binomial(trials, 1.0 / (1.0 + np.exp(-theta))))
                    records.append({
                        "county": f"C{c + 1}",
                        "district": district,
                        "school": school,
                        "year": 2002 + y,
                        "trials": trials,
                        "successes": successes,
                    })
    return records
