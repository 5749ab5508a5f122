"""
Lattice Decompositions
----------------------
Shared machinery for M x M periodic lattice models with one variable per
site, unary site factors and pairwise nearest-neighbour factors. Concrete
models (Ising, Gaussian squared-observation) supply the factors; this
module builds the self-similar decomposition trees over them.

Site k sits at row k // M, column k % M. Every site owns a right edge and
a down edge, so the periodic lattice has 2 M^2 edges (with repeats when
M = 2, and none when M = 1).
"""

import numpy as np

from services.annealing import LocalMHKernel, MarkovKernelSpec
from services.dc_tree import DecompositionNode
from services.errors import DimensionMismatch, MalformedTree, NotPowerOfTwo


def periodic_edges(M):
    """(2 M^2, 2) array of site pairs; empty for a single site."""
    if M == 1:
        return np.zeros((0, 2), dtype=np.int64)
    edges = []
    for r in range(M):
        for c in range(M):
            k = r * M + c
            edges.append((k, r * M + (c + 1) % M))
            edges.append((k, ((r + 1) % M) * M + c))
    return np.asarray(edges, dtype=np.int64)


def is_power_of_two(value):
    return value >= 1 and (value & (value - 1)) == 0


class LatticeModel:
    """Base class for periodic lattice models."""

    tag = "lattice"
    state_dtype = np.float64

    def __init__(self, M, any_side=False):
        # any_side admits sides like 3; bisection then splits floor/ceil
        if not any_side and not is_power_of_two(int(M)):
            raise NotPowerOfTwo(M)
        self.M = int(M)
        self.n_sites = self.M * self.M
        self.edges = periodic_edges(self.M)

    # Factors, overridden by concrete models
    def unary(self, values, sites):
        return np.zeros(np.shape(values))

    def pair(self, a, b):
        raise NotImplementedError

    def pair_table(self, A, B):
        """sum_k pair(A[i, k], B[j, k]) for every (i, j); A is (r, K), B is (n, K)."""
        table = np.zeros((A.shape[0], B.shape[0]))
        for k in range(A.shape[1]):
            table += self.pair(A[:, k][:, None], B[:, k][None, :])
        return table

    def leaf_proposal(self, site):
        raise NotImplementedError

    def default_kernel_spec(self):
        return MarkovKernelSpec()

    # Whole-lattice evaluation
    def check_config(self, config):
        config = np.atleast_2d(config)
        if config.shape[1] != self.n_sites:
            raise DimensionMismatch(self.n_sites, config.shape[1])
        return config

    def log_gamma(self, config):
        """Unnormalized log density of full configurations, (N,) or a float."""
        single = np.ndim(config) == 1
        config = self.check_config(config)
        sites = np.arange(self.n_sites)
        out = self.unary(config, sites[None, :]).sum(axis=1)
        if self.edges.size:
            a, b = self.edges[:, 0], self.edges[:, 1]
            out = out + self.pair(config[:, a], config[:, b]).sum(axis=1)
        return float(out[0]) if single else out

    def describe(self):
        return {"kind": self.tag, "M": self.M}


class LatticeMergeTarget:
    """
    Coupling added by a lattice node on top of its children's targets.

    new_edges holds (child_a, column_a, child_b, column_b) with columns local
    to each child; edges inside a single child contribute per-index terms.
    """

    def __init__(self, model, arity, new_edges):
        self.model = model
        self.arity = arity
        self.new_edges = new_edges

    def log_ratio(self, child_states):
        total = np.zeros(child_states[0].shape[0])
        for ca, ia, cb, ib in self.new_edges:
            total = total + self.model.pair(
                child_states[ca][:, ia].astype(np.float64), child_states[cb][:, ib].astype(np.float64)
            )
        return total

    def _grouped(self):
        groups = {}
        for ca, ia, cb, ib in self.new_edges:
            if ca > cb:
                ca, ia, cb, ib = cb, ib, ca, ia
            groups.setdefault((ca, cb), ([], []))
            groups[(ca, cb)][0].append(ia)
            groups[(ca, cb)][1].append(ib)
        return groups

    def log_table(self, child_states, rows=None):
        states = list(child_states)
        if rows is not None:
            states[0] = states[0][rows]
        shape = tuple(s.shape[0] for s in states)
        table = np.zeros(shape)
        for (ca, cb), (cols_a, cols_b) in self._grouped().items():
            A = states[ca][:, cols_a].astype(np.float64)
            B = states[cb][:, cols_b].astype(np.float64)
            if ca == cb:
                term = self.model.pair(A, B).sum(axis=1)
                view = [1] * self.arity
                view[ca] = shape[ca]
                table = table + term.reshape(view)
                continue
            term = self.model.pair_table(A, B)
            view = [1] * self.arity
            view[ca] = shape[ca]
            view[cb] = shape[cb]
            table = table + term.reshape(view)
        return table


def _local_delta(model, sites, incidence):
    """Bridge log-density change for setting one column, vectorized over particles."""

    def local_delta(states, column, proposed, alpha):
        neighbours, is_new = incidence[column]
        current = states[:, column].astype(np.float64)
        proposed = proposed.astype(np.float64)
        delta = model.unary(proposed, sites[column]) - model.unary(current, sites[column])
        if neighbours.size:
            nb = states[:, neighbours].astype(np.float64)
            weight = np.where(is_new, alpha, 1.0)
            change = model.pair(proposed[:, None], nb) - model.pair(current[:, None], nb)
            delta = delta + (change * weight).sum(axis=1)
        return delta

    return local_delta


def lattice_node(model, node_id, children, edge_ids, kernel_spec=None):
    """
    Internal node over the union of its children's sites.

    edge_ids are indices into model.edges included in this node's target;
    every child's edges must be among them.
    """
    sites = np.concatenate([c.meta["sites"] for c in children])
    column_of = {int(s): i for i, s in enumerate(sites)}
    edge_ids = sorted(set(int(e) for e in edge_ids))
    inherited = set().union(*(c.meta["edge_ids"] for c in children))
    if not inherited.issubset(edge_ids):
        raise MalformedTree(node_id, "node drops edges present in a child")

    ea = np.array([column_of[int(model.edges[e, 0])] for e in edge_ids], dtype=np.int64)
    eb = np.array([column_of[int(model.edges[e, 1])] for e in edge_ids], dtype=np.int64)
    new = [i for i, e in enumerate(edge_ids) if e not in inherited]

    offsets = np.cumsum([0] + [c.dim for c in children])
    owner = np.searchsorted(offsets, np.arange(sites.shape[0]), side="right") - 1
    new_edges = [
        (int(owner[ea[i]]), int(ea[i] - offsets[owner[ea[i]]]),
         int(owner[eb[i]]), int(eb[i] - offsets[owner[eb[i]]]))
        for i in new
    ]

    site_row = sites[None, :]

    def log_gamma(states):
        values = states.astype(np.float64)
        out = model.unary(values, site_row).sum(axis=1)
        if ea.size:
            out = out + model.pair(values[:, ea], values[:, eb]).sum(axis=1)
        return out

    new_set = set(new)
    lists = [([], []) for _ in range(sites.shape[0])]
    for i in range(ea.shape[0]):
        fresh = i in new_set
        lists[ea[i]][0].append(eb[i])
        lists[ea[i]][1].append(fresh)
        lists[eb[i]][0].append(ea[i])
        lists[eb[i]][1].append(fresh)
    incidence = [(np.asarray(nb, dtype=np.int64), np.asarray(flags, dtype=bool)) for nb, flags in lists]

    spec = kernel_spec or model.default_kernel_spec()
    kernel = LocalMHKernel(_local_delta(model, sites, incidence), np.arange(sites.shape[0]), spec)
    return DecompositionNode(
        node_id=node_id,
        log_gamma=log_gamma,
        dim=int(sites.shape[0]),
        children=list(children),
        merge_target=LatticeMergeTarget(model, len(children), new_edges),
        kernel=kernel,
        sites=int(sites.shape[0]),
        meta={"sites": sites, "edge_ids": frozenset(edge_ids), "new_edges": len(new)},
    )


def lattice_leaf(model, site):
    def log_gamma(states):
        return model.unary(states[:, 0].astype(np.float64), site)

    return DecompositionNode(
        node_id=f"s{site}",
        log_gamma=log_gamma,
        dim=1,
        proposal=model.leaf_proposal(site),
        sites=1,
        meta={"sites": np.array([site], dtype=np.int64), "edge_ids": frozenset()},
    )


def _block_sites(model, r0, r1, c0, c1):
    return {r * model.M + c for r in range(r0, r1) for c in range(c0, c1)}


def _edges_within(model, site_set):
    inside = np.zeros(model.n_sites, dtype=bool)
    inside[list(site_set)] = True
    if not model.edges.size:
        return []
    mask = inside[model.edges[:, 0]] & inside[model.edges[:, 1]]
    return np.nonzero(mask)[0].tolist()


def _split(block, scheme):
    r0, r1, c0, c1 = block
    height, width = r1 - r0, c1 - c0
    if scheme == "bisection":
        if width >= height:
            mid = c0 + width // 2
            return [(r0, r1, c0, mid), (r0, r1, mid, c1)]
        mid = r0 + height // 2
        return [(r0, mid, c0, c1), (mid, r1, c0, c1)]
    # Quadrants: top-left, top-right, bottom-left, bottom-right
    rm, cm = r0 + height // 2, c0 + width // 2
    return [(r0, rm, c0, cm), (r0, rm, cm, c1), (rm, r1, c0, cm), (rm, r1, cm, c1)]


def lattice_decompose(model, scheme="bisection", kernel_spec=None):
    """
    Self-similar decomposition of a lattice model.

    bisection halves the longer side of each block (columns first on a
    square), giving a binary tree of depth 2 log2(M) + 1. quadrants splits
    each square block four ways. binary-with-dummies splits four ways but
    joins the quadrants through binary dummy nodes whose targets are the
    product of their children, so every merge has two children.

    Leaves are single sites with the model's leaf proposal; internal nodes
    add exactly the edges internal to their block and have no incremental
    variables.
    """
    if scheme not in ("bisection", "quadrants", "binary-with-dummies"):
        raise MalformedTree(scheme, "unknown lattice scheme")
    split_scheme = "bisection" if scheme == "bisection" else "quadrants"

    def build(block):
        r0, r1, c0, c1 = block
        if (r1 - r0) * (c1 - c0) == 1:
            return lattice_leaf(model, r0 * model.M + c0)
        children = [build(b) for b in _split(block, split_scheme)]
        node_id = f"r{r0}:{r1}c{c0}:{c1}"
        edge_ids = _edges_within(model, _block_sites(model, *block))
        if scheme != "binary-with-dummies" or len(children) <= 2:
            return lattice_node(model, node_id, children, edge_ids, kernel_spec)
        left = children[0]
        for i, right in enumerate(children[1:-1], start=1):
            inherited = left.meta["edge_ids"] | right.meta["edge_ids"]
            left = lattice_node(model, f"{node_id}~{i}", [left, right], inherited, kernel_spec)
            left.meta["dummy"] = True
        return lattice_node(model, node_id, [left, children[-1]], edge_ids, kernel_spec)

    return build((0, model.M, 0, model.M))


def flat_decompose(model, kernel_spec=None):
    """Root with every site as a direct leaf child; all edges enter at the root."""
    leaves = [lattice_leaf(model, k) for k in range(model.n_sites)]
    return lattice_node(model, "flat", leaves, range(model.edges.shape[0]), kernel_spec)


def site_ordered(node, states):
    """States of a lattice node with columns rearranged into row-major site order."""
    return np.asarray(states)[:, np.argsort(node.meta["sites"], kind="stable")]
