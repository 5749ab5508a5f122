"""
Annealing
---------
Extensions of the basic merge: mixture-sampling merges over the N^C product
of child populations, tempered SMC moves along a geometric bridge inside a
node, CESS-adaptive schedules and the alpha-star warm start.

Alphas are on an absolute scale. The bridge at alpha is

    (1 - alpha) * (sum_c log gamma_c + log q) + alpha * log gamma_t

so the mixture merge at alpha-star lands the population exactly on the
bridge at alpha-star, and tempering continues from there to 1.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from config.constants import (
    STAGE_ALPHA_STAR,
    STAGE_ANNEAL_MOVE,
    STAGE_ANNEAL_RESAMPLE,
    STAGE_MIXTURE,
)
from config.settings import (
    ALPHA_STAR_SUPPORT,
    ALPHA_STAR_TOLERANCE,
    ALPHA_STEP_FLOOR,
    DEFAULT_ALPHA_STAR_CESS,
    DEFAULT_CESS_THRESHOLD,
    DEFAULT_MCMC_SWEEPS,
    DEFAULT_RESAMPLE_ESS_FRACTION,
    DEFAULT_RESAMPLING_SCHEME,
    DEFAULT_RW_STEP_SD,
    MIXTURE_BUDGET,
    MIXTURE_CHUNK_ENTRIES,
)
from services.dc_tree import (
    BasicStep,
    MergedTuples,
    merge_basic,
    propose_and_weight,
    propose_incremental,
)
from services.errors import AllWeightsZero, ArityTooLarge, ConfigError, DimensionMismatch
from services.particles import (
    ParticlePopulation,
    cess,
    ess,
    maybe_resample,
    normalize,
)
from utils.logger import dcsmc_logger

KERNEL_KINDS = ("single-flip", "random-walk", "model")


@dataclass(frozen=True)
class AnnealingPlan:
    """
    A fixed tempering schedule for one node.

    alpha_star is where the merged population starts; alphas are the
    remaining bridge points, strictly increasing and ending at 1. An empty
    alphas tuple means no tempering (only valid when alpha_star is 1).
    """

    alpha_star: float = 0.0
    alphas: tuple = (1.0,)
    cess_threshold: float = DEFAULT_CESS_THRESHOLD
    mcmc_sweeps_per_step: int = DEFAULT_MCMC_SWEEPS
    resample_ess_fraction: float = DEFAULT_RESAMPLE_ESS_FRACTION

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        object.__setattr__(self, "alphas", alphas)
        if not 0.0 <= self.alpha_star <= 1.0:
            raise ConfigError(f"alpha_star {self.alpha_star} outside [0, 1]")
        if not alphas:
            if self.alpha_star != 1.0:
                raise ConfigError("an empty schedule must start at alpha_star = 1")
        else:
            if alphas[-1] != 1.0:
                raise ConfigError("the last alpha must be 1")
            if any(b <= a for a, b in zip(alphas, alphas[1:])):
                raise ConfigError("alphas must be strictly increasing")
            if self.alpha_star > alphas[0]:
                raise ConfigError("alpha_star must not exceed the first alpha")
        if not 0.0 < self.cess_threshold <= 1.0:
            raise ConfigError("cess_threshold must lie in (0, 1]")
        if not 0.0 < self.resample_ess_fraction <= 1.0:
            raise ConfigError("resample_ess_fraction must lie in (0, 1]")
        if self.mcmc_sweeps_per_step < 0:
            raise ConfigError("mcmc_sweeps_per_step must be non-negative")

    @property
    def n_steps(self):
        return len(self.alphas)


def fixed_plan(n_steps, kind="linear", alpha_star=0.0, **kwargs):
    """Evenly spaced ('linear') or ratio-spaced ('geometric') schedule to 1."""
    if n_steps < 1:
        return AnnealingPlan(alpha_star=1.0, alphas=(), **kwargs)
    if kind == "linear":
        alphas = np.linspace(alpha_star, 1.0, n_steps + 1)[1:]
    elif kind == "geometric":
        start = max(alpha_star, 1e-4)
        alphas = np.geomspace(start, 1.0, n_steps + 1)[1:]
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alphas[-1] = 1.0
    return AnnealingPlan(alpha_star=alpha_star, alphas=tuple(alphas), **kwargs)


@dataclass(frozen=True)
class MarkovKernelSpec:
    kind: str = "single-flip"
    step_sd: float = DEFAULT_RW_STEP_SD

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if self.step_sd <= 0:
            raise ConfigError("step_sd must be positive")


class LocalMHKernel:
    """
    Site-sequential Metropolis-Hastings over a node's columns.

    local_delta(states, column, proposed, alpha) returns the change in the
    bridge log density when the column is set to the proposed values, for
    every particle at once. One sweep visits every column in order.
    """

    def __init__(self, local_delta, columns, spec=None):
        self.local_delta = local_delta
        self.columns = np.asarray(columns, dtype=np.int64)
        self.spec = spec or MarkovKernelSpec()

    @property
    def sites(self):
        return self.columns.shape[0]

    def propose(self, current, gen):
        if self.spec.kind == "single-flip":
            return -current
        return current + self.spec.step_sd * gen.standard_normal(current.shape[0])

    def sweep(self, states, alpha, gen):
        """Return (new states, accepted count per particle)."""
        states = np.array(states, copy=True)
        accepted = np.zeros(states.shape[0], dtype=np.int64)
        for column in self.columns:
            current = states[:, column]
            proposed = self.propose(current, gen).astype(states.dtype)
            delta = self.local_delta(states, column, proposed, alpha)
            log_u = np.log(gen.random(states.shape[0]))
            accept = log_u < delta
            states[accept, column] = proposed[accept]
            accepted += accept
        return states, accepted


def bridge_gap(node, states):
    """log gamma_t - (sum_c log gamma_c + log q) at each particle."""
    blocks, incremental = node.split_states(states)
    base = np.zeros(states.shape[0])
    for child, block in zip(node.children, blocks):
        base = base + child.log_gamma(block)
    if node.proposal is not None:
        parent = states[:, :states.shape[1] - incremental.shape[1]]
        base = base + node.proposal.log_density(parent, incremental)
    return np.asarray(node.log_gamma(states), dtype=np.float64) - base


def bridge_log_density(node, alpha, states):
    """
    Geometric bridge between the merged start and the node target.

    Args:
        node: tree node
        alpha: bridge position in [0, 1]
        states: (N, node.dim) or a single state of length node.dim

    Returns:
        log density per particle (a float for a single state)
    """
    single = np.ndim(states) == 1
    states = np.atleast_2d(states)
    log_target = np.asarray(node.log_gamma(states), dtype=np.float64)
    gap = bridge_gap(node, states)
    out = (1.0 - alpha) * (log_target - gap) + alpha * log_target
    return float(out[0]) if single else out


def smc_sampler_weight(prev_state, alpha_prev, alpha_next, node):
    """Incremental weight of one tempering step at the pre-move states."""
    if alpha_next == alpha_prev:
        return np.zeros(np.atleast_2d(prev_state).shape[0])
    return bridge_log_density(node, alpha_next, prev_state) - bridge_log_density(node, alpha_prev, prev_state)


def _largest_passing(passes, lo, hi, tol, iterations=60):
    """Bisection for the largest x in [lo, hi] with passes(x), given passes(lo)."""
    if passes(hi):
        return hi
    for _ in range(iterations):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if passes(mid):
            lo = mid
        else:
            hi = mid
    return lo


def adapt_next_alpha(pop, node, current_alpha, threshold=DEFAULT_CESS_THRESHOLD, gap=None):
    """
    Next bridge point keeping the CESS of the step above threshold * N.

    The bridge is linear in alpha, so the step-delta increment is delta
    times the gap between target and start. Never advances by less than
    the floor step.
    """
    if current_alpha >= 1.0:
        return 1.0
    gap = bridge_gap(node, pop.states) if gap is None else gap
    weights = normalize(pop.log_weights, context=f"tempering at {node.node_id}")
    n = pop.size
    finite_gap = np.where(np.isfinite(gap), gap, -np.inf)

    def passes(delta):
        return cess(weights, delta * finite_gap) >= threshold * n * (1 - 1e-12)

    room = 1.0 - current_alpha
    delta = _largest_passing(passes, 0.0, room, tol=1e-9)
    delta = max(delta, min(ALPHA_STEP_FLOOR, room))
    return min(current_alpha + delta, 1.0)


class _MixtureSupport:
    """
    Log-weight table v over child index combinations.

    Two-child merges are streamed in row chunks so only a slice of the
    N x N table is ever in memory; wider merges materialize the table.
    """

    def __init__(self, node, child_pops, alpha_star, chunk_entries=MIXTURE_CHUNK_ENTRIES):
        self.target = node.merge_target
        self.states = [p.states for p in child_pops]
        self.log_w = [p.log_weights for p in child_pops]
        self.alpha_star = alpha_star
        self.n = child_pops[0].size
        self.arity = len(child_pops)
        self.chunk_rows = max(1, chunk_entries // self.n)

    def row_chunks(self, rows=None):
        rows = np.arange(self.n) if rows is None else np.asarray(rows)
        for start in range(0, rows.shape[0], self.chunk_rows):
            yield rows[start:start + self.chunk_rows]

    def pair_rows(self, rows):
        table = self.target.log_table(self.states, rows=rows)
        return self.log_w[0][rows][:, None] + self.log_w[1][None, :] + self.alpha_star * table

    def full(self):
        table = self.alpha_star * self.target.log_table(self.states)
        for c, log_w in enumerate(self.log_w):
            shape = [1] * self.arity
            shape[c] = self.n
            table = table + log_w.reshape(shape)
        return table

    def sample(self, gen):
        """Draw N index tuples from Q proportional to v; returns (indices per child, log sum v)."""
        n = self.n
        if self.arity == 2:
            row_lse = np.concatenate([logsumexp(self.pair_rows(r), axis=1) for r in self.row_chunks()])
            log_total = logsumexp(row_lse)
            if not np.isfinite(log_total):
                raise AllWeightsZero("mixture merge")
            cdf = np.cumsum(np.exp(row_lse - log_total))
            cdf[-1] = 1.0
            first = np.searchsorted(cdf, gen.random(n), side="right")
            u = gen.random(n)
            second = np.empty(n, dtype=np.int64)
            # Chunks are contiguous runs of the sorted unique rows
            for rows in self.row_chunks(np.unique(first)):
                block = self.pair_rows(rows)
                probs = np.exp(block - logsumexp(block, axis=1, keepdims=True))
                row_cdf = np.cumsum(probs, axis=1)
                row_cdf[:, -1] = 1.0
                # Offset each row by its position so one searchsorted serves the block
                flat = (row_cdf + np.arange(rows.shape[0])[:, None]).ravel()
                mask = (first >= rows[0]) & (first <= rows[-1])
                local = np.searchsorted(rows, first[mask])
                hits = np.searchsorted(flat, local + u[mask], side="right")
                second[mask] = np.minimum(hits - local * n, n - 1)
            return [first, second], float(log_total)

        table = self.full().ravel()
        log_total = logsumexp(table)
        if not np.isfinite(log_total):
            raise AllWeightsZero("mixture merge")
        cdf = np.cumsum(np.exp(table - log_total))
        cdf[-1] = 1.0
        flat = np.searchsorted(cdf, gen.random(n), side="right")
        return list(np.unravel_index(flat, (n,) * self.arity)), float(log_total)


def mixture_merge(node, child_pops, rng, alpha_star=1.0, budget=MIXTURE_BUDGET):
    """
    Sample N child tuples from the reweighted product measure.

    v(i_1..i_C) = prod_c w_c(i_c) * exp(alpha_star * coupling(i_1..i_C)), where
    coupling is the merge target's log ratio to the product of the children.
    The merged estimate is sum_c log_z_hat_c + log mean v, and each tuple
    carries -alpha_star * coupling so downstream weights target gamma_t.

    Raises:
        ArityTooLarge: N^C exceeds the budget
        AllWeightsZero: every v vanishes
    """
    if node.merge_target is None:
        raise ConfigError(f"node {node.node_id!r} has no merge target")
    sizes = {p.size for p in child_pops}
    if len(sizes) != 1:
        raise DimensionMismatch(min(sizes), max(sizes))
    n = child_pops[0].size
    entries = n ** len(child_pops)
    if entries > budget:
        raise ArityTooLarge(node.node_id, entries, budget)

    support = _MixtureSupport(node, child_pops, alpha_star)
    indices, log_total = support.sample(rng.at_stage(STAGE_MIXTURE).generator())
    states = [p.states[idx] for p, idx in zip(child_pops, indices)]
    correction = -alpha_star * np.asarray(node.merge_target.log_ratio(states), dtype=np.float64)
    log_z_hat = sum(p.log_z_hat for p in child_pops) + log_total - len(child_pops) * np.log(n)
    return MergedTuples(states, correction, float(log_z_hat))


def _marginal_cess(table, log_weights, alpha):
    """Smallest per-child CESS of reweighting the product measure by exp(alpha * table)."""
    arity = table.ndim
    scaled = alpha * table
    worst = np.inf
    for c in range(arity):
        acc = scaled
        for other in range(arity):
            if other == c:
                continue
            shape = [1] * arity
            shape[other] = table.shape[other]
            acc = acc + log_weights[other].reshape(shape)
        axes = tuple(a for a in range(arity) if a != c)
        log_a = logsumexp(acc, axis=axes)
        weights = np.exp(log_weights[c])
        worst = min(worst, cess(weights, log_a) / table.shape[c])
    return worst


def adapt_alpha_star(node, child_pops, rng=None, threshold=DEFAULT_ALPHA_STAR_CESS,
                     tol=ALPHA_STAR_TOLERANCE, support=ALPHA_STAR_SUPPORT):
    """
    Largest alpha-star whose mixture reweighting keeps every child
    marginal's CESS at or above threshold * N.

    Two-child merges larger than the support size are evaluated on a random
    subset of the first child's particles. Returns 0 when even the
    tolerance-sized alpha fails.
    """
    if node.merge_target is None:
        return 0.0
    states = [p.states for p in child_pops]
    log_w = [np.log(normalize(p.log_weights)) for p in child_pops]
    n = child_pops[0].size
    if len(child_pops) == 2 and n * n > support and rng is not None:
        rows = max(1, support // n)
        gen = rng.at_stage(STAGE_ALPHA_STAR).generator()
        subset = np.sort(gen.choice(n, size=rows, replace=False))
        table = node.merge_target.log_table(states, rows=subset)
        first = log_w[0][subset]
        log_w = [first - logsumexp(first), log_w[1]]
    else:
        table = node.merge_target.log_table(states)
    table = np.where(np.isfinite(table), table, -np.inf)

    def passes(alpha):
        return _marginal_cess(table, log_w, alpha) >= threshold * (1 - 1e-12)

    if not passes(tol):
        return 0.0
    return _largest_passing(passes, tol, 1.0, tol)


def run_annealing(node, merged_pop, rng, plan=None, start_alpha=None,
                  cess_threshold=DEFAULT_CESS_THRESHOLD,
                  sweeps=DEFAULT_MCMC_SWEEPS,
                  resample_fraction=DEFAULT_RESAMPLE_ESS_FRACTION,
                  scheme=DEFAULT_RESAMPLING_SCHEME,
                  recorder=None):
    """
    Tempered SMC moves from the merged start to the node target.

    With a plan the bridge points come from plan.alphas; without one each
    step is chosen by adapt_next_alpha. The walk starts at start_alpha,
    or at plan.alpha_star (0 without a plan) when no start is given. Plan
    points at or below the start are skipped.

    Returns:
        (population at alpha = 1, number of tempering steps)
    """
    if start_alpha is None:
        start_alpha = plan.alpha_star if plan is not None else 0.0
    if plan is not None:
        sweeps = plan.mcmc_sweeps_per_step
        resample_fraction = plan.resample_ess_fraction
        schedule = iter([a for a in plan.alphas if a > start_alpha])
    else:
        schedule = None

    pop = merged_pop
    alpha = float(start_alpha)
    step = 0
    while alpha < 1.0:
        gap = bridge_gap(node, pop.states)
        gap = np.where(np.isnan(gap), -np.inf, gap)
        if schedule is not None:
            next_alpha = next(schedule, 1.0)
        else:
            next_alpha = adapt_next_alpha(pop, node, alpha, cess_threshold, gap=gap)
        log_w = pop.log_weights + (next_alpha - alpha) * gap
        if not np.isfinite(np.max(log_w)):
            raise AllWeightsZero(f"tempering at {node.node_id}")
        pop = pop.with_weights(log_w)
        pop, _ = maybe_resample(pop, scheme, rng.at_stage(STAGE_ANNEAL_RESAMPLE, step), resample_fraction)
        if node.kernel is not None and sweeps > 0:
            gen = rng.at_stage(STAGE_ANNEAL_MOVE, step).generator()
            states = pop.states
            for _ in range(sweeps):
                states, _ = node.kernel.sweep(states, next_alpha, gen)
            pop = pop.with_states(states)
            if recorder is not None:
                recorder.add_site_updates(node.kernel.sites, sweeps)
        alpha = next_alpha
        step += 1
    return pop, step


@dataclass(frozen=True)
class MethodSettings:
    """How each internal node is updated; built from the method name."""

    merge: str = "basic"
    anneal: bool = False
    adaptive_alpha_star: bool = False
    plan: AnnealingPlan | None = None
    scheme: str = DEFAULT_RESAMPLING_SCHEME
    cess_threshold: float = DEFAULT_CESS_THRESHOLD
    alpha_star_cess: float = DEFAULT_ALPHA_STAR_CESS
    resample_fraction: float = DEFAULT_RESAMPLE_ESS_FRACTION
    sweeps: int = DEFAULT_MCMC_SWEEPS
    mixture_budget: int = MIXTURE_BUDGET
    adaptive_child_resampling: bool = False

    def to_dict(self):
        data = {
            "merge": self.merge,
            "anneal": self.anneal,
            "adaptive_alpha_star": self.adaptive_alpha_star,
            "scheme": self.scheme,
            "cess_threshold": self.cess_threshold,
            "alpha_star_cess": self.alpha_star_cess,
            "resample_fraction": self.resample_fraction,
            "sweeps": self.sweeps,
            "mixture_budget": self.mixture_budget,
            "adaptive_child_resampling": self.adaptive_child_resampling,
        }
        if self.plan is not None:
            data["plan"] = {"alpha_star": self.plan.alpha_star, "alphas": list(self.plan.alphas)}
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        plan = data.pop("plan", None)
        if plan is not None:
            plan = AnnealingPlan(alpha_star=plan["alpha_star"], alphas=tuple(plan["alphas"]),
                                 mcmc_sweeps_per_step=data.get("sweeps", DEFAULT_MCMC_SWEEPS),
                                 resample_ess_fraction=data.get("resample_fraction", DEFAULT_RESAMPLE_ESS_FRACTION))
        return cls(plan=plan, **data)


def method_settings(method, **overrides):
    """
    Settings for a D&C method name.

    dc-sir: basic merge. dc-mix: mixture merge at alpha-star 1, no tempering.
    dc-ann: basic merge then adaptive tempering from 0. dc-mix-ann: mixture
    merge at an adapted alpha-star then adaptive tempering.
    """
    presets = {
        "dc-sir": dict(merge="basic", anneal=False),
        "dc-mix": dict(merge="mixture", anneal=False),
        "dc-ann": dict(merge="basic", anneal=True),
        "dc-mix-ann": dict(merge="mixture", anneal=True, adaptive_alpha_star=True),
    }
    if method not in presets:
        raise ConfigError(f"{method!r} is not a divide-and-conquer method")
    return MethodSettings(**{**presets[method], **overrides})


class AnnealedStep:
    """Node update combining the merge strategy with optional tempering."""

    def __init__(self, settings):
        self.settings = settings

    def _merge(self, node, child_pops, rng):
        s = self.settings
        if s.merge == "mixture" and node.merge_target is not None:
            if s.adaptive_alpha_star:
                alpha_star = adapt_alpha_star(node, child_pops, rng, threshold=s.alpha_star_cess)
            elif s.plan is not None and s.anneal:
                alpha_star = s.plan.alpha_star
            else:
                alpha_star = 1.0
            tuples = mixture_merge(node, child_pops, rng, alpha_star, budget=s.mixture_budget)
            return tuples, alpha_star
        fraction = s.resample_fraction if s.adaptive_child_resampling else None
        return merge_basic(child_pops, rng, s.scheme, fraction), None

    def __call__(self, node, child_pops, rng, n_particles, recorder=None):
        s = self.settings
        if node.is_leaf:
            return BasicStep(s.scheme)(node, child_pops, rng, n_particles, recorder)

        tuples, alpha_star = self._merge(node, child_pops, rng)
        n_temperatures = 0
        if s.anneal and node.kernel is not None:
            states, _ = propose_incremental(node, tuples, rng)
            # Mixture tuples already sit on the bridge at alpha-star; basic ones
            # only carry the correction of children merged without resampling
            start_weights = tuples.log_correction if alpha_star is None else np.zeros(len(tuples))
            merged = ParticlePopulation(states, start_weights, tuples.log_z_hat, rng)
            start = alpha_star if alpha_star is not None else 0.0
            pop, n_temperatures = run_annealing(
                node, merged, rng,
                plan=s.plan if not s.adaptive_alpha_star else None,
                start_alpha=start,
                cess_threshold=s.cess_threshold,
                sweeps=s.sweeps,
                resample_fraction=s.resample_fraction,
                scheme=s.scheme,
                recorder=recorder,
            )
        else:
            pop = propose_and_weight(node, tuples, rng)

        if recorder is not None:
            recorder.record_node(node.node_id, rng.depth, pop, alpha_star=alpha_star,
                                 n_temperatures=n_temperatures)
        dcsmc_logger.debug(
            f"{node.node_id}: alpha*={alpha_star} temps={n_temperatures} ess={ess(pop.log_weights):.1f}"
        )
        return pop

    def describe(self):
        return {"kind": "annealed", **self.settings.to_dict()}


def build_step(method, **overrides):
    """Node update for a method name; dc-sir keeps the plain basic step."""
    settings = method_settings(method, **overrides)
    if method == "dc-sir":
        return BasicStep(settings.scheme, settings.resample_fraction if settings.adaptive_child_resampling else None)
    return AnnealedStep(settings)


__all__ = [
    "AnnealingPlan",
    "AnnealedStep",
    "LocalMHKernel",
    "MarkovKernelSpec",
    "MethodSettings",
    "adapt_alpha_star",
    "adapt_next_alpha",
    "bridge_gap",
    "bridge_log_density",
    "build_step",
    "fixed_plan",
    "method_settings",
    "mixture_merge",
    "run_annealing",
    "smc_sampler_weight",
]
