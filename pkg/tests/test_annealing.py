import numpy as np
import pytest
from scipy import stats

from config.constants import STAGE_MIXTURE
from config.settings import ALPHA_STAR_TOLERANCE
from services.annealing import (
    _MixtureSupport,
    AnnealingPlan,
    AnnealedStep,
    adapt_alpha_star,
    adapt_next_alpha,
    bridge_gap,
    bridge_log_density,
    build_step,
    fixed_plan,
    method_settings,
    mixture_merge,
    run_annealing,
    smc_sampler_weight,
)
from services.dc_tree import BasicStep, DecompositionNode, dc_sir, merge_basic
from services.errors import ArityTooLarge, ConfigError
from services.ising_model import IsingLattice
from services.lattice import lattice_decompose, site_ordered
from services.oracles import brute_force_expectation, brute_force_log_z
from services.particles import ParticlePopulation, SeedPath, cess, normalize, weighted_moments
from tests.helpers import GaussianProposal
from utils.run_state import RunRecorder


class ProductCoupling:
    """log ratio strength * x_a * x_b between two scalar children."""

    def __init__(self, strength):
        self.strength = strength

    def log_ratio(self, child_states):
        return self.strength * child_states[0][:, 0] * child_states[1][:, 0]

    def log_table(self, child_states, rows=None):
        first = child_states[0][:, 0] if rows is None else child_states[0][rows, 0]
        return self.strength * np.outer(first, child_states[1][:, 0])


def coupled_node(strength):
    def leaf(name):
        return DecompositionNode(name, lambda s: -0.5 * s[:, 0] ** 2, 1, proposal=GaussianProposal())

    return DecompositionNode(
        "root",
        lambda s: -0.5 * (s ** 2).sum(axis=1) + strength * s[:, 0] * s[:, 1],
        2,
        children=[leaf("a"), leaf("b")],
        merge_target=ProductCoupling(strength),
    )


def test_fixed_plan_linear():
    plan = fixed_plan(4)
    np.testing.assert_allclose(plan.alphas, [0.25, 0.5, 0.75, 1.0])
    assert plan.n_steps == 4


def test_fixed_plan_geometric_ends_at_one():
    plan = fixed_plan(5, kind="geometric", alpha_star=0.01)
    assert plan.alphas[-1] == 1.0
    assert all(b > a for a, b in zip(plan.alphas, plan.alphas[1:]))


def test_plan_validation():
    with pytest.raises(ConfigError):
        AnnealingPlan(alphas=(0.5, 0.4, 1.0))
    with pytest.raises(ConfigError):
        AnnealingPlan(alphas=(0.5, 0.9))
    with pytest.raises(ConfigError):
        AnnealingPlan(alpha_star=0.3, alphas=())
    assert AnnealingPlan(alpha_star=1.0, alphas=()).n_steps == 0


def test_bridge_endpoints():
    node = coupled_node(0.4)
    states = np.array([[0.3, -1.2], [1.0, 0.5]])
    start = -0.5 * (states ** 2).sum(axis=1)
    np.testing.assert_allclose(bridge_log_density(node, 0.0, states), start)
    np.testing.assert_allclose(bridge_log_density(node, 1.0, states), node.log_gamma(states))
    assert bridge_log_density(node, 0.5, states[0]) == pytest.approx(start[0] + 0.5 * 0.4 * 0.3 * -1.2)


def test_sampler_weight_is_linear_in_alpha():
    node = coupled_node(0.4)
    states = np.array([[0.3, -1.2], [1.0, 0.5]])
    gap = 0.4 * states[:, 0] * states[:, 1]
    np.testing.assert_allclose(smc_sampler_weight(states, 0.2, 0.7, node), 0.5 * gap)
    np.testing.assert_allclose(smc_sampler_weight(states, 0.3, 0.3, node), 0.0)


def test_next_alpha_sits_on_the_threshold():
    gen = np.random.default_rng(4)
    pop = ParticlePopulation(gen.normal(size=(200, 2)), gen.normal(scale=0.3, size=200))
    gap = 3.0 * gen.normal(size=200)
    node = coupled_node(1.0)
    threshold = 0.9
    nxt = adapt_next_alpha(pop, node, 0.1, threshold, gap=gap)
    weights = normalize(pop.log_weights)
    assert 0.1 < nxt < 1.0
    assert cess(weights, (nxt - 0.1) * gap) >= threshold * 200 * (1 - 1e-9)
    assert cess(weights, (nxt - 0.1 + 1e-6) * gap) < threshold * 200
    # Scan agrees with the bisection
    grid = np.linspace(0.0, 0.9, 9001)
    passing = [d for d in grid if cess(weights, d * gap) >= threshold * 200]
    assert max(passing) == pytest.approx(nxt - 0.1, abs=2e-4)


def test_next_alpha_jumps_to_one_for_flat_gap():
    pop = ParticlePopulation(np.zeros((10, 2)), np.zeros(10))
    assert adapt_next_alpha(pop, coupled_node(1.0), 0.0, gap=np.full(10, 2.5)) == 1.0


def test_alpha_star_is_one_for_constant_coupling():
    node = coupled_node(0.0)
    children = [ParticlePopulation(np.linspace(-1, 1, 20), np.zeros(20)) for _ in range(2)]
    assert adapt_alpha_star(node, children) == 1.0


def test_alpha_star_shrinks_with_strong_coupling():
    gen = np.random.default_rng(8)
    children = [ParticlePopulation(gen.normal(size=50), np.zeros(50)) for _ in range(2)]
    weak = adapt_alpha_star(coupled_node(0.05), children)
    strong = adapt_alpha_star(coupled_node(3.0), children)
    assert strong < weak
    assert 0.0 <= strong < 1.0


def test_mixture_estimate_sums_the_whole_table(rng):
    node = coupled_node(0.6)
    gen = np.random.default_rng(2)
    children = [
        ParticlePopulation(gen.normal(size=6), gen.normal(size=6), log_z_hat=0.2),
        ParticlePopulation(gen.normal(size=6), gen.normal(size=6), log_z_hat=-0.1),
    ]
    alpha = 0.7
    tuples = mixture_merge(node, children, rng, alpha_star=alpha)
    a, b = children[0].states[:, 0], children[1].states[:, 0]
    v = np.exp(children[0].log_weights[:, None] + children[1].log_weights[None, :] + alpha * 0.6 * np.outer(a, b))
    assert tuples.log_z_hat == pytest.approx(0.1 + np.log(v.sum()) - 2 * np.log(6))
    chosen = tuples.child_states
    np.testing.assert_allclose(tuples.log_correction, -alpha * 0.6 * chosen[0][:, 0] * chosen[1][:, 0])


def test_mixture_draws_follow_the_table():
    node = coupled_node(0.8)
    a = np.array([-1.0, 0.0, 0.5, 1.5])
    b = np.array([-0.5, 0.25, 1.0, 2.0])
    log_w = [np.log([1.0, 2.0, 1.0, 3.0]), np.log([2.0, 1.0, 1.0, 1.0])]
    children = [ParticlePopulation(a, log_w[0]), ParticlePopulation(b, log_w[1])]
    counts = np.zeros((4, 4))
    for r in range(3000):
        tuples = mixture_merge(node, children, SeedPath(r), alpha_star=1.0)
        i = np.searchsorted(a, tuples.child_states[0][:, 0])
        j = np.searchsorted(b, tuples.child_states[1][:, 0])
        np.add.at(counts, (i, j), 1)
    v = np.exp(log_w[0][:, None] + log_w[1][None, :] + 0.8 * np.outer(a, b))
    _, p = stats.chisquare(counts.ravel(), counts.sum() * (v / v.sum()).ravel())
    assert p > 1e-3


def test_mixture_merge_refuses_large_supports(rng):
    node = coupled_node(0.5)
    children = [ParticlePopulation(np.zeros(10), np.zeros(10)) for _ in range(2)]
    with pytest.raises(ArityTooLarge):
        mixture_merge(node, children, rng, budget=99)
    mixture_merge(node, children, rng, budget=100)


def test_mixture_merge_needs_a_merge_target(rng):
    node = coupled_node(0.5)
    node.merge_target = None
    children = [ParticlePopulation(np.zeros(4), np.zeros(4)) for _ in range(2)]
    with pytest.raises(ConfigError):
        mixture_merge(node, children, rng)


def test_streamed_and_full_tables_agree(rng):
    node = coupled_node(0.3)
    gen = np.random.default_rng(6)
    children = [ParticlePopulation(gen.normal(size=40), gen.normal(size=40)) for _ in range(2)]
    whole = mixture_merge(node, children, rng)
    support = _MixtureSupport(node, children, 1.0, chunk_entries=7 * 40)
    assert support.chunk_rows == 7
    indices, log_total = support.sample(rng.at_stage(STAGE_MIXTURE).generator())
    assert log_total == pytest.approx(whole.log_z_hat + 2 * np.log(40))
    np.testing.assert_array_equal(children[0].states[indices[0]], whole.child_states[0])
    np.testing.assert_array_equal(children[1].states[indices[1]], whole.child_states[1])


def test_method_settings_presets():
    assert method_settings("dc-mix").merge == "mixture"
    assert method_settings("dc-ann").anneal
    assert method_settings("dc-mix-ann").adaptive_alpha_star
    assert isinstance(build_step("dc-sir"), BasicStep)
    assert isinstance(build_step("dc-ann"), AnnealedStep)
    with pytest.raises(ConfigError):
        method_settings("mh")


def test_settings_round_trip():
    settings = method_settings("dc-ann", plan=fixed_plan(3), sweeps=2)
    assert type(settings).from_dict(settings.to_dict()).plan.alphas == settings.plan.alphas


@pytest.mark.parametrize("method", ["dc-mix", "dc-ann", "dc-mix-ann"])
def test_small_ising_log_z(method, rng, ising_2x2):
    tree = lattice_decompose(ising_2x2)
    _, log_z = dc_sir(tree, 1000, rng, step=build_step(method))
    assert log_z == pytest.approx(brute_force_log_z(ising_2x2), abs=0.1)


def test_annealing_records_work(rng):
    model = IsingLattice(4, 0.3)
    recorder = RunRecorder(total_sites=model.n_sites)
    dc_sir(lattice_decompose(model), 64, rng, step=build_step("dc-mix-ann"), recorder=recorder)
    levels = recorder.alpha_star_by_level()
    assert levels
    assert all(0.0 <= a <= 1.0 for a in levels.values())
    assert recorder.mcmc_updates_per_site >= 0
    assert recorder.nodes["r0:4c0:4"].alpha_star is not None


def test_fixed_plan_drives_tempering(rng, ising_2x2):
    plan = fixed_plan(4)
    step = AnnealedStep(method_settings("dc-ann", plan=plan))
    recorder = RunRecorder(total_sites=ising_2x2.n_sites)
    _, log_z = dc_sir(lattice_decompose(ising_2x2), 1000, rng, step=step, recorder=recorder)
    internal = [r for r in recorder.nodes.values() if r.n_temperatures]
    assert internal
    assert all(r.n_temperatures == 4 for r in internal)
    assert log_z == pytest.approx(brute_force_log_z(ising_2x2), abs=0.1)


def test_alpha_star_never_grows_with_coupling():
    gen = np.random.default_rng(9)
    spins = [ParticlePopulation(gen.choice([-1.0, 1.0], size=60), np.zeros(60)) for _ in range(2)]
    betas = [0.05, 0.2, 0.44, 0.8, 1.5, 3.0]
    alphas = [adapt_alpha_star(coupled_node(beta), spins) for beta in betas]
    assert all(later <= earlier + ALPHA_STAR_TOLERANCE for earlier, later in zip(alphas, alphas[1:]))
    assert alphas[-1] < alphas[0]


@pytest.mark.slow
def test_product_form_mixture_matches_basic_merge():
    # Zero coupling: the mixture table is the product of the child weights
    node = coupled_node(0.0)
    a = np.array([-1.0, 0.5])
    b = np.array([0.25, 2.0])
    log_w = [np.log([1.0, 3.0]), np.log([2.0, 1.0])]
    children = [ParticlePopulation(a, log_w[0]), ParticlePopulation(b, log_w[1])]
    mixture = np.zeros((2, 2))
    basic = np.zeros((2, 2))
    for r in range(50_000):
        for counts, tuples in (
            (mixture, mixture_merge(node, children, SeedPath(r), alpha_star=1.0)),
            (basic, merge_basic(children, SeedPath(r), "multinomial")),
        ):
            i = np.searchsorted(a, tuples.child_states[0][:, 0])
            j = np.searchsorted(b, tuples.child_states[1][:, 0])
            np.add.at(counts, (i, j), 1)
    product = np.outer([0.25, 0.75], [2 / 3, 1 / 3]).ravel()
    for counts in (mixture, basic):
        _, p = stats.chisquare(counts.ravel(), counts.sum() * product)
        assert p > 1e-3
    _, p, _, _ = stats.chi2_contingency(np.vstack([mixture.ravel(), basic.ravel()]))
    assert p > 1e-3
    whole = mixture_merge(node, children, SeedPath(0), alpha_star=1.0)
    assert whole.log_z_hat == pytest.approx(merge_basic(children, SeedPath(0)).log_z_hat)


def test_plan_tempers_from_the_given_start():
    node = coupled_node(0.7)
    plan = AnnealingPlan(alpha_star=0.5, alphas=(0.625, 0.75, 0.875, 1.0),
                         mcmc_sweeps_per_step=0, resample_ess_fraction=1e-9)
    states = np.random.default_rng(4).normal(size=(40, 2))
    start = ParticlePopulation(states, np.zeros(40))
    pop, steps = run_annealing(node, start, SeedPath(1), plan=plan, start_alpha=0.0)
    # The whole bridge from 0 is crossed, not just the half above alpha_star
    np.testing.assert_allclose(pop.log_weights, bridge_gap(node, states))
    assert steps == 4


def test_plan_without_start_begins_at_its_alpha_star():
    node = coupled_node(0.7)
    plan = AnnealingPlan(alpha_star=0.5, alphas=(0.75, 1.0), mcmc_sweeps_per_step=0, resample_ess_fraction=1e-9)
    states = np.random.default_rng(5).normal(size=(40, 2))
    pop, steps = run_annealing(node, ParticlePopulation(states, np.zeros(40)), SeedPath(1), plan=plan)
    np.testing.assert_allclose(pop.log_weights, 0.5 * bridge_gap(node, states))
    assert steps == 2


@pytest.mark.slow
@pytest.mark.parametrize("method,overrides", [
    ("dc-ann", dict(plan=fixed_plan(4))),
    ("dc-mix-ann", dict(adaptive_alpha_star=False, plan=fixed_plan(4, alpha_star=0.5))),
])
def test_fixed_plan_partition_estimate_is_unbiased(method, overrides, ising_2x2):
    tree = lattice_decompose(ising_2x2)
    step = AnnealedStep(method_settings(method, **overrides))
    exact = brute_force_log_z(ising_2x2)
    ratios = np.array([np.exp(dc_sir(tree, 16, SeedPath(9000 + r), step=step)[1] - exact) for r in range(600)])
    assert abs(ratios.mean() - 1.0) < 3 * ratios.std(ddof=1) / np.sqrt(ratios.size)


@pytest.mark.slow
def test_expected_energy_matches_enumeration(rng, ising_4x4):
    tree = lattice_decompose(ising_4x4)
    pop, _ = dc_sir(tree, 1024, rng, step=build_step("dc-mix-ann"))
    estimate, _ = weighted_moments(pop, ising_4x4.energy(site_ordered(tree, pop.states)))
    exact = brute_force_expectation(ising_4x4, ising_4x4.energy)
    assert estimate == pytest.approx(exact, rel=0.03)
