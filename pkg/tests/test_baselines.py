import numpy as np
import pytest

from services.annealing import build_step
from services.baselines import (
    autoregressive_ess,
    gibbs_run,
    mh_chain_run,
    postorder_smc_run,
    std_smc_run,
)
from services.dc_tree import dc_sir
from services.errors import ConfigError, DcSmcError
from services.hierarchical_model import hier_decompose
from services.ising_model import IsingLattice, single_flip_kernel
from services.lattice import lattice_decompose
from services.oracles import brute_force_expectation, brute_force_log_z
from services.particles import SeedPath, weighted_mean
from utils.run_state import RunRecorder


def test_ess_of_short_or_constant_traces():
    assert autoregressive_ess([1.0, 2.0, 3.0]) == 3.0
    assert autoregressive_ess(np.full(100, 2.0)) == 100.0


def test_ess_of_independent_draws_is_near_length():
    trace = np.random.default_rng(0).normal(size=5000)
    value = autoregressive_ess(trace)
    assert 0.7 * 5000 < value <= 5000


def test_ess_of_autocorrelated_draws():
    gen = np.random.default_rng(1)
    phi, n = 0.9, 50_000
    trace = np.empty(n)
    trace[0] = gen.normal()
    for t in range(1, n):
        trace[t] = phi * trace[t - 1] + gen.normal()
    expected = n * (1 - phi) / (1 + phi)
    assert autoregressive_ess(trace) == pytest.approx(expected, rel=0.3)


def test_std_smc_small_ising(rng, ising_2x2):
    recorder = RunRecorder(total_sites=ising_2x2.n_sites)
    _, log_z = std_smc_run(ising_2x2, 1000, rng, recorder=recorder)
    assert log_z == pytest.approx(brute_force_log_z(ising_2x2), abs=0.1)
    assert recorder.nodes["flat"].n_temperatures >= 1


def test_std_smc_zero_coupling_takes_one_step(rng):
    model = IsingLattice(2, 0.0)
    recorder = RunRecorder(total_sites=model.n_sites)
    _, log_z = std_smc_run(model, 64, rng, recorder=recorder)
    assert recorder.nodes["flat"].n_temperatures == 1
    assert log_z == pytest.approx(4 * np.log(2.0))


def test_postorder_small_ising(rng, ising_2x2):
    _, log_z = postorder_smc_run(lattice_decompose(ising_2x2), 2000, rng)
    assert log_z == pytest.approx(brute_force_log_z(ising_2x2), abs=0.1)


def test_postorder_single_leaf_matches_divide_and_conquer(rng):
    tree = lattice_decompose(IsingLattice(1, 0.5))
    post_pop, post_z = postorder_smc_run(tree, 16, rng)
    dc_pop, dc_z = dc_sir(tree, 16, rng)
    np.testing.assert_array_equal(post_pop.states, dc_pop.states)
    assert post_z == dc_z


def test_mh_single_site_magnetization_is_zero(rng):
    model = IsingLattice(1, 0.4)
    result = mh_chain_run(model, single_flip_kernel(model), 2000, 100, rng)
    assert result.estimates["magnetization"][0] == pytest.approx(0.0, abs=0.05)
    assert result.diagnostics.samples_retained == 1900


def test_mh_expected_energy(rng, ising_2x2):
    result = mh_chain_run(ising_2x2, single_flip_kernel(ising_2x2), 6000, 500, rng, n_chains=4)
    exact = brute_force_expectation(ising_2x2, ising_2x2.energy)
    energy = result.traces["energy"]
    ess = result.diagnostics.ess["energy"].sum()
    se = energy.std() / np.sqrt(ess)
    assert energy.mean() == pytest.approx(exact, abs=4 * se + 1e-9)
    assert 0.0 < result.diagnostics.acceptance_rate < 1.0


def test_mh_tracks_sites(rng, ising_2x2):
    result = mh_chain_run(ising_2x2, single_flip_kernel(ising_2x2), 50, 10, rng, n_chains=3, track_sites=(0, 3))
    assert result.traces["site:0"].shape == (40, 3)
    assert result.estimates["site_means"].shape == (3, 4)


def test_mh_needs_post_burn_in_sweeps(rng, ising_2x2):
    with pytest.raises(DcSmcError):
        mh_chain_run(ising_2x2, single_flip_kernel(ising_2x2), 10, 10, rng)


def test_gibbs_matches_sampler_posterior(rng, two_leaf_hier):
    result = gibbs_run(two_leaf_hier, 6000, rng, track_nodes=("a", "b", "root"))
    pop, _ = dc_sir(hier_decompose(two_leaf_hier), 5000, SeedPath(99))
    for column, node_id in enumerate(("a", "b")):
        assert result.estimates[f"mean:{node_id}"] == pytest.approx(weighted_mean(pop, pop.states[:, column]), abs=0.1)
    assert result.diagnostics.burn_in == 600
    assert set(result.diagnostics.ess) == {"a", "b", "root", "log_target"}
    assert np.all(result.traces["root"] > 0)


def test_gibbs_rejects_unknown_nodes(rng, two_leaf_hier):
    with pytest.raises(ConfigError):
        gibbs_run(two_leaf_hier, 20, rng, track_nodes=("nowhere",))


def test_gibbs_is_deterministic(rng, two_leaf_hier):
    first = gibbs_run(two_leaf_hier, 40, rng, track_nodes=("a",))
    second = gibbs_run(two_leaf_hier, 40, rng, track_nodes=("a",))
    np.testing.assert_array_equal(first.traces["a"], second.traces["a"])


@pytest.mark.slow
def test_mixture_annealing_spends_the_fewest_mcmc_updates():
    model = IsingLattice(8, 0.4407)
    tree = lattice_decompose(model)
    effort = {}
    for method in ("std-smc", "dc-ann", "dc-mix-ann"):
        recorder = RunRecorder(total_sites=model.n_sites)
        if method == "std-smc":
            std_smc_run(model, 256, SeedPath(40), recorder=recorder)
        else:
            dc_sir(tree, 256, SeedPath(40), step=build_step(method), recorder=recorder)
        effort[method] = recorder.mcmc_updates_per_site
    assert effort["dc-mix-ann"] < effort["std-smc"]
    assert effort["dc-mix-ann"] < effort["dc-ann"]
