import threading

import numpy as np
import pytest

from config.constants import MSG_ERROR, MSG_STOP
from services.annealing import build_step, method_settings
from services.dc_tree import dc_sir
from services.distributed import (
    WorkerAssignment,
    WorkerRuntime,
    assign_subtrees,
    cut_depth_for,
    edges_above_cut,
    ping_workers,
    run_distributed,
)
from services.errors import ConfigError
from services.hierarchical_model import HierarchicalBinomial, hier_decompose, synthetic_hierarchical_dataset
from services.ising_model import IsingLattice
from services.lattice import lattice_decompose
from services.model_factory import ModelConfig, tree_from_config
from services.transport import InProcessHub, Message, SocketTransport
from tests.helpers import gaussian_chain

N = 64


@pytest.fixture
def ising_8x8_tree():
    return lattice_decompose(IsingLattice(8, 0.3))


def assert_bit_identical(a, b):
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.log_weights, b.log_weights)
    assert a.log_z_hat == b.log_z_hat


def test_cut_depth_examples(ising_8x8_tree):
    assert cut_depth_for(ising_8x8_tree, 1) == 0
    assert cut_depth_for(ising_8x8_tree, 2) == 1
    assert cut_depth_for(ising_8x8_tree, 4) == 2
    assert cut_depth_for(ising_8x8_tree, 3) == 2


def test_deepest_cut_rule(ising_8x8_tree):
    # Bisection of an 8x8 lattice has 64 leaves at depth 6
    assert cut_depth_for(ising_8x8_tree, 4, rule="deepest") == 6
    assert cut_depth_for(ising_8x8_tree, 65, rule="deepest") == 6
    with pytest.raises(ConfigError):
        cut_depth_for(ising_8x8_tree, 4, rule="middle")


def test_deepest_cut_matches_serial(rng, ising_8x8_tree):
    serial, _ = dc_sir(ising_8x8_tree, N, rng)
    assignment = assign_subtrees(ising_8x8_tree, 4, rule="deepest")
    pop, _, transmitted, _ = run_distributed(ising_8x8_tree, N, assignment, rng, timeout_ms=60_000)
    assert_bit_identical(pop, serial)
    assert transmitted <= edges_above_cut(ising_8x8_tree, assignment) * N


def test_cut_depth_falls_back_to_deepest_level():
    chain = gaussian_chain(3)
    # A chain never widens, so the cut goes to the bottom
    assert cut_depth_for(chain, 2) == 2


@pytest.mark.slow
def test_cut_depth_on_a_large_lattice():
    tree = lattice_decompose(IsingLattice(64, 0.4))
    assert cut_depth_for(tree, 32) == 5


@pytest.mark.parametrize("workers", [1, 2, 4])
def test_distributed_matches_serial(rng, ising_8x8_tree, workers):
    serial, serial_z = dc_sir(ising_8x8_tree, N, rng)
    assignment = assign_subtrees(ising_8x8_tree, workers)
    pop, log_z, transmitted, _ = run_distributed(ising_8x8_tree, N, assignment, rng, timeout_ms=60_000)
    assert_bit_identical(pop, serial)
    assert log_z == serial_z
    if workers == 1:
        assert transmitted == 0


def test_distributed_hierarchical_matches_serial(rng):
    records = synthetic_hierarchical_dataset(2, counties=3, districts=2, schools=2, years=2)
    tree = hier_decompose(HierarchicalBinomial.from_records(records))
    serial, serial_z = dc_sir(tree, N, rng)
    for workers in (2, 4):
        assignment = assign_subtrees(tree, workers)
        pop, log_z, _, _ = run_distributed(tree, N, assignment, rng, model_tag="hier", timeout_ms=60_000)
        assert_bit_identical(pop, serial)
        assert log_z == serial_z


def test_distributed_annealed_matches_serial(rng):
    tree = lattice_decompose(IsingLattice(4, 0.4))
    serial, _ = dc_sir(tree, 32, rng, step=build_step("dc-ann"))
    pop, _, _, recorder = run_distributed(
        tree, 32, assign_subtrees(tree, 2), rng,
        method="dc-ann", settings=method_settings("dc-ann"), timeout_ms=60_000,
    )
    assert_bit_identical(pop, serial)
    assert recorder.n_temperatures > 0


def test_transmitted_states_bounded_by_edges_above_cut(rng, ising_8x8_tree):
    assignment = assign_subtrees(ising_8x8_tree, 4)
    assert edges_above_cut(ising_8x8_tree, assignment) == 6
    _, _, transmitted, recorder = run_distributed(ising_8x8_tree, N, assignment, rng, timeout_ms=60_000)
    assert 0 < transmitted <= 6 * N
    assert transmitted % N == 0
    assert recorder.transmitted_states == transmitted


def test_assignment_layout(ising_8x8_tree):
    assignment = assign_subtrees(ising_8x8_tree, 4)
    assert assignment.cut_depth == 2
    assert sorted(assignment.vertex_worker.values()) == [0, 1, 2, 3]
    assert set(assignment.above_cut) == {"", "0", "1"}
    # Vertices above the cut follow their first child
    assert assignment.owner((0,)) == assignment.owner((0, 0))
    assert assignment.owner(()) == assignment.owner((0,))
    assert assignment.owner((1, 1, 0, 1)) == assignment.vertex_worker["1.1"]


def test_extra_workers_stay_idle():
    tree = gaussian_chain(2)
    assignment = assign_subtrees(tree, 3)
    assert set(assignment.vertex_worker.values()) == {0}


def test_assignment_round_trip(ising_8x8_tree):
    assignment = assign_subtrees(ising_8x8_tree, 2, roster=["tcp://a:1", "tcp://b:2"])
    assert WorkerAssignment.from_dict(assignment.to_dict()) == assignment


def test_assignment_errors(ising_8x8_tree):
    with pytest.raises(ConfigError):
        assign_subtrees(ising_8x8_tree, 0)
    with pytest.raises(ConfigError):
        assign_subtrees(ising_8x8_tree, 2, roster=["tcp://a:1"])


def test_unknown_transport_is_refused(rng, ising_8x8_tree):
    with pytest.raises(ConfigError):
        run_distributed(ising_8x8_tree, N, assign_subtrees(ising_8x8_tree, 1), rng, transport="carrier-pigeon")
    with pytest.raises(ConfigError):
        run_distributed(ising_8x8_tree, N, assign_subtrees(ising_8x8_tree, 1), rng, transport="socket")


def test_worker_reports_task_errors():
    hub = InProcessHub()
    driver = hub.endpoint("driver")
    runtime = WorkerRuntime(hub.endpoint("w0"), tree_factory=lambda meta: None, timeout_ms=1000)
    runtime.handle_task({"reply_to": "driver", "worker_index": 0})
    reply = driver.receive(timeout_ms=1000)
    assert reply.kind == MSG_ERROR
    assert reply.meta["worker"] == 0


def _serve_socket_worker(transport, max_tasks=None):
    try:
        WorkerRuntime(transport, timeout_ms=30_000).serve(max_tasks=max_tasks)
    finally:
        transport.close()


def _start_socket_workers(count, max_tasks=None):
    transports = [SocketTransport("tcp://127.0.0.1:*") for _ in range(count)]
    roster = [t.address for t in transports]
    threads = [threading.Thread(target=_serve_socket_worker, args=(t, max_tasks), daemon=True) for t in transports]
    for thread in threads:
        thread.start()
    return roster, threads


def test_socket_transport_matches_serial(rng):
    model_config = ModelConfig(kind="ising", M=4, beta=0.4).to_dict()
    _, tree = tree_from_config(model_config)
    serial, serial_z = dc_sir(tree, 32, rng)

    roster, threads = _start_socket_workers(2, max_tasks=1)
    assignment = assign_subtrees(tree, 2, roster=roster)
    pop, log_z, _, _ = run_distributed(
        tree, 32, assignment, rng, transport="socket",
        model_tag="ising", model_config=model_config, timeout_ms=30_000,
    )
    for thread in threads:
        thread.join(timeout=10)
    assert_bit_identical(pop, serial)
    assert log_z == serial_z


def test_ping_workers():
    roster, threads = _start_socket_workers(1)
    status = ping_workers(roster, timeout_ms=5000)
    assert status == {roster[0]: True}
    with SocketTransport("tcp://127.0.0.1:*") as driver:
        driver.send(roster[0], Message(MSG_STOP))
    threads[0].join(timeout=10)
    assert not threads[0].is_alive()


def test_ping_silent_address():
    # Nothing listens here; the ping times out instead of raising
    status = ping_workers(["tcp://127.0.0.1:9"], timeout_ms=200)
    assert status == {"tcp://127.0.0.1:9": False}
