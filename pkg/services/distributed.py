"""
Distributed Execution
---------------------
Runs the divide-and-conquer recursion across workers at the granularity of
whole populations.

The tree is cut at a depth d. Every vertex at depth d (and every leaf
above it) is a cut vertex owning its whole subtree, and cut vertices are
dealt round-robin to the workers by node id. A vertex above the cut is
computed by the worker owning its first child, which receives the other
children's populations as envelopes. Seeds are keyed by tree path, so the
root population is bit-identical to a serial run whatever the layout.
"""

import threading
import time
from dataclasses import dataclass, field

from config.constants import (
    CUT_RULES,
    MSG_DONE,
    MSG_ERROR,
    MSG_PING,
    MSG_PONG,
    MSG_POPULATION,
    MSG_STOP,
    MSG_TASK,
)
from config.settings import WORKER_TIMEOUT_MS
from services.annealing import AnnealedStep, MethodSettings
from services.dc_tree import BasicStep, dc_sir, node_at, node_step, tree_levels
from services.errors import ConfigError, DcSmcError, NodeFailure, WorkerUnreachable
from services.model_factory import tree_from_config
from services.particles import SeedPath, fold_logz
from services.transport import InProcessHub, Message, SocketTransport
from services.wire_codec import decode_population, encode_population
from utils.logger import dcsmc_logger
from utils.run_state import RunRecorder

DRIVER = "driver"


def _key(path):
    return ".".join(str(p) for p in path)


def _unkey(key):
    return tuple(int(p) for p in key.split(".")) if key else ()


@dataclass
class WorkerAssignment:
    """
    Which worker computes which part of the tree.

    vertex_worker maps each cut vertex's path (dot-joined child positions)
    to a worker index; roster holds the workers' addresses.
    """

    cut_depth: int
    vertex_worker: dict
    roster: list
    above_cut: dict = field(default_factory=dict)

    @property
    def worker_count(self):
        return len(self.roster)

    def owner(self, path):
        """Worker computing the vertex at `path`."""
        path = tuple(path)
        for depth in range(len(path), -1, -1):
            key = _key(path[:depth])
            if key in self.vertex_worker:
                return self.vertex_worker[key]
        return self.above_cut[_key(path)]

    def is_cut_vertex(self, path):
        return _key(path) in self.vertex_worker

    def to_dict(self):
        return {"cut_depth": self.cut_depth, "vertex_worker": dict(self.vertex_worker),
                "roster": list(self.roster), "above_cut": dict(self.above_cut)}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data["cut_depth"]), {k: int(v) for k, v in data["vertex_worker"].items()},
                   list(data["roster"]), {k: int(v) for k, v in data.get("above_cut", {}).items()})


def _paths_by_depth(root):
    levels = {0: [(root, ())]}
    depth = 0
    while levels[depth]:
        levels[depth + 1] = [
            (child, path + (i,))
            for node, path in levels[depth]
            for i, child in enumerate(node.children)
        ]
        depth += 1
    del levels[depth]
    return levels


def cut_depth_for(root, worker_count, rule="shallowest"):
    """
    Depth at which the tree is split between workers.

    "shallowest" picks the first depth with at least worker_count vertices
    (else the deepest level); "deepest" picks the last such depth.
    """
    if rule not in CUT_RULES:
        raise ConfigError(f"unknown cut rule {rule!r}; choose from {', '.join(CUT_RULES)}")
    levels = tree_levels(root)
    wide = [depth for depth, vertices in enumerate(levels) if len(vertices) >= worker_count]
    if not wide:
        return len(levels) - 1
    return wide[0] if rule == "shallowest" else wide[-1]


def assign_subtrees(tree, worker_count, roster=None, rule="shallowest"):
    """
    Static layout of the tree over worker_count workers.

    With more workers than cut vertices the extra workers stay idle.
    """
    if worker_count < 1:
        raise ConfigError("worker_count must be at least 1")
    roster = list(roster) if roster is not None else [f"inproc://worker-{i}" for i in range(worker_count)]
    if len(roster) != worker_count:
        raise ConfigError(f"roster has {len(roster)} address(es) for {worker_count} worker(s)")

    depth = cut_depth_for(tree, worker_count, rule)
    levels = _paths_by_depth(tree)
    cut = list(levels[depth])
    # Leaves that end above the cut are computed whole by one worker too
    for d in range(depth):
        cut.extend((node, path) for node, path in levels[d] if node.is_leaf)
    cut.sort(key=lambda item: item[0].node_id)
    vertex_worker = {_key(path): i % worker_count for i, (_, path) in enumerate(cut)}

    above = {}
    for d in range(depth - 1, -1, -1):
        for node, path in levels[d]:
            if node.is_leaf:
                continue
            first = path + (0,)
            key = _key(first)
            above[_key(path)] = vertex_worker[key] if key in vertex_worker else above[key]

    assignment = WorkerAssignment(depth, vertex_worker, roster, above)
    dcsmc_logger.debug(f"Cut depth {depth}: {len(cut)} cut vertices over {worker_count} worker(s)")
    return assignment


def edges_above_cut(tree, assignment):
    """Tree edges whose child end is a cut vertex or above it."""
    count = 0
    for depth, vertices in _paths_by_depth(tree).items():
        if depth == 0:
            continue
        for _, path in vertices:
            if assignment.is_cut_vertex(path) or _key(path) in assignment.above_cut:
                count += 1
    return count


def build_node_step(spec):
    """Node update from a {'method', 'settings'} dict."""
    settings = MethodSettings.from_dict(spec.get("settings", {}))
    if spec.get("method", "dc-sir") == "dc-sir":
        fraction = settings.resample_fraction if settings.adaptive_child_resampling else None
        return BasicStep(settings.scheme, fraction)
    return AnnealedStep(settings)


def step_spec(method, settings):
    return {"method": method, "settings": settings.to_dict()}


class WorkerRuntime:
    """
    One worker's event loop.

    tree_factory(task_meta) returns the decomposition tree for a task; by
    default the tree is rebuilt from the task's model section.
    """

    def __init__(self, transport, tree_factory=None, timeout_ms=WORKER_TIMEOUT_MS):
        self.transport = transport
        self.tree_factory = tree_factory or (lambda meta: tree_from_config(meta["model"])[1])
        self.timeout_ms = timeout_ms
        # Populations from faster peers can overtake this worker's own task
        self.backlog = []

    def serve(self, max_tasks=None):
        """Handle tasks until a stop message, or until max_tasks have been run."""
        handled = 0
        while max_tasks is None or handled < max_tasks:
            message = self.transport.receive(timeout_ms=None)
            if message.kind == MSG_STOP:
                dcsmc_logger.info(f"Worker {self.transport.address} stopping")
                return handled
            if message.kind == MSG_PING:
                self.transport.send(message.meta["reply_to"], Message(MSG_PONG, {"worker": self.transport.address}))
                continue
            if message.kind == MSG_POPULATION:
                self.backlog.append(message)
                continue
            if message.kind != MSG_TASK:
                dcsmc_logger.warning(f"Worker ignoring unexpected {message.kind!r} message")
                continue
            self.handle_task(message.meta)
            handled += 1
        return handled

    def handle_task(self, meta):
        reply_to = meta["reply_to"]
        try:
            stats = self._run_task(meta)
            self.transport.send(reply_to, Message(MSG_DONE, {"worker": meta["worker_index"], **stats}))
        except Exception as e:
            dcsmc_logger.error(f"Worker {meta.get('worker_index')} failed: {e}")
            node_id = e.node_id if isinstance(e, NodeFailure) else ""
            self.transport.send(reply_to, Message(MSG_ERROR, {
                "worker": meta.get("worker_index"), "error": str(e), "node_id": node_id,
            }))

    def _run_task(self, meta):
        me = int(meta["worker_index"])
        assignment = WorkerAssignment.from_dict(meta["assignment"])
        tree = self.tree_factory(meta)
        step = build_node_step(meta["step"])
        n = int(meta["n_particles"])
        rng = SeedPath.from_dict(meta["seed"])
        model_tag = meta["model_tag"]
        recorder = RunRecorder()
        results = {}

        reply_to = meta["reply_to"]
        pending = {_unkey(k) for k, w in assignment.above_cut.items() if w == me}
        transmitted = 0

        def deliver(path, pop):
            nonlocal transmitted
            if not path:
                envelope = encode_population(pop, tree.node_id, model_tag)
                self.transport.send(reply_to, Message(MSG_POPULATION, {"path": ""}, envelope.payload))
                return
            parent = path[:-1]
            owner = assignment.owner(parent)
            if owner == me:
                results[path] = pop
                try_parent(parent)
                return
            node = node_at(tree, path)
            envelope = encode_population(pop, node.node_id, model_tag)
            self.transport.send(assignment.roster[owner], Message(MSG_POPULATION, {"path": _key(path)}, envelope.payload))
            transmitted += pop.size
            dcsmc_logger.debug(f"Worker {me} sent {node.node_id} to worker {owner}")

        def try_parent(path):
            if path not in pending:
                return
            node = node_at(tree, path)
            child_paths = [path + (c,) for c in range(len(node.children))]
            if not all(p in results for p in child_paths):
                return
            pending.discard(path)
            child_pops = [results.pop(p) for p in child_paths]
            pop = node_step(node, child_pops, rng.descend(path), n, step, recorder)
            deliver(path, pop)

        cut = sorted((_unkey(k) for k, w in assignment.vertex_worker.items() if w == me), key=lambda p: (len(p), p))
        for path in cut:
            subtree = node_at(tree, path)
            pop, _ = dc_sir(subtree, n, rng.descend(path), step=step, recorder=recorder)
            deliver(path, pop)

        while pending:
            if self.backlog:
                message = self.backlog.pop(0)
            else:
                message = self.transport.receive(timeout_ms=self.timeout_ms)
            if message.kind == MSG_STOP:
                raise DcSmcError("stopped before the task completed")
            if message.kind != MSG_POPULATION:
                continue
            path = _unkey(message.meta["path"])
            results[path] = decode_population(message.payload).population
            try_parent(path[:-1])

        self.backlog.clear()
        recorder.add_transmitted(transmitted)
        return {"recorder": recorder.to_dict()}


def _task(assignment, index, n_particles, rng, spec, model_tag, model_config, reply_to):
    return {
        "worker_index": index,
        "assignment": assignment.to_dict(),
        "n_particles": n_particles,
        "seed": rng.to_dict(),
        "step": spec,
        "model_tag": model_tag,
        "model": model_config,
        "reply_to": reply_to,
    }


def _collect(driver, assignment, timeout_ms):
    """Wait for the root population and one completion per worker."""
    pop = None
    recorder = RunRecorder()
    done = set()
    while pop is None or len(done) < assignment.worker_count:
        message = driver.receive(timeout_ms=timeout_ms)
        if message.kind == MSG_POPULATION:
            pop = decode_population(message.payload).population
        elif message.kind == MSG_DONE:
            done.add(message.meta["worker"])
            recorder.absorb(message.meta["recorder"])
        elif message.kind == MSG_ERROR:
            node = message.meta.get("node_id")
            if node:
                raise NodeFailure(node, message.meta["error"])
            raise DcSmcError(f"worker {message.meta.get('worker')} failed: {message.meta['error']}")
    return pop, recorder


def run_distributed(tree, n_particles, assignment, rng, transport="inprocess", method="dc-sir",
                    settings=None, model_tag="ising", model_config=None, timeout_ms=WORKER_TIMEOUT_MS):
    """
    Run the recursion over the workers in `assignment`.

    With the in-process transport, one thread per worker shares `tree`.
    With the socket transport the roster must point at running workers,
    which rebuild the tree from model_config.

    Returns:
        (root population, log Z estimate, transmitted particle-states, RunRecorder)

    Raises:
        WorkerUnreachable: a worker did not answer within timeout_ms
        NodeFailure: a worker reported an engine error at a node
    """
    settings = settings or MethodSettings()
    spec = step_spec(method, settings)
    started = time.perf_counter()

    if transport == "inprocess":
        hub = InProcessHub()
        driver = hub.endpoint(DRIVER)
        threads = []
        for address in assignment.roster:
            runtime = WorkerRuntime(hub.endpoint(address), tree_factory=lambda meta: tree, timeout_ms=timeout_ms)
            thread = threading.Thread(target=runtime.serve, kwargs={"max_tasks": 1}, daemon=True)
            thread.start()
            threads.append(thread)
    elif transport == "socket":
        if model_config is None:
            raise ConfigError("the socket transport needs the model config to ship to workers")
        driver = SocketTransport()
        threads = []
    else:
        raise ConfigError(f"unknown transport {transport!r}")

    try:
        for index, address in enumerate(assignment.roster):
            meta = _task(assignment, index, n_particles, rng, spec, model_tag, model_config, driver.address)
            driver.send(address, Message(MSG_TASK, meta))
        pop, recorder = _collect(driver, assignment, timeout_ms)
    finally:
        driver.close()
    for thread in threads:
        thread.join(timeout=timeout_ms / 1000)

    log_z = fold_logz(pop)
    dcsmc_logger.info(
        f"Distributed run over {assignment.worker_count} worker(s) finished in "
        f"{time.perf_counter() - started:.2f}s: log Z = {log_z:.6f}, "
        f"{recorder.transmitted_states} state(s) transmitted"
    )
    return pop, log_z, recorder.transmitted_states, recorder


def ping_workers(roster, timeout_ms=2000):
    """Reachability of each address in the roster: {address: bool}."""
    status = {}
    with SocketTransport(send_timeout_ms=timeout_ms) as driver:
        for address in roster:
            try:
                driver.send(address, Message(MSG_PING, {"reply_to": driver.address}))
                reply = driver.receive(timeout_ms=timeout_ms)
                status[address] = reply.kind == MSG_PONG
            except WorkerUnreachable:
                status[address] = False
    return status

