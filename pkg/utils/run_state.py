"""
Run State
---------
Per-run diagnostics collected while a sampler walks the tree: per-node ESS,
the alpha-star chosen at each merge, tempering steps and MCMC work.
"""

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from services.particles import ess


@dataclass
class NodeRecord:
    node_id: str
    depth: int
    ess: float
    log_z_hat: float
    alpha_star: float | None = None
    n_temperatures: int = 0


@dataclass
class RunRecorder:
    """Accumulates diagnostics for a single replicate."""

    total_sites: int = 1
    nodes: dict = field(default_factory=dict)
    site_updates: int = 0
    transmitted_states: int = 0

    def reset(self):
        self.nodes.clear()
        self.site_updates = 0
        self.transmitted_states = 0

    def record_node(self, node_id, depth, pop, alpha_star=None, n_temperatures=0):
        self.nodes[node_id] = NodeRecord(
            node_id=node_id,
            depth=int(depth),
            ess=float(ess(pop.log_weights)),
            log_z_hat=float(pop.log_z_hat),
            alpha_star=None if alpha_star is None else float(alpha_star),
            n_temperatures=int(n_temperatures),
        )

    def add_site_updates(self, sites, sweeps=1):
        self.site_updates += int(sites) * int(sweeps)

    def add_transmitted(self, n_states):
        self.transmitted_states += int(n_states)

    @property
    def mcmc_updates_per_site(self):
        return self.site_updates / max(self.total_sites, 1)

    @property
    def n_temperatures(self):
        return sum(r.n_temperatures for r in self.nodes.values())

    def alpha_star_by_level(self):
        """Mean alpha-star per depth over merges that chose one."""
        by_level = defaultdict(list)
        for record in self.nodes.values():
            if record.alpha_star is not None:
                by_level[record.depth].append(record.alpha_star)
        return {depth: float(np.mean(v)) for depth, v in sorted(by_level.items())}

    def summary(self):
        return {
            "mcmc_updates_per_site": self.mcmc_updates_per_site,
            "alpha_star_by_level": self.alpha_star_by_level(),
            "n_temperatures": self.n_temperatures,
            "transmitted_states": self.transmitted_states,
        }

    def to_dict(self):
        return {
            "site_updates": self.site_updates,
            "transmitted_states": self.transmitted_states,
            "nodes": [vars(r) for r in self.nodes.values()],
        }

    def absorb(self, data):
        """Fold in the to_dict() output of another recorder, e.g. a worker's."""
        self.site_updates += int(data.get("site_updates", 0))
        self.transmitted_states += int(data.get("transmitted_states", 0))
        for item in data.get("nodes", []):
            self.nodes[item["node_id"]] = NodeRecord(**item)
