"""
Model Factory
-------------
Builds a model and its decomposition tree from the `[model]` section of an
experiment config. Workers call the same functions on the section they
receive, so every process ends up with an identical tree.
"""

from dataclasses import asdict, dataclass, fields

from services.errors import ConfigError
from services.gaussian_lattice import GaussianSquaredLattice, simulate_gsm_observations
from services.hierarchical_model import (
    HierarchicalBinomial,
    hier_decompose,
    synthetic_hierarchical_dataset,
)
from services.ising_model import IsingLattice
from services.lattice import flat_decompose, lattice_decompose
from utils.file_handler import ingest_dataset, load_observation_grid

MODEL_KINDS = ("ising", "gsm", "hier")


@dataclass
class ModelConfig:
    kind: str = "ising"
    M: int = 8
    scheme: str = "bisection"
    beta: float = 0.4
    lambda1: float = 1.0
    lambda2: float = 0.5
    obs_sd: float = 0.5
    step_sd: float = 0.132
    observations: str = ""
    dataset: str = ""
    data_seed: int = 1

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name: f.type for f in fields(cls)}
        unknown = set(data) - set(names)
        if unknown:
            raise ConfigError(f"unknown model option(s): {', '.join(sorted(unknown))}")
        typed = {}
        for key, value in data.items():
            caster = names[key]
            try:
                typed[key] = caster(value)
            except (TypeError, ValueError):
                raise ConfigError(f"model option {key}={value!r} is not a {caster.__name__}") from None
        return cls(**typed)


def build_model(cfg):
    """Model object for a ModelConfig."""
    if cfg.kind == "ising":
        return IsingLattice(cfg.M, cfg.beta)
    if cfg.kind == "gsm":
        if cfg.observations:
            y = load_observation_grid(cfg.observations, cfg.M)
        else:
            _, y = simulate_gsm_observations(cfg.M, cfg.lambda1, cfg.lambda2, cfg.obs_sd, cfg.data_seed)
        return GaussianSquaredLattice(cfg.M, cfg.lambda1, cfg.lambda2, cfg.obs_sd, y, step_sd=cfg.step_sd)
    records = ingest_dataset(cfg.dataset) if cfg.dataset else synthetic_hierarchical_dataset(cfg.data_seed)
    return HierarchicalBinomial.from_records(records)


def build_tree(model, cfg):
    """Decomposition tree for a model; 'flat' puts every lattice site under the root."""
    if isinstance(model, HierarchicalBinomial):
        return hier_decompose(model)
    if cfg.scheme == "flat":
        return flat_decompose(model)
    return lattice_decompose(model, cfg.scheme)


def tree_from_config(data):
    """(model, tree) from a plain dict, as shipped inside worker tasks."""
    cfg = ModelConfig.from_dict(data)
    model = build_model(cfg)
    return model, build_tree(model, cfg)
