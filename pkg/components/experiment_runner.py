"""
Experiment Runner
-----------------
Reads an experiment config, runs the requested method for a number of
replicates with derived seeds, and writes one CSV row per replicate plus a
JSON summary with box-plot statistics.
"""

import configparser
import json
import time
from dataclasses import dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from config.constants import (
    CUT_RULES,
    DC_METHODS,
    HIERARCHICAL_METHODS,
    LATTICE_METHODS,
    MESSAGES,
    METHODS,
    RESAMPLING_SCHEMES,
    RESULTS_CSV,
    SUMMARY_JSON,
)
from config.settings import (
    DEFAULT_ALPHA_STAR_CESS,
    DEFAULT_CESS_THRESHOLD,
    DEFAULT_MCMC_SWEEPS,
    DEFAULT_RESAMPLE_ESS_FRACTION,
    DEFAULT_RESAMPLING_SCHEME,
    MIXTURE_BUDGET,
    N_JOBS,
)
from services.annealing import build_step, method_settings
from services.baselines import gibbs_run, mh_chain_run, postorder_smc_run, std_smc_run
from services.dc_tree import dc_sir
from services.distributed import assign_subtrees, run_distributed
from services.errors import ConfigError, DcSmcError
from services.hierarchical_model import HierarchicalBinomial, column_layout, hier_reinstantiate_theta
from services.lattice import site_ordered
from services.model_factory import ModelConfig, build_model, build_tree
from services.particles import SeedPath, ess, weighted_moments
from services.transport import parse_roster
from utils.file_handler import write_results
from utils.logger import dcsmc_logger
from utils.run_state import RunRecorder

CSV_COLUMNS = [
    "replicate", "method", "n", "seed", "log_z", "ess", "expected_energy", "posterior",
    "mcmc_updates_per_site", "alpha_star_by_level", "n_temperatures", "transmitted_states",
    "wall_clock_s", "error",
]
TIMING_COLUMNS = ("wall_clock_s",)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    method: str = "dc-sir"
    resampling: str = DEFAULT_RESAMPLING_SCHEME
    sweeps: int = DEFAULT_MCMC_SWEEPS
    mixture_budget: int = MIXTURE_BUDGET
    adaptive_child_resampling: bool = False
    n_particles: int = 256
    iterations: int = 1000
    burn_in_fraction: float = 0.1
    replicates: int = 1
    seed: int = 1
    n_jobs: int = N_JOBS
    cess_threshold: float = DEFAULT_CESS_THRESHOLD
    alpha_star_cess: float = DEFAULT_ALPHA_STAR_CESS
    resample_fraction: float = DEFAULT_RESAMPLE_ESS_FRACTION
    workers: list = field(default_factory=list)
    transport: str = ""
    workers_count: int = 0
    cut_rule: str = "shallowest"
    out_dir: str = "results"
    summary_nodes: list = field(default_factory=list)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        family = HIERARCHICAL_METHODS if self.model.kind == "hier" else LATTICE_METHODS
        if self.method not in family:
            raise ConfigError(f"method {self.method!r} does not apply to {self.model.kind} models")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if self.n_particles < 1 or self.iterations < 1:
            raise ConfigError("n_particles and iterations must be positive")
        for name in ("cess_threshold", "alpha_star_cess", "resample_fraction"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {value}")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ConfigError("burn_in_fraction must lie in [0, 1)")
        if self.resampling not in RESAMPLING_SCHEMES:
            raise ConfigError(f"unknown resampling scheme {self.resampling!r}")
        if self.transport not in ("", "inprocess", "socket"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.cut_rule not in CUT_RULES:
            raise ConfigError(f"unknown cut rule {self.cut_rule!r}")

    @property
    def distributed(self):
        return self.method in DC_METHODS and (bool(self.workers) or self.transport == "inprocess")

    def thresholds(self):
        return {
            "scheme": self.resampling,
            "cess_threshold": self.cess_threshold,
            "alpha_star_cess": self.alpha_star_cess,
            "resample_fraction": self.resample_fraction,
            "sweeps": self.sweeps,
            "mixture_budget": self.mixture_budget,
            "adaptive_child_resampling": self.adaptive_child_resampling,
        }


# Config file layout: section -> ExperimentConfig fields stored there
SECTIONS = {
    "method": ("method", "resampling", "sweeps", "mixture_budget", "adaptive_child_resampling"),
    "run": ("n_particles", "iterations", "burn_in_fraction", "replicates", "seed", "n_jobs"),
    "thresholds": ("cess_threshold", "alpha_star_cess", "resample_fraction"),
    "distributed": ("workers", "transport", "workers_count", "cut_rule"),
    "output": ("out_dir", "summary_nodes"),
}
_SECTION_KEYS = {
    "method": {"resampling": "resampling", "method": "name"},
    "thresholds": {"cess_threshold": "cess", "alpha_star_cess": "alpha_star_cess",
                   "resample_fraction": "resample_fraction"},
    "output": {"out_dir": "dir", "summary_nodes": "summary_nodes"},
}


def _key_for(section, name):
    return _SECTION_KEYS.get(section, {}).get(name, name)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def serialize_config(config):
    """Config file text for an ExperimentConfig."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["model"] = {k: _format(v) for k, v in config.model.to_dict().items()}
    for section, names in SECTIONS.items():
        parser[section] = {_key_for(section, n): _format(getattr(config, n)) for n in names}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in parser[section].items())
        lines.append("")
    return "\n".join(lines)


def parse_config(text):
    """
    ExperimentConfig from config file text.

    Missing sections and keys take their defaults; unknown keys are errors.

    Raises:
        ConfigError: unknown key, unparsable value, or invalid combination
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unreadable config: {e}") from e

    model = ModelConfig.from_dict(dict(parser["model"])) if parser.has_section("model") else ModelConfig()
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for section, names in SECTIONS.items():
        if not parser.has_section(section):
            continue
        keys = {_key_for(section, n): n for n in names}
        unknown = set(parser[section]) - set(keys)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
        for key, name in keys.items():
            if key not in parser[section]:
                continue
            try:
                if types[name] is bool:
                    values[name] = parser.getboolean(section, key)
                elif types[name] is list:
                    values[name] = [v.strip() for v in parser[section][key].split(",") if v.strip()]
                else:
                    values[name] = types[name](parser[section][key])
            except ValueError as e:
                raise ConfigError(f"[{section}] {key}: {e}") from e
    unknown_sections = set(parser.sections()) - set(SECTIONS) - {"model"}
    if unknown_sections:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown_sections))}")
    return ExperimentConfig(model=model, **values)


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text())


def replicate_seed(master_seed, replicate):
    """64-bit seed of one replicate, derived from the master seed."""
    seq = np.random.SeedSequence(master_seed & ((1 << 64) - 1), spawn_key=(replicate,))
    low, high = seq.generate_state(2, dtype=np.uint32)
    return int(low) | (int(high) << 32)


@lru_cache(maxsize=4)
def _model_and_tree(model_items):
    cfg = ModelConfig.from_dict(dict(model_items))
    model = build_model(cfg)
    return model, build_tree(model, cfg)


def _posterior_summaries(model, pop, rng, node_ids):
    """Weighted mean and variance of theta (and sigma2 at internal nodes) per requested node."""
    if not node_ids:
        return {}
    layout = column_layout(model)
    unknown = [n for n in node_ids if n not in layout]
    if unknown:
        raise ConfigError(f"unknown summary node(s): {', '.join(unknown)}")
    thetas = hier_reinstantiate_theta(model, pop.states, rng, node_ids)
    out = {}
    internal = {n.node_id for n in model.root.walk() if not n.is_leaf}
    for node_id in node_ids:
        mean, var = weighted_moments(pop, thetas[node_id])
        out[f"theta:{node_id}"] = {"mean": mean, "var": var}
        if node_id in internal:
            mean, var = weighted_moments(pop, pop.states[:, layout[node_id]])
            out[f"sigma2:{node_id}"] = {"mean": mean, "var": var}
    return out


def _smc_row(config, model, tree, rng):
    recorder = RunRecorder(total_sites=getattr(model, "n_sites", len(getattr(model, "leaves", [])) or 1))
    transmitted = 0
    if config.method == "std-smc":
        pop, log_z = std_smc_run(model, config.n_particles, rng, recorder=recorder, **config.thresholds())
    elif config.method == "postorder":
        pop, log_z = postorder_smc_run(tree, config.n_particles, rng, config.resampling)
    elif config.distributed:
        count = len(config.workers) or max(config.workers_count, 1)
        assignment = assign_subtrees(tree, count, config.workers or None, config.cut_rule)
        pop, log_z, transmitted, worker_recorder = run_distributed(
            tree, config.n_particles, assignment, rng,
            transport="socket" if config.workers else "inprocess",
            method=config.method,
            settings=method_settings(config.method, **config.thresholds()),
            model_tag=model.tag,
            model_config=config.model.to_dict(),
        )
        worker_recorder.total_sites = recorder.total_sites
        recorder = worker_recorder
    else:
        step = build_step(config.method, **config.thresholds())
        pop, log_z = dc_sir(tree, config.n_particles, rng, step=step, recorder=recorder)

    row = {
        "log_z": log_z,
        "ess": ess(pop.log_weights),
        "mcmc_updates_per_site": recorder.mcmc_updates_per_site,
        "alpha_star_by_level": json.dumps(recorder.alpha_star_by_level(), sort_keys=True),
        "n_temperatures": recorder.n_temperatures,
        "transmitted_states": transmitted,
    }
    if isinstance(model, HierarchicalBinomial):
        row["posterior"] = json.dumps(_posterior_summaries(model, pop, rng, config.summary_nodes), sort_keys=True)
    else:
        # Tree states follow leaf order; std-smc already runs in site order
        states = pop.states if config.method == "std-smc" else site_ordered(tree, pop.states)
        row["expected_energy"] = weighted_moments(pop, model.energy(states))[0]
    return row


def _chain_row(config, model, rng):
    burn_in = int(config.iterations * config.burn_in_fraction)
    if config.method == "gibbs":
        result = gibbs_run(model, config.iterations, rng, burn_in=burn_in, track_nodes=config.summary_nodes)
        posterior = {}
        for node_id in config.summary_nodes:
            trace = result.traces[node_id]
            name = "theta" if any(n.node_id == node_id and n.is_leaf for n in model.leaves) else "sigma2"
            posterior[f"{name}:{node_id}"] = {"mean": float(trace.mean()), "var": float(trace.var())}
        return {
            "ess": result.diagnostics.ess["log_target"],
            "posterior": json.dumps(posterior, sort_keys=True),
            "mcmc_updates_per_site": float(config.iterations),
        }
    result = mh_chain_run(model, None, config.iterations, burn_in, rng)
    return {
        "ess": float(result.diagnostics.ess["energy"][0]),
        "expected_energy": float(result.estimates["expected_energy"][0]),
        "mcmc_updates_per_site": float(config.iterations),
    }


def run_replicate(config, replicate):
    """
    One replicate as a CSV row dict; any failure lands in the `error` column.
    """
    seed = replicate_seed(config.seed, replicate)
    rng = SeedPath(seed)
    is_chain = config.method in ("mh", "gibbs")
    row = {column: np.nan for column in CSV_COLUMNS}
    row.update({
        "replicate": replicate,
        "method": config.method,
        "n": config.iterations if is_chain else config.n_particles,
        "seed": seed,
        "posterior": "",
        "alpha_star_by_level": "",
        "transmitted_states": 0,
        "error": "",
    })
    started = time.perf_counter()
    try:
        model, tree = _model_and_tree(tuple(sorted(config.model.to_dict().items())))
        row.update(_chain_row(config, model, rng) if is_chain else _smc_row(config, model, tree, rng))
    except DcSmcError as e:
        dcsmc_logger.error(MESSAGES["REPLICATE_FAILED"].format(replicate=replicate, error=e))
        row["error"] = str(e)
    except Exception as e:
        # Non-engine failures stay in this replicate's row
        dcsmc_logger.error(MESSAGES["REPLICATE_FAILED"].format(replicate=replicate, error=repr(e)))
        row["error"] = f"{type(e).__name__}: {e}"
    row["wall_clock_s"] = time.perf_counter() - started
    return row


def _box_stats(values):
    values = pd.Series(values, dtype=np.float64).dropna()
    if values.empty:
        return {"count": 0}
    return {
        "count": int(values.count()),
        "min": float(values.min()),
        "q1": float(values.quantile(0.25)),
        "median": float(values.median()),
        "q3": float(values.quantile(0.75)),
        "max": float(values.max()),
        "mean": float(values.mean()),
        "sd": float(values.std(ddof=1)) if values.count() > 1 else 0.0,
    }


def summarize(frame):
    """Box-plot statistics of log Z and the test-function estimates, per method."""
    summary = {}
    for method, group in frame.groupby("method", sort=True):
        ok = group[group["error"] == ""]
        entry = {
            "replicates": int(len(group)),
            "failed": int(len(group) - len(ok)),
            "log_z": _box_stats(ok["log_z"]),
        }
        if ok["expected_energy"].notna().any():
            entry["expected_energy"] = _box_stats(ok["expected_energy"])
        posteriors = [json.loads(p) for p in ok["posterior"] if p]
        for key in sorted(posteriors[0]) if posteriors else []:
            entry[f"mean:{key}"] = _box_stats([p[key]["mean"] for p in posteriors])
        summary[method] = entry
    return summary


def run_experiment(config, out_dir=None):
    """
    Run every replicate and write the result files.

    Replicates run through joblib with config.n_jobs workers; rows are
    written in replicate order whatever order they finish in.

    Returns:
        dict with the results frame, summary, output paths and an 'error'
        entry (None unless every replicate failed)
    """
    out_dir = Path(out_dir or config.out_dir)
    dcsmc_logger.info(MESSAGES["RUN_STARTED"].format(
        replicates=config.replicates, method=config.method, model=config.model.kind))

    rows = Parallel(n_jobs=config.n_jobs)(
        delayed(run_replicate)(config, r) for r in range(config.replicates)
    )
    frame = pd.DataFrame(rows, columns=CSV_COLUMNS)
    summary = summarize(frame)
    csv_path, json_path = write_results(frame, summary, out_dir, RESULTS_CSV, SUMMARY_JSON)
    dcsmc_logger.info(MESSAGES["RUN_FINISHED"].format(rows=len(frame), path=csv_path))

    failed = int((frame["error"] != "").sum())
    return {
        "frame": frame,
        "summary": summary,
        "csv": csv_path,
        "json": json_path,
        "error": f"all {failed} replicate(s) failed" if failed == len(frame) else None,
    }


def apply_cli_overrides(config, kind, seed=None, out=None, workers=None, transport=None, workers_count=None):
    """Config with the command line's verb and flags applied on top of the file."""
    model = ModelConfig.from_dict({**config.model.to_dict(), "kind": kind})
    changes = {f.name: getattr(config, f.name) for f in fields(ExperimentConfig)}
    changes["model"] = model
    family = HIERARCHICAL_METHODS if kind == "hier" else LATTICE_METHODS
    if config.method not in family:
        dcsmc_logger.warning(f"{config.method} does not apply to {kind} models; using dc-sir")
        changes["method"] = "dc-sir"
    if seed is not None:
        changes["seed"] = seed
    if out is not None:
        changes["out_dir"] = out
    if workers:
        changes["workers"] = parse_roster(workers)
    if transport is not None:
        changes["transport"] = transport
    if workers_count is not None:
        changes["workers_count"] = workers_count
    return ExperimentConfig(**changes)


__all__ = [
    "CSV_COLUMNS",
    "ExperimentConfig",
    "apply_cli_overrides",
    "load_config",
    "parse_config",
    "replicate_seed",
    "run_experiment",
    "run_replicate",
    "serialize_config",
    "summarize",
]
