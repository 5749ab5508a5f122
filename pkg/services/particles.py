"""
Particle Core
-------------
Weighted particle populations, log-space weight arithmetic, resampling and
the hierarchical seed paths every random draw in the engine is keyed on.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from config.settings import DEFAULT_RESAMPLE_ESS_FRACTION
from services.errors import AllWeightsZero, DimensionMismatch, DcSmcError

_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class SeedPath:
    """
    Deterministic key for a random stream.

    The stream for (master_seed, path, stage, index) is a Philox generator
    keyed by a SeedSequence whose spawn key encodes the tree path, so the
    same node draws the same numbers whichever process computes it.
    """

    master_seed: int
    path: tuple = ()
    stage: int = 0
    index: int = 0

    def child(self, position):
        return SeedPath(self.master_seed, self.path + (int(position),))

    def descend(self, positions):
        return SeedPath(self.master_seed, self.path + tuple(int(p) for p in positions))

    def at_stage(self, stage, index=0):
        return replace(self, stage=int(stage), index=int(index))

    @property
    def depth(self):
        return len(self.path)

    def spawn_key(self):
        # Length prefix keeps (1, 2) + stage 3 apart from (1, 2, 3)
        return (len(self.path), *self.path, self.stage, self.index)

    def generator(self):
        seq = np.random.SeedSequence(self.master_seed & _SEED_MASK, spawn_key=self.spawn_key())
        return np.random.Generator(np.random.Philox(seq))

    def to_dict(self):
        return {"master_seed": self.master_seed, "path": list(self.path),
                "stage": self.stage, "index": self.index}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data["master_seed"]), tuple(int(p) for p in data["path"]),
                   int(data.get("stage", 0)), int(data.get("index", 0)))


@dataclass(frozen=True)
class ParticlePopulation:
    """
    N particles over one node's state space.

    states has one row per particle; log_weights holds unnormalized log
    weights; log_z_hat is the running log normalizing-constant estimate
    the weights are relative to. A population owns its arrays and marks
    them read-only.
    """

    states: np.ndarray
    log_weights: np.ndarray
    log_z_hat: float = 0.0
    lineage: SeedPath | None = field(default=None, compare=False)

    def __post_init__(self):
        states = np.asarray(self.states)
        if states.ndim == 1:
            states = states.reshape(-1, 1)
        log_weights = np.asarray(self.log_weights, dtype=np.float64).reshape(-1)
        if states.shape[0] != log_weights.shape[0]:
            raise DimensionMismatch(states.shape[0], log_weights.shape[0])
        if log_weights.shape[0] < 1:
            raise DcSmcError("a population needs at least one particle")
        states.flags.writeable = False
        log_weights.flags.writeable = False
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "log_weights", log_weights)
        object.__setattr__(self, "log_z_hat", float(self.log_z_hat))

    @property
    def size(self):
        return self.log_weights.shape[0]

    @property
    def dim(self):
        return self.states.shape[1]

    def with_weights(self, log_weights, log_z_hat=None):
        return ParticlePopulation(
            self.states,
            log_weights,
            self.log_z_hat if log_z_hat is None else log_z_hat,
            self.lineage,
        )

    def with_states(self, states):
        return ParticlePopulation(states, self.log_weights, self.log_z_hat, self.lineage)

    def take(self, indices):
        """Population of the selected rows with uniform weights."""
        indices = np.asarray(indices, dtype=np.int64)
        return ParticlePopulation(
            self.states[indices], np.zeros(indices.shape[0]), self.log_z_hat, self.lineage
        )


def log_mean_exp(values):
    """log(mean(exp(values))), stable for large magnitudes."""
    values = np.asarray(values, dtype=np.float64)
    return float(logsumexp(values) - np.log(values.size))


def normalize(log_weights, context="population"):
    """
    Convert unnormalized log weights into probabilities summing to one.

    Raises:
        AllWeightsZero: every weight is exp(-inf), or a weight is NaN.
    """
    log_weights = np.asarray(log_weights, dtype=np.float64)
    if np.isnan(log_weights).any():
        raise AllWeightsZero(context)
    top = log_weights.max()
    if not np.isfinite(top):
        # -inf everywhere, or +inf somewhere
        raise AllWeightsZero(context)
    weights = np.exp(log_weights - top)
    return weights / weights.sum()


def ess(log_weights):
    """Effective sample size (sum w)^2 / sum w^2, computed in log space."""
    log_weights = np.asarray(log_weights, dtype=np.float64)
    if not np.isfinite(log_weights.max()):
        raise AllWeightsZero("ess")
    return float(np.exp(2.0 * logsumexp(log_weights) - logsumexp(2.0 * log_weights)))


def cess(prev_weights, log_incremental):
    """
    Conditional ESS of an incremental reweighting.

    N (sum_i W_i a_i)^2 / sum_i W_i a_i^2, with W the normalized previous
    weights and a = exp(log_incremental). Lies in (0, N] and equals N when
    the increments are constant.
    """
    prev_weights = np.asarray(prev_weights, dtype=np.float64)
    log_incremental = np.asarray(log_incremental, dtype=np.float64)
    n = prev_weights.shape[0]
    with np.errstate(divide="ignore"):
        log_w = np.log(prev_weights)
    log_num = 2.0 * logsumexp(log_w + log_incremental)
    log_den = logsumexp(log_w + 2.0 * log_incremental)
    if not np.isfinite(log_den):
        raise AllWeightsZero("cess")
    return float(n * np.exp(log_num - log_den))


def fold_logz(pop):
    """Running estimate times the population's mean weight, in log space."""
    if not np.isfinite(pop.log_weights.max()):
        raise AllWeightsZero("fold_logz")
    return pop.log_z_hat + log_mean_exp(pop.log_weights)


def weighted_moments(pop, values):
    """Self-normalized weighted mean and variance of per-particle values."""
    weights = normalize(pop.log_weights)
    values = np.asarray(values, dtype=np.float64)
    mean = float(np.dot(weights, values))
    var = float(np.dot(weights, (values - mean) ** 2))
    return mean, var


def weighted_mean(pop, values):
    return weighted_moments(pop, values)[0]


def resample_indices(log_weights, scheme, gen):
    """
    Draw N ancestor indices with E[copies of i] = N W_i.

    Residual and systematic outputs are uniformly permuted so the returned
    order carries no information about the weights.
    """
    weights = normalize(log_weights, context="resample")
    n = weights.shape[0]
    if scheme == "multinomial":
        cdf = np.cumsum(weights)
        cdf[-1] = 1.0
        return np.searchsorted(cdf, gen.random(n), side="right")

    if scheme == "systematic":
        cdf = np.cumsum(weights)
        cdf[-1] = 1.0
        positions = (gen.random() + np.arange(n)) / n
        indices = np.searchsorted(cdf, positions, side="right")
        return gen.permutation(indices)

    if scheme == "residual":
        scaled = n * weights
        copies = np.floor(scaled).astype(np.int64)
        indices = np.repeat(np.arange(n), copies)
        remaining = n - indices.shape[0]
        if remaining > 0:
            residual = scaled - copies
            cdf = np.cumsum(residual / residual.sum())
            cdf[-1] = 1.0
            extra = np.searchsorted(cdf, gen.random(remaining), side="right")
            indices = np.concatenate([indices, extra])
        return gen.permutation(indices)

    raise DcSmcError(f"unknown resampling scheme {scheme!r}")


def resample(pop, scheme, rng):
    """
    Resample a population to uniform weights.

    Args:
        pop: population to resample
        scheme: 'multinomial', 'residual' or 'systematic'
        rng: SeedPath keying the draw

    Returns:
        ParticlePopulation with zero log weights and the same log_z_hat
    """
    indices = resample_indices(pop.log_weights, scheme, rng.generator())
    return pop.take(indices)


def maybe_resample(pop, scheme, rng, fraction=DEFAULT_RESAMPLE_ESS_FRACTION):
    """
    Resample when ESS drops below fraction * N.

    The mean weight is folded into log_z_hat before resetting the weights,
    so fold_logz is unchanged in expectation. Returns (population, resampled).
    """
    if ess(pop.log_weights) >= fraction * pop.size:
        return pop, False
    folded = fold_logz(pop)
    out = resample(pop, scheme, rng)
    return out.with_weights(out.log_weights, log_z_hat=folded), True
