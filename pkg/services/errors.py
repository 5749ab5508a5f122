"""
Engine Errors
-------------
Exception hierarchy for the DC-SMC engine. Engine code raises these; the
experiment runner records any replicate failure in its error column.
"""


class DcSmcError(Exception):
    """Base class for every error raised by the engine."""


class ConfigError(DcSmcError):
    pass


# Particle arithmetic
class AllWeightsZero(DcSmcError):
    def __init__(self, context="population"):
        super().__init__(f"all weights are zero in {context}")
        self.context = context


# Tree structure and recursion
class MalformedTree(DcSmcError):
    def __init__(self, node_id, reason):
        super().__init__(f"node {node_id!r}: {reason}")
        self.node_id = node_id
        self.reason = reason


class NodeFailure(DcSmcError):
    """A failure inside the recursion, tagged with the node it happened at."""

    def __init__(self, node_id, cause):
        super().__init__(f"node {node_id!r} failed: {cause}")
        self.node_id = node_id


class ProposalUnsupported(DcSmcError):
    def __init__(self, node_id):
        super().__init__(f"proposal at node {node_id!r} has zero density at its own sample")
        self.node_id = node_id


class ArityTooLarge(DcSmcError):
    def __init__(self, node_id, entries, budget):
        super().__init__(f"mixture merge at {node_id!r} needs {entries} entries (budget {budget})")
        self.node_id = node_id
        self.entries = entries
        self.budget = budget


# Models
class DimensionMismatch(DcSmcError):
    def __init__(self, expected, got):
        super().__init__(f"expected dimension {expected}, got {got}")
        self.expected = expected
        self.got = got


class NotPowerOfTwo(DcSmcError):
    def __init__(self, value):
        super().__init__(f"lattice side {value} is not a power of two")
        self.value = value


class QuadratureNonFinite(DcSmcError):
    pass


class NonPositiveVariance(DcSmcError):
    def __init__(self, value):
        super().__init__(f"variance must be positive, got {value}")
        self.value = value


class RootImproperPosterior(DcSmcError):
    pass


class TooLarge(DcSmcError):
    pass


# Wire protocol and workers
class ChecksumMismatch(DcSmcError):
    pass


class UnknownModelTag(DcSmcError):
    def __init__(self, tag):
        super().__init__(f"unknown model tag {tag!r}")
        self.tag = tag


class TruncatedPayload(DcSmcError):
    pass


class HeaderOverflow(DcSmcError):
    def __init__(self, field, size, limit):
        super().__init__(f"envelope {field} of {size} does not fit the {limit} reserved for it")
        self.field = field


class WorkerUnreachable(DcSmcError):
    def __init__(self, worker, detail=""):
        super().__init__(f"worker {worker} unreachable {detail}".strip())
        self.worker = worker


# Dataset ingestion
class MalformedRow(DcSmcError):
    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class ProprietyViolation(DcSmcError):
    pass
