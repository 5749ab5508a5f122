"""
Wire Codec
----------
Binary envelope for particle populations exchanged between workers.

Layout, little-endian throughout. The header has the same width for every
node so an envelope is HEADER_BYTES + N * state size + 8 N + checksum:

    magic        8 bytes  b"DCSMCPOP"
    version      u8
    model tag    u8
    id length    u16
    node id      UTF-8, NUL-padded to ENVELOPE_NODE_ID_BYTES
    N, dim       u32, u32
    log_z_hat    f64
    lineage      master seed u64, path length u16,
                 path u32 * ENVELOPE_MAX_LINEAGE_DEPTH (zero-padded),
                 stage u16, index u32
    states       N * dim values in the model tag's dtype
    log weights  N * f64
    checksum     8-byte BLAKE2b digest of everything before it
"""

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from config.constants import (
    ENVELOPE_MAGIC,
    ENVELOPE_MAX_LINEAGE_DEPTH,
    ENVELOPE_NODE_ID_BYTES,
    ENVELOPE_VERSION,
    MODEL_TAGS,
)
from services.errors import ChecksumMismatch, HeaderOverflow, TruncatedPayload, UnknownModelTag
from services.particles import ParticlePopulation, SeedPath

CHECKSUM_BYTES = 8
_TAG_BY_CODE = {code: (name, dtype) for name, (code, dtype) in MODEL_TAGS.items()}
_SEED_MASK = (1 << 64) - 1

_PREFIX = struct.Struct("<8sBB")
_HEADER = struct.Struct(
    f"<8sBBH{ENVELOPE_NODE_ID_BYTES}sIIdQH{ENVELOPE_MAX_LINEAGE_DEPTH}IHI"
)
HEADER_BYTES = _HEADER.size


@dataclass(frozen=True)
class PopulationEnvelope:
    node_id: str
    model_tag: str
    population: ParticlePopulation
    payload: bytes

    @property
    def n_particles(self):
        return self.population.size


def _checksum(body):
    return hashlib.blake2b(body, digest_size=CHECKSUM_BYTES).digest()


def encode_population(pop, node_id, model_tag):
    """
    Serialize a population for transfer.

    Raises:
        UnknownModelTag: model_tag is not registered
        HeaderOverflow: node id or lineage path wider than its header field
    """
    if model_tag not in MODEL_TAGS:
        raise UnknownModelTag(model_tag)
    code, dtype = MODEL_TAGS[model_tag]
    lineage = pop.lineage or SeedPath(0)
    node_bytes = node_id.encode("utf-8")
    if len(node_bytes) > ENVELOPE_NODE_ID_BYTES:
        raise HeaderOverflow("node id", f"{len(node_bytes)} bytes", ENVELOPE_NODE_ID_BYTES)
    path = list(lineage.path)
    if len(path) > ENVELOPE_MAX_LINEAGE_DEPTH:
        raise HeaderOverflow("lineage path", f"depth {len(path)}", ENVELOPE_MAX_LINEAGE_DEPTH)

    header = _HEADER.pack(
        ENVELOPE_MAGIC, ENVELOPE_VERSION, code, len(node_bytes), node_bytes,
        pop.size, pop.dim, pop.log_z_hat,
        lineage.master_seed & _SEED_MASK, len(path),
        *path, *([0] * (ENVELOPE_MAX_LINEAGE_DEPTH - len(path))),
        lineage.stage, lineage.index,
    )
    body = b"".join([
        header,
        np.ascontiguousarray(pop.states, dtype=dtype).tobytes(),
        np.ascontiguousarray(pop.log_weights, dtype="<f8").tobytes(),
    ])
    payload = body + _checksum(body)
    return PopulationEnvelope(node_id, model_tag, pop, payload)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.data):
            raise TruncatedPayload(f"needed {size} bytes at offset {self.offset}, have {len(self.data)}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, layout):
        return layout.unpack(self.take(layout.size))


def decode_population(payload):
    """
    Rebuild the envelope from its bytes.

    The checksum is verified before anything else is trusted.

    Raises:
        TruncatedPayload: fewer bytes than the header announces
        ChecksumMismatch: the trailing digest does not match
        UnknownModelTag: the tag code is not registered
    """
    payload = bytes(payload)
    if len(payload) < HEADER_BYTES + CHECKSUM_BYTES:
        raise TruncatedPayload(f"envelope of {len(payload)} bytes is shorter than its header")
    body, digest = payload[:-CHECKSUM_BYTES], payload[-CHECKSUM_BYTES:]
    magic, version, code = _PREFIX.unpack_from(body)
    if magic != ENVELOPE_MAGIC:
        raise ChecksumMismatch(f"bad magic {magic!r}")
    if _checksum(body) != digest:
        raise ChecksumMismatch("payload digest does not match")
    if version != ENVELOPE_VERSION:
        raise ChecksumMismatch(f"unsupported envelope version {version}")
    if code not in _TAG_BY_CODE:
        raise UnknownModelTag(code)
    model_tag, dtype = _TAG_BY_CODE[code]

    reader = _Reader(body)
    _, _, _, id_len, id_field, n, dim, log_z_hat, master, path_len, *lineage = reader.unpack(_HEADER)
    if id_len > ENVELOPE_NODE_ID_BYTES or path_len > ENVELOPE_MAX_LINEAGE_DEPTH:
        raise HeaderOverflow("header", f"id {id_len} / depth {path_len}", "fixed width")
    node_id = id_field[:id_len].decode("utf-8")
    path = tuple(int(p) for p in lineage[:path_len])
    stage, index = lineage[-2:]
    states = np.frombuffer(reader.take(n * dim * dtype.itemsize), dtype=dtype).reshape(n, dim)
    log_weights = np.frombuffer(reader.take(8 * n), dtype="<f8")
    if reader.offset != len(body):
        raise TruncatedPayload(f"{len(body) - reader.offset} trailing bytes after the weights")

    pop = ParticlePopulation(
        states.astype(dtype.newbyteorder("="), copy=True),
        log_weights.astype(np.float64, copy=True),
        float(log_z_hat),
        SeedPath(int(master), path, int(stage), int(index)),
    )
    return PopulationEnvelope(node_id, model_tag, pop, payload)
