"""Storage-mediated AllReduce and ScatterReduce.

Both patterns synchronize one round identified by (epoch, iteration). The
leader is rank 0 and never persists its own update, which is what makes the
remote transfer count land on exactly 3w-2 per allreduce round (and per worker
per scatterreduce round): w-1 local-update puts, w-1 reads by the aggregator,
one merged put, and w-1 merged reads.

Key grammar:
    local update   u/{epoch}/{iter}/{src}
    merged update  m/{epoch}/{iter}
    chunk          c/{epoch}/{iter}/{src}/{dst}
    reduced chunk  r/{epoch}/{iter}/{dst}
    global model   g/model
    checkpoint     ckpt/{worker}
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, KeyGrammarError, StragglerTimeout, WireFormatError
from .storage import DEFAULT_POLL_INTERVAL_S, DEFAULT_TIMEOUT_S, BlobStore

BLOB_MAGIC = b"LMBL"
BLOB_VERSION = 0x01
BLOB_DTYPE_F64 = 0x01
_HEADER = struct.Struct("<4sBBQ")  # magic, version, dtype, element count

REDUCE_SUM = "sum"
REDUCE_WEIGHTED_MEAN = "weighted_mean"

KIND_LOCAL = "local"
KIND_MERGED = "merged"
KIND_CHUNK = "chunk"
KIND_REDUCED = "reduced"
KIND_GLOBAL = "global"
KIND_CKPT = "ckpt"

GLOBAL_MODEL_KEY = "g/model"


def make_key(kind: str, epoch: int = 0, iteration: int = 0, src: int = 0,
             dst: int = 0) -> str:
    if kind == KIND_LOCAL:
        return f"u/{epoch}/{iteration}/{src}"
    if kind == KIND_MERGED:
        return f"m/{epoch}/{iteration}"
    if kind == KIND_CHUNK:
        return f"c/{epoch}/{iteration}/{src}/{dst}"
    if kind == KIND_REDUCED:
        return f"r/{epoch}/{iteration}/{dst}"
    if kind == KIND_GLOBAL:
        return GLOBAL_MODEL_KEY
    if kind == KIND_CKPT:
        return f"ckpt/{src}"
    raise KeyGrammarError(f"unknown key kind {kind!r}")


_KEY_FIELDS = {
    "u": (KIND_LOCAL, ("epoch", "iteration", "src")),
    "m": (KIND_MERGED, ("epoch", "iteration")),
    "c": (KIND_CHUNK, ("epoch", "iteration", "src", "dst")),
    "r": (KIND_REDUCED, ("epoch", "iteration", "dst")),
}


def parse_key(key: str) -> dict:
    """Invert make_key; raises KeyGrammarError on malformed keys."""
    if key == GLOBAL_MODEL_KEY:
        return {"kind": KIND_GLOBAL}
    parts = key.split("/")
    if parts[0] == "ckpt" and len(parts) == 2:
        try:
            return {"kind": KIND_CKPT, "worker": int(parts[1])}
        except ValueError:
            raise KeyGrammarError(f"malformed key {key!r}") from None
    spec = _KEY_FIELDS.get(parts[0])
    if spec is None or len(parts) - 1 != len(spec[1]):
        raise KeyGrammarError(f"malformed key {key!r}")
    kind, names = spec
    out = {"kind": kind}
    for name, token in zip(names, parts[1:]):
        try:
            value = int(token)
        except ValueError:
            raise KeyGrammarError(f"malformed key {key!r}") from None
        if value < 0:
            raise KeyGrammarError(f"malformed key {key!r}")
        out[name] = value
    return out


def encode_update(vector: np.ndarray, weight: float = 1.0) -> bytes:
    """Pack a float64 vector plus weight; total size 14 + 8*(len+1) bytes."""
    vec = np.ascontiguousarray(vector, dtype=np.float64).ravel()
    payload = np.concatenate([[weight], vec])
    return _HEADER.pack(BLOB_MAGIC, BLOB_VERSION, BLOB_DTYPE_F64,
                        payload.size) + payload.astype("<f8").tobytes()


def decode_update(blob: bytes) -> tuple[np.ndarray, float]:
    if len(blob) < _HEADER.size:
        raise WireFormatError("update blob shorter than its header")
    magic, version, dtype, count = _HEADER.unpack_from(blob)
    if magic != BLOB_MAGIC:
        raise WireFormatError(f"bad magic {magic!r}")
    if version != BLOB_VERSION:
        raise WireFormatError(f"unsupported version {version}")
    if dtype != BLOB_DTYPE_F64:
        raise WireFormatError(f"unsupported dtype {dtype}")
    if count < 1:
        raise WireFormatError("update blob must carry at least the weight")
    expected = _HEADER.size + 8 * count
    if len(blob) != expected:
        raise WireFormatError(
            f"update blob has {len(blob)} bytes, expected {expected}")
    payload = np.frombuffer(blob, dtype="<f8", count=count, offset=_HEADER.size)
    return payload[1:].astype(np.float64), float(payload[0])


@dataclass
class CollectiveContext:
    """One worker's view of the collective group for one training job."""

    store: BlobStore
    n_workers: int
    my_rank: int
    epoch: int = 0
    iteration: int = 0
    reduce_op: str = REDUCE_WEIGHTED_MEAN
    poll_interval_s: float = DEFAULT_POLL_INTERVAL_S
    timeout_s: float = DEFAULT_TIMEOUT_S
    gc_previous_round: bool = True
    _prev_round: tuple[int, int] | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0 <= self.my_rank < self.n_workers:
            raise ConfigError("rank must satisfy 0 <= rank < n_workers")
        if self.epoch < 0 or self.iteration < 0:
            raise ConfigError("epoch and iteration must be non-negative")
        if self.reduce_op not in (REDUCE_SUM, REDUCE_WEIGHTED_MEAN):
            raise ConfigError(f"unknown reduce op {self.reduce_op!r}")

    def set_round(self, epoch: int, iteration: int) -> None:
        """Move to a new round, remembering the old one for garbage collection."""
        if (self.epoch, self.iteration) != (epoch, iteration):
            self._prev_round = (self.epoch, self.iteration)
            self.epoch, self.iteration = epoch, iteration


def _reduce(pairs: list[tuple[np.ndarray, float]], op: str) -> tuple[np.ndarray, float]:
    """Reduce (vector, weight) pairs in rank order for reproducible FP sums."""
    total_weight = 0.0
    for _, wt in pairs:
        total_weight += wt
    out = np.zeros_like(pairs[0][0])
    if op == REDUCE_SUM:
        for vec, _ in pairs:
            out += vec
    else:
        if total_weight <= 0.0:
            raise ConfigError("weighted mean needs positive total weight")
        for vec, wt in pairs:
            out += (wt / total_weight) * vec
    return out, total_weight


def _wait(ctx: CollectiveContext, prefix: str, min_count: int,
          expected_ranks=None) -> list[str]:
    try:
        return ctx.store.wait_for_keys(prefix, min_count,
                                       timeout_s=ctx.timeout_s,
                                       poll_interval_s=ctx.poll_interval_s)
    except StragglerTimeout as exc:
        if expected_ranks is None:
            raise
        present = {parse_key(k)["src"] for k in ctx.store.list(prefix)}
        missing = sorted(set(expected_ranks) - present)
        raise StragglerTimeout(
            f"round ({ctx.epoch},{ctx.iteration}) timed out after "
            f"{ctx.timeout_s}s; missing ranks {missing}", missing) from exc


def _collect(ctx: CollectiveContext, keys: list[str]) -> list[tuple[int, np.ndarray, float]]:
    out = []
    for key in keys:
        blob = ctx.store.get(key)
        if blob is None:
            raise StragglerTimeout(f"key {key} vanished mid-round", ())
        vec, wt = decode_update(blob)
        out.append((parse_key(key)["src"], vec, wt))
    return out


def _gc_previous(ctx: CollectiveContext, pattern: str) -> None:
    # Safe once every worker has entered the current round: rank 0 observing
    # all w-1 local blobs (or chunks) proves everyone exited the previous one.
    if not ctx.gc_previous_round or ctx.my_rank != 0 or ctx._prev_round is None:
        return
    e, i = ctx._prev_round
    if pattern == "allreduce":
        ctx.store.delete(f"u/{e}/{i}/")
        ctx.store.delete(f"m/{e}/{i}")
    else:
        ctx.store.delete(f"c/{e}/{i}/")
        ctx.store.delete(f"r/{e}/{i}/")


def allreduce(ctx: CollectiveContext, vector: np.ndarray,
              weight: float = 1.0) -> np.ndarray:
    """Leader-aggregated reduction; every worker returns the same result."""
    e, i = ctx.epoch, ctx.iteration
    if ctx.n_workers == 1:
        result, _ = _reduce([(np.asarray(vector, dtype=np.float64), weight)],
                            ctx.reduce_op)
        return result
    if ctx.my_rank != 0:
        ctx.store.put(make_key(KIND_LOCAL, e, i, ctx.my_rank),
                      encode_update(vector, weight))
        _wait(ctx, make_key(KIND_MERGED, e, i), 1)
        blob = ctx.store.get(make_key(KIND_MERGED, e, i))
        if blob is None:
            raise StragglerTimeout("merged blob vanished", ())
        result, _ = decode_update(blob)
        return result
    # Leader keeps its own input in memory and only persists the merged blob.
    keys = _wait(ctx, f"u/{e}/{i}/", ctx.n_workers - 1,
                 expected_ranks=range(1, ctx.n_workers))
    entries = _collect(ctx, keys)
    entries.append((0, np.asarray(vector, dtype=np.float64), weight))
    entries.sort(key=lambda item: item[0])
    result, total = _reduce([(v, wt) for _, v, wt in entries], ctx.reduce_op)
    ctx.store.put(make_key(KIND_MERGED, e, i), encode_update(result, total))
    _gc_previous(ctx, "allreduce")
    return result


def _chunk_bounds(dim: int, n_workers: int) -> list[tuple[int, int]]:
    size = -(-dim // n_workers)  # ceil; trailing chunks may be empty
    return [(min(j * size, dim), min((j + 1) * size, dim))
            for j in range(n_workers)]


def scatterreduce(ctx: CollectiveContext, vector: np.ndarray,
                  weight: float = 1.0) -> np.ndarray:
    """Every worker aggregates one 1/w slice; identical result to allreduce."""
    e, i, rank, w = ctx.epoch, ctx.iteration, ctx.my_rank, ctx.n_workers
    vec = np.asarray(vector, dtype=np.float64)
    if w == 1:
        result, _ = _reduce([(vec, weight)], ctx.reduce_op)
        return result
    bounds = _chunk_bounds(vec.size, w)
    for dst in range(w):
        if dst == rank:
            continue
        lo, hi = bounds[dst]
        ctx.store.put(make_key(KIND_CHUNK, e, i, rank, dst),
                      encode_update(vec[lo:hi], weight))
    # Aggregate partition `rank`: own chunk plus w-1 foreign chunks.
    prefix = f"c/{e}/{i}/"
    expected = [make_key(KIND_CHUNK, e, i, src, rank) for src in range(w)
                if src != rank]
    chunk_keys = _wait_scatter(ctx, prefix, expected)
    lo, hi = bounds[rank]
    entries = [(rank, vec[lo:hi], weight)]
    for key in chunk_keys:
        blob = ctx.store.get(key)
        if blob is None:
            raise StragglerTimeout(f"chunk {key} vanished mid-round", ())
        cvec, cwt = decode_update(blob)
        entries.append((parse_key(key)["src"], cvec, cwt))
    entries.sort(key=lambda item: item[0])
    reduced, total = _reduce([(v, wt) for _, v, wt in entries], ctx.reduce_op)
    ctx.store.put(make_key(KIND_REDUCED, e, i, 0, rank),
                  encode_update(reduced, total))
    _wait(ctx, f"r/{e}/{i}/", w)
    out = np.empty(vec.size)
    for dst in range(w):
        blo, bhi = bounds[dst]
        if dst == rank:
            out[blo:bhi] = reduced
            continue
        blob = ctx.store.get(make_key(KIND_REDUCED, e, i, 0, dst))
        if blob is None:
            raise StragglerTimeout(f"reduced part {dst} vanished mid-round", ())
        part, _ = decode_update(blob)
        out[blo:bhi] = part
    _gc_previous(ctx, "scatterreduce")
    return out


def _wait_scatter(ctx: CollectiveContext, prefix: str,
                  expected: list[str]) -> list[str]:
    """Wait until every expected chunk key destined for this rank exists."""
    want = set(expected)
    deadline_hint = len(expected)
    while True:
        # Chunks for all destinations share the prefix; wait for enough keys
        # overall, then check ours specifically.
        keys = _wait(ctx, prefix, deadline_hint)
        present = want.intersection(keys)
        if len(present) == len(want):
            return sorted(want)
        deadline_hint = len(keys) + 1
