"""Worker lifecycle and orchestration for both execution modes.

real_local runs one thread per worker against a shared in-process store (or a
filesystem directory) with wall-clock accounting. simulate runs the same
worker code on the deterministic virtual-clock kernel, so a job is
bit-reproducible for a fixed (config, seed).

Loss evaluation and the convergence decision happen centrally at epoch
boundaries (a zero-cost barrier in BSP, a per-worker report in ASP); trace
timestamps therefore reflect training time only.

Checkpoint blob layout: magic "LMCK", version byte 0x01, worker_id, epoch and
iter as 4-byte little-endian, the model as an update blob, then one count
byte followed by that many extra update blobs (the ADMM dual and consensus
vectors; other algorithms carry none).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import threading
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import costmodel, models, optimizers
from .collectives import (GLOBAL_MODEL_KEY, CollectiveContext, KIND_CKPT,
                          REDUCE_SUM, REDUCE_WEIGHTED_MEAN, allreduce,
                          decode_update, encode_update, make_key, scatterreduce)
from .data import (Dataset, Partition, dataset_from_bytes, dataset_to_bytes,
                   generate_synthetic, load_libsvm, partition_dataset)
from .errors import (CheckpointError, ConfigError, DivergenceError, FaasmlError,
                     JobAborted, LifetimeExceeded, WireFormatError)
from .ps import PSClient, ps_serve
from .sim import (PHASE_COMMUNICATION, PHASE_COMPUTE, PHASE_LOADING,
                  PHASE_STARTUP, PHASES, SimKernel, SimPS, SimWorkerStore)
from .storage import (BlobStore, CountingStore, FileStore, MemoryStore,
                      builtin_profiles, profile_with_overrides)

PATTERN_ALLREDUCE = "allreduce"
PATTERN_SCATTERREDUCE = "scatterreduce"
PATTERN_PS = "ps"
PATTERNS = (PATTERN_ALLREDUCE, PATTERN_SCATTERREDUCE, PATTERN_PS)

SYNC_BSP = "bsp"
SYNC_ASP = "asp"

MODE_REAL_LOCAL = "real_local"
MODE_SIMULATE = "simulate"

MANIFEST_KEY = "manifest"
PARTITION_KEY_FMT = "part/{rank}"

CKPT_MAGIC = b"LMCK"
CKPT_VERSION = 0x01
_CKPT_HEAD = struct.Struct("<4sBIII")

# Deterministic fallback for simulate-mode compute cost when no per-epoch
# seconds are configured: row-features processed per second by one worker.
NOMINAL_ROW_FEATURES_PER_S = 5e7


@dataclass
class DatasetSpec:
    """Where training data comes from: a generator or a libsvm file."""

    kind: str = "synthetic"          # synthetic | libsvm
    n: int = 2000
    d: int = 10
    path: str | None = None

    def load(self, cfg: "JobConfig") -> Dataset:
        if self.kind == "synthetic":
            task = "clustering" if cfg.model == models.MODEL_KMEANS \
                else "classification"
            return generate_synthetic(self.n, self.d, task, cfg.seed, k=cfg.k)
        if self.kind == "libsvm":
            if not self.path:
                raise ConfigError("libsvm dataset needs a path")
            return load_libsvm(self.path, self.d)
        raise ConfigError(f"unknown dataset kind {self.kind!r}")


@dataclass
class JobConfig:
    """Complete description of one training job."""

    model: str = models.MODEL_LR
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    workers: int = 2
    algorithm: str = optimizers.ALGO_GA_SGD
    channel: str = "s3"
    pattern: str = PATTERN_ALLREDUCE
    sync: str = SYNC_BSP
    lr: float = 0.1
    batch_size: int = 100
    local_epochs: int = 1            # per-round local passes for MA/ADMM
    rho: float = 1.0
    l2: float = 0.0
    loss_threshold: float = 0.0
    max_epochs: int = 10
    k: int = 3                       # clusters, k-means only
    lifetime_s: float = 900.0
    checkpoint_margin_s: float = 30.0
    mode: str = MODE_SIMULATE
    seed: int = 0
    stragglers: dict[int, float] = field(default_factory=dict)
    pricing: costmodel.PricingTable = field(default_factory=costmodel.PricingTable)
    poll_interval_s: float = 0.01
    timeout_s: float = 600.0
    sim_data_mb: float | None = None
    compute_seconds_per_epoch: float | None = None
    loading_channel: str = "s3"
    ps_channel: str = "ps_link"
    charge_channel_startup: bool = False
    channel_overrides: dict = field(default_factory=dict)
    store_dir: str | None = None
    keep_model_trace: bool = False
    keep_store_trace: bool = False

    def validate(self) -> None:
        if self.model not in models.MODEL_KINDS:
            raise ConfigError(f"job.model: unknown model {self.model!r}")
        if self.algorithm not in optimizers.ALGORITHMS:
            raise ConfigError(f"job.algorithm: unknown algorithm {self.algorithm!r}")
        if self.pattern not in PATTERNS:
            raise ConfigError(f"job.pattern: unknown pattern {self.pattern!r}")
        if self.sync not in (SYNC_BSP, SYNC_ASP):
            raise ConfigError(f"job.sync: unknown protocol {self.sync!r}")
        if self.mode not in (MODE_REAL_LOCAL, MODE_SIMULATE):
            raise ConfigError(f"job.mode: unknown mode {self.mode!r}")
        if self.workers < 1:
            raise ConfigError("job.workers must be >= 1")
        if not math.isfinite(self.loss_threshold):
            raise ConfigError("job.loss_threshold must be finite")
        if self.lr <= 0 or self.rho <= 0 or self.l2 < 0:
            raise ConfigError("job.lr and job.rho must be positive, job.l2 "
                              "non-negative")
        if self.batch_size < 1 or self.local_epochs < 1 or self.max_epochs < 1:
            raise ConfigError("job.batch_size, job.local_epochs and "
                              "job.max_epochs must be >= 1")
        if not self.lifetime_s > self.checkpoint_margin_s >= 0.0:
            raise ConfigError("need job.lifetime_s > job.checkpoint_margin_s >= 0")
        if self.model == models.MODEL_KMEANS:
            if self.algorithm != optimizers.ALGO_KMEANS_EM:
                raise ConfigError("k-means model trains with kmeans_em only")
            if self.k < 1:
                raise ConfigError("job.k must be >= 1")
        elif self.algorithm == optimizers.ALGO_KMEANS_EM:
            raise ConfigError("kmeans_em requires the kmeans model")
        if self.sync == SYNC_ASP and self.algorithm != optimizers.ALGO_GA_SGD:
            raise ConfigError("job.sync: asp supports plain SGD (ga_sgd) only")
        if self.pattern == PATTERN_PS:
            if self.algorithm != optimizers.ALGO_GA_SGD or self.sync != SYNC_BSP:
                raise ConfigError("job.pattern: ps supports bsp ga_sgd only")
        for rank, factor in self.stragglers.items():
            if not 0 <= int(rank) < self.workers or factor < 1.0:
                raise ConfigError("job.stragglers needs a valid rank and a "
                                  "factor >= 1")


@dataclass
class WorkerState:
    """Everything a worker must persist to survive a respawn."""

    worker_id: int
    epoch: int
    iteration: int
    model: np.ndarray
    extras: list[np.ndarray] = field(default_factory=list)


def encode_checkpoint(state: WorkerState) -> bytes:
    parts = [_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, state.worker_id,
                             state.epoch, state.iteration)]
    parts.append(encode_update(state.model))
    parts.append(bytes([len(state.extras)]))
    for extra in state.extras:
        parts.append(encode_update(extra))
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> WorkerState:
    try:
        if len(blob) < _CKPT_HEAD.size:
            raise WireFormatError("checkpoint shorter than its header")
        magic, version, worker_id, epoch, iteration = _CKPT_HEAD.unpack_from(blob)
        if magic != CKPT_MAGIC:
            raise WireFormatError(f"bad checkpoint magic {magic!r}")
        if version != CKPT_VERSION:
            raise WireFormatError(f"unsupported checkpoint version {version}")
        offset = _CKPT_HEAD.size
        model, offset = _take_update(blob, offset)
        if offset >= len(blob):
            raise WireFormatError("checkpoint truncated before extras count")
        count = blob[offset]
        offset += 1
        extras = []
        for _ in range(count):
            extra, offset = _take_update(blob, offset)
            extras.append(extra)
        if offset != len(blob):
            raise WireFormatError("trailing bytes after checkpoint payload")
    except WireFormatError as exc:
        raise CheckpointError(str(exc)) from exc
    return WorkerState(worker_id, epoch, iteration, model, extras)


def _take_update(blob: bytes, offset: int) -> tuple[np.ndarray, int]:
    if len(blob) < offset + 14:
        raise WireFormatError("truncated update blob")
    (count,) = struct.unpack_from("<Q", blob, offset + 6)
    end = offset + 14 + 8 * count
    if len(blob) < end:
        raise WireFormatError("truncated update blob payload")
    vec, _ = decode_update(blob[offset:end])
    return vec, end


@dataclass
class JobReport:
    """Outcome of one job: trace, per-phase breakdown, transfers, and cost."""

    converged: bool
    epochs: int
    rounds: int
    loss_trace: list[tuple[int, float, float]]
    breakdown: dict[str, float]
    bytes_transferred: int
    dollar_cost_usd: float
    final_loss: float
    final_metric: float
    respawns: int
    workers: int
    algorithm: str
    pattern: str
    sync: str
    channel: str
    mode: str
    seed: int
    final_model_sha256: str
    per_worker: list[dict]
    schema: str = "v1"
    final_model: np.ndarray | None = field(default=None, repr=False, compare=False)
    model_trace: list | None = field(default=None, repr=False, compare=False)
    store_trace: list | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> str:
        payload = {k: v for k, v in asdict(self).items()
                   if k not in ("final_model", "model_trace", "store_trace")}
        payload["loss_trace"] = [list(row) for row in self.loss_trace]
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def trace_csv(self) -> str:
        lines = ["epoch,time_s,loss"]
        for epoch, when, loss in self.loss_trace:
            lines.append(f"{epoch},{when!r},{loss!r}")
        return "\n".join(lines) + "\n"


class JobState:
    """Shared coordination state: trace, stop decision, respawn counts."""

    def __init__(self, cfg: JobConfig, dataset: Dataset):
        self.cfg = cfg
        self.dataset = dataset
        self.lock = threading.Lock()
        self.trace: list[tuple[int, float, float]] = []
        self.model_trace: list[tuple[int, np.ndarray]] = []
        self.store_trace: list = []
        self.stop = False
        self.converged = False
        self.respawns = {r: 0 for r in range(cfg.workers)}
        self.last_decision = False
        self.eval_slots: dict[int, tuple[float, np.ndarray, int]] = {}

    def evaluate_model(self, model: np.ndarray) -> models.EvalResult:
        return models.evaluate(model, self.dataset, self.cfg.model, self.cfg.k)

    def central_eval(self, epochs: int, model: np.ndarray, when: float,
                     enforce_max: bool = True) -> bool:
        """Record a trace row and decide whether training stops."""
        result = self.evaluate_model(model)
        if not math.isfinite(result.loss):
            raise DivergenceError(
                f"non-finite loss after {epochs} epochs with lr {self.cfg.lr}")
        self.trace.append((epochs, when, result.loss))
        if self.cfg.keep_model_trace:
            self.model_trace.append((epochs, model.copy()))
        if result.loss <= self.cfg.loss_threshold:
            self.converged = True
            self.stop = True
        if enforce_max and epochs >= self.cfg.max_epochs:
            self.stop = True
        return self.stop


# ---------------------------------------------------------------------------
# Execution environments
# ---------------------------------------------------------------------------


class RealEnv:
    """Wall-clock environment: one thread per worker, measured phases."""

    def __init__(self, rank: int, cfg: JobConfig, job: JobState,
                 base_store: BlobStore, barrier: threading.Barrier,
                 ps_address=None):
        self.rank = rank
        self.cfg = cfg
        self.job = job
        self.base_store = base_store
        self.store = CountingStore(base_store, trace=job.store_trace, label=rank)
        self.phases = {p: 0.0 for p in PHASES}
        self.straggler = float(cfg.stragglers.get(rank, 1.0))
        self.iterations_this_incarnation = 0
        self._incarnation_t0 = time.monotonic()
        self._barrier = barrier
        self._ps = PSClient(ps_address) if ps_address is not None else None
        self.ps_bytes = 0

    # -- accounting

    def account(self, phase: str, seconds: float) -> None:
        self.phases[phase] += seconds

    def now(self) -> float:
        return sum(self.phases.values())

    def begin_incarnation(self, initial: bool) -> None:
        self._incarnation_t0 = time.monotonic()
        self.iterations_this_incarnation = 0

    def respawn(self) -> None:
        self.begin_incarnation(initial=False)

    def incarnation_elapsed(self) -> float:
        return time.monotonic() - self._incarnation_t0

    def note_iteration(self) -> None:
        self.iterations_this_incarnation += 1

    # -- phase wrappers

    def run_compute(self, fn, rows: int):
        t0 = time.perf_counter()
        result = fn()
        elapsed = time.perf_counter() - t0
        if self.straggler > 1.0:
            time.sleep(elapsed * (self.straggler - 1.0))
        self.account(PHASE_COMPUTE, elapsed * self.straggler)
        return result

    def comm(self, fn):
        t0 = time.perf_counter()
        result = fn()
        self.account(PHASE_COMMUNICATION, time.perf_counter() - t0)
        return result

    def load_partition(self) -> Partition:
        t0 = time.perf_counter()
        manifest = self.base_store.get(MANIFEST_KEY)
        if manifest is None:
            raise FaasmlError("partition manifest missing from store")
        keys = manifest.decode("utf-8").splitlines()
        blob = self.base_store.get(keys[self.rank])
        if blob is None:
            raise FaasmlError(f"partition blob {keys[self.rank]} missing")
        ds = dataset_from_bytes(blob)
        self.account(PHASE_LOADING, time.perf_counter() - t0)
        return Partition(ds, 0, ds.n_rows, self.rank, self.rank)

    # -- synchronization and evaluation

    def epoch_eval(self, epochs: int, model: np.ndarray) -> bool:
        self.job.eval_slots[self.rank] = (self.now(), model, epochs)
        t0 = time.perf_counter()
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise JobAborted(f"worker {self.rank} aborted: peer failed") from None
        self.account(PHASE_COMMUNICATION, time.perf_counter() - t0)
        return self.job.last_decision

    def epoch_report(self, epochs: int, model: np.ndarray) -> bool:
        with self.job.lock:
            self.job.central_eval(epochs, model, self.now(), enforce_max=False)
            return self.job.stop

    def ps_push(self, grad: np.ndarray, epoch: int, iteration: int) -> None:
        self.ps_bytes += 14 + 8 * (grad.size + 1)
        self.comm(lambda: self._ps.push(grad, epoch, iteration))

    def ps_pull(self) -> np.ndarray:
        version, model = self.comm(lambda: self._ps.pull())
        self.ps_bytes += 14 + 8 * (model.size + 1)
        return model

    def close(self) -> None:
        if self._ps is not None:
            self._ps.close()


class SimEnv:
    """Virtual-clock environment over the deterministic kernel."""

    def __init__(self, rank: int, cfg: JobConfig, job: JobState,
                 kernel: SimKernel, comm_profile, loading_profile,
                 sim_ps: SimPS | None, epoch_seconds: float,
                 total_rows: int):
        self.rank = rank
        self.cfg = cfg
        self.job = job
        self.kernel = kernel
        self.task = kernel.tasks[rank]
        self.comm_profile = comm_profile
        self.loading_profile = loading_profile
        inner = SimWorkerStore(kernel, self.task, comm_profile)
        self.store = CountingStore(inner, trace=job.store_trace, label=rank)
        self.straggler = float(cfg.stragglers.get(rank, 1.0))
        self.iterations_this_incarnation = 0
        self._incarnation_start = 0.0
        self._epoch_seconds = epoch_seconds
        self._total_rows = total_rows
        self._ps = sim_ps
        self.ps_bytes = 0

    @property
    def phases(self) -> dict[str, float]:
        return self.task.phases

    def now(self) -> float:
        return self.task.clock

    def begin_incarnation(self, initial: bool) -> None:
        self._incarnation_start = self.task.clock
        self.iterations_this_incarnation = 0
        w = self.cfg.workers if initial else 1
        startup = costmodel.interp_startup(costmodel.DEFAULT_FAAS_STARTUP, w,
                                           "faas")
        if initial and self.cfg.charge_channel_startup:
            startup += self.comm_profile.startup_s
        self.kernel.charge(self.task, startup, PHASE_STARTUP)

    def respawn(self) -> None:
        self.begin_incarnation(initial=False)

    def incarnation_elapsed(self) -> float:
        return self.task.clock - self._incarnation_start

    def note_iteration(self) -> None:
        self.iterations_this_incarnation += 1

    def run_compute(self, fn, rows: int):
        result = fn()
        seconds = self._epoch_seconds * (rows / self._total_rows) * self.straggler
        self.kernel.charge(self.task, seconds, PHASE_COMPUTE)
        return result

    def comm(self, fn):
        return fn()  # simulated store/PS calls charge the clock themselves

    def load_partition(self) -> Partition:
        # Partition bytes are fetched out of band; the charge models each
        # worker drawing its share of the aggregate loading bandwidth, which
        # makes the phase equal to dataset_mb/bandwidth regardless of w.
        manifest = self.kernel.blob_get(MANIFEST_KEY, self.task.clock)
        if manifest is None:
            raise FaasmlError("partition manifest missing from store")
        keys = manifest.decode("utf-8").splitlines()
        blob = self.kernel.blob_get(keys[self.rank], self.task.clock)
        if blob is None:
            raise FaasmlError(f"partition blob {keys[self.rank]} missing")
        ds = dataset_from_bytes(blob)
        data_mb = self.cfg.sim_data_mb
        if data_mb is None:
            data_mb = (self.job.dataset.nbytes()) / 1e6
        seconds = data_mb / self.loading_profile.bandwidth_MBps \
            + self.loading_profile.latency_s
        self.kernel.charge(self.task, seconds, PHASE_LOADING)
        return Partition(ds, 0, ds.n_rows, self.rank, self.rank)

    def epoch_eval(self, epochs: int, model: np.ndarray) -> bool:
        job = self.job

        def action(max_clock: float) -> bool:
            return job.central_eval(epochs, model, max_clock)

        return self.kernel.barrier(self.task, ("eval", epochs),
                                   self.cfg.workers, action)

    def epoch_report(self, epochs: int, model: np.ndarray) -> bool:
        self.kernel.before_effect(self.task)
        self.job.central_eval(epochs, model, self.task.clock, enforce_max=False)
        return self.job.stop

    def ps_push(self, grad: np.ndarray, epoch: int, iteration: int) -> None:
        self.ps_bytes += 14 + 8 * (grad.size + 1)
        self._ps.push(self.task, grad, epoch, iteration)

    def ps_pull(self) -> np.ndarray:
        _, model = self._ps.pull(self.task)
        self.ps_bytes += 14 + 8 * (model.size + 1)
        return model

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# Starter and worker body
# ---------------------------------------------------------------------------


def starter(put, dataset: Dataset, cfg: JobConfig) -> list[str]:
    """Partition the data, write partition blobs and the manifest.

    `put` is any callable(key, bytes); returns the partition keys in rank
    order. For k-means the seeded initial centroids are published under the
    global model key so every worker starts identically.
    """
    parts = partition_dataset(dataset, cfg.workers)
    keys = []
    for part in parts:
        key = PARTITION_KEY_FMT.format(rank=part.partition_id)
        put(key, dataset_to_bytes(part.features, part.labels))
        keys.append(key)
    put(MANIFEST_KEY, "\n".join(keys).encode("utf-8"))
    if cfg.model == models.MODEL_KMEANS:
        rng = np.random.default_rng(cfg.seed)
        idx = rng.choice(dataset.n_rows, size=cfg.k, replace=False)
        centroids = dataset.features[np.sort(idx)].ravel()
        put(GLOBAL_MODEL_KEY, encode_update(centroids))
    return keys


def _fresh_state(cfg: JobConfig, rank: int, dim: int, env) -> WorkerState:
    if cfg.model == models.MODEL_KMEANS:
        blob = env.comm(lambda: env.store.get(GLOBAL_MODEL_KEY))
        if blob is None:
            raise FaasmlError("initial centroids missing from store")
        model, _ = decode_update(blob)
    else:
        model = np.zeros(dim)
    extras = []
    if cfg.algorithm == optimizers.ALGO_ADMM:
        extras = [np.zeros(dim), np.zeros(dim)]  # dual u_i, consensus z
    return WorkerState(rank, 0, 0, model, extras)


def _pause_needed(env, cfg: JobConfig) -> bool:
    elapsed = env.incarnation_elapsed()
    if elapsed > cfg.lifetime_s:
        # The platform would have killed this worker mid-iteration; pausing
        # at boundaries cannot support iterations longer than the lifetime.
        raise LifetimeExceeded(
            f"worker {env.rank} overran its {cfg.lifetime_s}s lifetime "
            f"mid-iteration (elapsed {elapsed:.3f}s); a single iteration "
            "longer than the worker lifetime is not supported")
    if elapsed < cfg.lifetime_s - cfg.checkpoint_margin_s:
        return False
    if env.iterations_this_incarnation == 0:
        raise LifetimeExceeded(
            f"worker {env.rank}: start-up and restore alone exceed the "
            f"{cfg.lifetime_s}s lifetime minus the {cfg.checkpoint_margin_s}s "
            "margin; pausing cannot make progress")
    return True


def _ga_iters_per_epoch(cfg: JobConfig, n_rows: int) -> int:
    max_part = -(-n_rows // cfg.workers)
    return -(-max_part // cfg.batch_size)


def _prev_round_of(cfg: JobConfig, n_rows: int, epoch: int, iteration: int):
    """Round id preceding (epoch, iteration) for garbage collection."""
    if cfg.algorithm == optimizers.ALGO_GA_SGD and cfg.sync == SYNC_BSP:
        if iteration > 0:
            return (epoch, iteration - 1)
        if epoch > 0:
            return (epoch - 1, _ga_iters_per_epoch(cfg, n_rows) - 1)
        return None
    step = cfg.local_epochs if cfg.algorithm in (optimizers.ALGO_MA_SGD,
                                                 optimizers.ALGO_ADMM) else 1
    if epoch >= step:
        return (epoch - step, 0)
    return None


def _make_ctx(env, cfg: JobConfig, state: WorkerState, n_rows: int) -> CollectiveContext:
    reduce_op = REDUCE_SUM if cfg.algorithm in (optimizers.ALGO_ADMM,
                                                optimizers.ALGO_KMEANS_EM) \
        else REDUCE_WEIGHTED_MEAN
    ctx = CollectiveContext(store=env.store, n_workers=cfg.workers,
                            my_rank=env.rank, epoch=state.epoch,
                            iteration=state.iteration, reduce_op=reduce_op,
                            poll_interval_s=cfg.poll_interval_s,
                            timeout_s=cfg.timeout_s)
    ctx._prev_round = _prev_round_of(cfg, n_rows, state.epoch, state.iteration)
    return ctx


def _reduce_round(env, cfg: JobConfig, ctx: CollectiveContext, epoch: int,
                  iteration: int, vector: np.ndarray, weight: float) -> np.ndarray:
    ctx.set_round(epoch, iteration)
    if cfg.pattern == PATTERN_SCATTERREDUCE:
        return env.comm(lambda: scatterreduce(ctx, vector, weight))
    return env.comm(lambda: allreduce(ctx, vector, weight))


def worker_main(env, cfg: JobConfig, job: JobState, dataset: Dataset) -> WorkerState:
    """Full worker lifecycle: start, load, train, pause/respawn as needed."""
    rank = env.rank
    env.begin_incarnation(initial=True)
    part = env.load_partition()
    dim = models.model_dim(cfg.model, dataset.n_features, cfg.k)
    state = _fresh_state(cfg, rank, dim, env)
    while True:
        if cfg.sync == SYNC_ASP:
            outcome = _asp_sgd(env, cfg, job, part, state)
        elif cfg.algorithm == optimizers.ALGO_GA_SGD:
            outcome = _bsp_ga(env, cfg, job, part, state, dataset)
        elif cfg.algorithm == optimizers.ALGO_MA_SGD:
            outcome = _bsp_ma(env, cfg, job, part, state, dataset)
        elif cfg.algorithm == optimizers.ALGO_ADMM:
            outcome = _bsp_admm(env, cfg, job, part, state, dataset)
        else:
            outcome = _bsp_kmeans(env, cfg, job, part, state, dataset)
        if outcome == "done":
            env.close()
            return state
        # Lifetime pause: persist state, then come back as a fresh worker
        # that rebuilds everything from the checkpoint blob alone.
        ckpt_key = make_key(KIND_CKPT, src=rank)
        env.comm(lambda: env.store.put(ckpt_key, encode_checkpoint(state)))
        env.respawn()
        with job.lock:
            job.respawns[rank] += 1
        blob = env.comm(lambda: env.store.get(ckpt_key))
        if blob is None:
            raise CheckpointError(f"checkpoint for worker {rank} missing")
        state = decode_checkpoint(blob)
        if state.worker_id != rank:
            raise CheckpointError("checkpoint belongs to a different worker")
        part = env.load_partition()


def _batch_view(part: Partition, iteration: int, batch_size: int):
    lo = iteration * batch_size
    hi = min(lo + batch_size, part.n_rows)
    if lo >= hi:
        return part.features[:0], part.labels[:0]
    return part.features[lo:hi], part.labels[lo:hi]


def _bsp_ga(env, cfg, job, part, state, dataset) -> str:
    loss_grad = models.LOSS_GRAD[cfg.model]
    iters = _ga_iters_per_epoch(cfg, dataset.n_rows)
    ctx = _make_ctx(env, cfg, state, dataset.n_rows)
    if job.stop:
        return "done"
    while True:
        while state.iteration < iters:
            if _pause_needed(env, cfg):
                return "pause"
            it = state.iteration
            X, y = _batch_view(part, it, cfg.batch_size)
            rows = X.shape[0]
            if rows:
                _, grad = env.run_compute(lambda: loss_grad(state.model, X, y),
                                          rows)
            else:
                grad = np.zeros_like(state.model)
            if cfg.pattern == PATTERN_PS:
                env.ps_push(grad if rows else np.zeros_like(state.model),
                            state.epoch, it)
                state.model = env.ps_pull()
            else:
                merged = _reduce_round(env, cfg, ctx, state.epoch, it, grad,
                                       float(rows))
                state.model = optimizers.sgd_step(state.model, merged, cfg.lr)
            state.iteration += 1
            env.note_iteration()
        state.epoch += 1
        state.iteration = 0
        if env.epoch_eval(state.epoch, state.model):
            return "done"


def _bsp_ma(env, cfg, job, part, state, dataset) -> str:
    loss_grad = models.LOSS_GRAD[cfg.model]
    ctx = _make_ctx(env, cfg, state, dataset.n_rows)
    if job.stop:
        return "done"
    while True:
        if _pause_needed(env, cfg):
            return "pause"
        local = env.run_compute(
            lambda: optimizers.local_sgd_epochs(
                loss_grad, part.features, part.labels, state.model, cfg.lr,
                cfg.batch_size, cfg.local_epochs),
            part.n_rows * cfg.local_epochs)
        state.model = _reduce_round(env, cfg, ctx, state.epoch, 0, local,
                                    float(part.n_rows))
        state.epoch += cfg.local_epochs
        env.note_iteration()
        if env.epoch_eval(state.epoch, state.model):
            return "done"


def _bsp_admm(env, cfg, job, part, state, dataset) -> str:
    loss_grad = models.LOSS_GRAD[cfg.model]
    ctx = _make_ctx(env, cfg, state, dataset.n_rows)
    if job.stop:
        return "done"
    while True:
        if _pause_needed(env, cfg):
            return "pause"
        u, z = state.extras
        w_i = env.run_compute(
            lambda: optimizers.admm_local_solve(
                loss_grad, part.features, part.labels, z, u, cfg.rho, cfg.lr,
                cfg.local_epochs, cfg.batch_size),
            part.n_rows * cfg.local_epochs)
        total = _reduce_round(env, cfg, ctx, state.epoch, 0, w_i + u, 1.0)
        z_new = (cfg.rho * total) / (cfg.workers * cfg.rho + cfg.l2)
        u = optimizers.admm_dual_update(u, w_i, z_new)
        state.extras = [u, z_new]
        state.model = z_new
        state.epoch += cfg.local_epochs
        env.note_iteration()
        if env.epoch_eval(state.epoch, state.model):
            return "done"


def _bsp_kmeans(env, cfg, job, part, state, dataset) -> str:
    ctx = _make_ctx(env, cfg, state, dataset.n_rows)
    d = dataset.n_features
    if job.stop:
        return "done"
    while True:
        if _pause_needed(env, cfg):
            return "pause"
        stats = env.run_compute(
            lambda: models.kmeans_assign_stats(state.model, part.features, cfg.k),
            part.n_rows)
        total = _reduce_round(env, cfg, ctx, state.epoch, 0,
                              stats.to_vector(), 1.0)
        merged = models.ClusterStats.from_vector(total, cfg.k, d)
        state.model = optimizers.kmeans_merge([merged], state.model, cfg.k, d)
        state.epoch += 1
        env.note_iteration()
        if env.epoch_eval(state.epoch, state.model):
            return "done"


def _asp_sgd(env, cfg, job, part, state) -> str:
    """Asynchronous SGD: read the global model, train one epoch, write back."""
    loss_grad = models.LOSS_GRAD[cfg.model]
    while True:
        if job.stop or state.epoch >= cfg.max_epochs:
            return "done"
        if _pause_needed(env, cfg):
            return "pause"
        blob = env.comm(lambda: env.store.get(GLOBAL_MODEL_KEY))
        model = decode_update(blob)[0] if blob is not None \
            else np.zeros_like(state.model)
        lr = optimizers.lr_schedule(cfg.lr, state.epoch,
                                    optimizers.SCHEDULE_INV_SQRT)
        model = env.run_compute(
            lambda: optimizers.local_sgd_epochs(
                loss_grad, part.features, part.labels, model, lr,
                cfg.batch_size, 1),
            part.n_rows)
        env.comm(lambda: env.store.put(GLOBAL_MODEL_KEY, encode_update(model)))
        state.model = model
        state.epoch += 1
        env.note_iteration()
        if env.epoch_report(state.epoch, model):
            return "done"


# ---------------------------------------------------------------------------
# Job drivers
# ---------------------------------------------------------------------------


def _resolve_profiles(cfg: JobConfig):
    profiles = builtin_profiles()
    if cfg.channel not in profiles:
        raise ConfigError(f"unknown channel {cfg.channel!r}; "
                          f"choose from {sorted(profiles)}")
    comm = profile_with_overrides(profiles[cfg.channel], cfg.channel_overrides)
    loading = profiles.get(cfg.loading_channel)
    if loading is None:
        raise ConfigError(f"unknown loading channel {cfg.loading_channel!r}")
    ps = profiles.get(cfg.ps_channel)
    if ps is None:
        raise ConfigError(f"unknown ps channel {cfg.ps_channel!r}")
    return comm, loading, ps


def _epoch_seconds(cfg: JobConfig, dataset: Dataset) -> float:
    if cfg.compute_seconds_per_epoch is not None:
        return float(cfg.compute_seconds_per_epoch)
    return dataset.n_rows * dataset.n_features / NOMINAL_ROW_FEATURES_PER_S


def run_job(cfg: JobConfig) -> JobReport:
    """Execute a full training job and return its report."""
    cfg.validate()
    dataset = cfg.dataset.load(cfg)
    if dataset.n_rows < cfg.workers:
        raise ConfigError(f"job.workers: {cfg.workers} workers need at least "
                          f"as many rows, dataset has {dataset.n_rows}")
    if cfg.model in (models.MODEL_LR, models.MODEL_SVM):
        labels = np.unique(dataset.labels)
        if not np.all(np.isin(labels, (-1.0, 1.0))):
            raise ConfigError("classification labels must be -1/+1")
    job = JobState(cfg, dataset)
    dim = models.model_dim(cfg.model, dataset.n_features, cfg.k)
    # Epoch-zero snapshot: the initial loss anchors the trace and lets a
    # trivially-satisfied threshold stop the job before any round runs.
    if cfg.model == models.MODEL_KMEANS:
        rng = np.random.default_rng(cfg.seed)
        idx = rng.choice(dataset.n_rows, size=cfg.k, replace=False)
        init_model = dataset.features[np.sort(idx)].ravel()
    else:
        init_model = np.zeros(dim)
    job.central_eval(0, init_model, 0.0, enforce_max=False)
    if cfg.mode == MODE_SIMULATE:
        states, envs, final_global = _drive_sim(cfg, dataset, job, dim)
    else:
        states, envs, final_global = _drive_real(cfg, dataset, job, dim)
    return _build_report(cfg, dataset, job, states, envs, final_global)


def _drive_sim(cfg: JobConfig, dataset: Dataset, job: JobState, dim: int):
    comm_profile, loading_profile, ps_profile = _resolve_profiles(cfg)
    kernel = SimKernel()
    starter(kernel.preload, dataset, cfg)
    sim_ps = SimPS(kernel, ps_profile, dim, cfg.lr, cfg.workers,
                   cfg.timeout_s) if cfg.pattern == PATTERN_PS else None
    epoch_seconds = _epoch_seconds(cfg, dataset)
    envs: dict[int, SimEnv] = {}
    states: dict[int, WorkerState] = {}

    def make_body(rank):
        def body():
            env = SimEnv(rank, cfg, job, kernel, comm_profile, loading_profile,
                         sim_ps, epoch_seconds, dataset.n_rows)
            envs[rank] = env
            states[rank] = worker_main(env, cfg, job, dataset)
        return body

    for rank in range(cfg.workers):
        kernel.add_worker(rank, make_body(rank))
    kernel.run()
    final_global = kernel.blob_get(GLOBAL_MODEL_KEY, math.inf)
    return states, envs, final_global


def _drive_real(cfg: JobConfig, dataset: Dataset, job: JobState, dim: int):
    base = FileStore(cfg.store_dir) if cfg.store_dir else MemoryStore()
    starter(base.put, dataset, cfg)
    server = None
    ps_address = None
    if cfg.pattern == PATTERN_PS:
        server = ps_serve(dim, cfg.lr, expected_pushes=cfg.workers)
        ps_address = server.address
    barrier = threading.Barrier(cfg.workers, action=lambda: _real_eval_action(job))
    envs: dict[int, RealEnv] = {}
    states: dict[int, WorkerState] = {}
    errors: dict[int, BaseException] = {}

    def body(rank: int) -> None:
        env = RealEnv(rank, cfg, job, base, barrier, ps_address)
        envs[rank] = env
        try:
            states[rank] = worker_main(env, cfg, job, dataset)
        except BaseException as exc:  # noqa: BLE001 - re-raised below
            errors[rank] = exc
            barrier.abort()

    threads = [threading.Thread(target=body, args=(rank,), daemon=True)
               for rank in range(cfg.workers)]
    try:
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        if server is not None:
            server.stop()
    primary = [exc for exc in errors.values() if not isinstance(exc, JobAborted)]
    if primary:
        raise primary[0]
    if errors:
        raise next(iter(errors.values()))
    return states, envs, base.get(GLOBAL_MODEL_KEY)


def _real_eval_action(job: JobState) -> None:
    slots = job.eval_slots
    when = max(entry[0] for entry in slots.values())
    model = slots[min(slots)][1]
    epochs = slots[min(slots)][2]
    job.last_decision = job.central_eval(epochs, model, when)
    job.eval_slots = {}


def _count_rounds(cfg: JobConfig, dataset: Dataset,
                  states: dict[int, WorkerState]) -> int:
    if cfg.sync == SYNC_ASP:
        return sum(st.epoch for st in states.values())
    st = states[0]
    if cfg.algorithm == optimizers.ALGO_GA_SGD:
        return st.epoch * _ga_iters_per_epoch(cfg, dataset.n_rows) + st.iteration
    if cfg.algorithm in (optimizers.ALGO_MA_SGD, optimizers.ALGO_ADMM):
        return st.epoch // cfg.local_epochs
    return st.epoch


def _build_report(cfg: JobConfig, dataset: Dataset, job: JobState,
                  states: dict[int, WorkerState], envs: dict,
                  final_global: bytes | None) -> JobReport:
    if cfg.sync == SYNC_ASP:
        if final_global is not None:
            final_model, _ = decode_update(final_global)
        else:
            final_model = np.zeros(models.model_dim(cfg.model,
                                                    dataset.n_features, cfg.k))
    else:
        final_model = states[0].model
    result = job.evaluate_model(final_model)
    per_worker = []
    for rank in sorted(envs):
        env = envs[rank]
        entry = {"rank": rank, "total_s": sum(env.phases.values())}
        entry.update({f"{p}_s": env.phases[p] for p in PHASES})
        per_worker.append(entry)
    slowest = max(per_worker, key=lambda e: (e["total_s"], e["rank"]))
    breakdown = {f"{p}_s": slowest[f"{p}_s"] for p in PHASES}
    breakdown["total_s"] = slowest["total_s"]
    nbytes = sum(env.store.bytes_put + env.store.bytes_got + env.ps_bytes
                 for env in envs.values())
    comm_profile, _, ps_profile = _resolve_profiles(cfg)
    extra_vm = ps_profile.hourly_price_usd if cfg.pattern == PATTERN_PS else 0.0
    cost = costmodel.dollar_cost(breakdown["total_s"], cfg.workers, cfg.pricing,
                                 "faas",
                                 channel_hourly_usd=comm_profile.hourly_price_usd,
                                 extra_vm_hourly=extra_vm)
    epochs = max(st.epoch for st in states.values())
    return JobReport(
        converged=job.converged,
        epochs=epochs,
        rounds=_count_rounds(cfg, dataset, states),
        loss_trace=list(job.trace),
        breakdown=breakdown,
        bytes_transferred=nbytes,
        dollar_cost_usd=cost,
        final_loss=result.loss,
        final_metric=result.metric,
        respawns=sum(job.respawns.values()),
        workers=cfg.workers,
        algorithm=cfg.algorithm,
        pattern=cfg.pattern,
        sync=cfg.sync,
        channel=cfg.channel,
        mode=cfg.mode,
        seed=cfg.seed,
        final_model_sha256=hashlib.sha256(
            np.ascontiguousarray(final_model).tobytes()).hexdigest(),
        per_worker=per_worker,
        final_model=np.asarray(final_model),
        model_trace=job.model_trace if cfg.keep_model_trace else None,
        store_trace=job.store_trace if cfg.keep_store_trace else None,
    )
