"""Deterministic virtual-clock engine for simulate mode.

Workers run as ordinary threads, but the kernel enforces lockstep: exactly one
thread executes at any instant, and side effects (store and PS operations,
barriers) always run on the worker whose virtual clock is smallest, with rank
as the tie break. That serializes every effect in virtual-time order, so runs
are bit-reproducible regardless of OS scheduling.

The simulated store keeps versioned values: a put started at t and charged c
seconds becomes visible at t + c, and a reader only observes versions whose
visibility time is at or before the read's start. Polling is event-driven:
a blocked worker is woken when a matching put completes and then charges one
list latency for the poll that observed it.
"""

from __future__ import annotations

import bisect
import math
import threading
from dataclasses import dataclass

import numpy as np

from .errors import FaasmlError, JobAborted, StragglerTimeout
from .storage import DEFAULT_TIMEOUT_S, BlobStore, ChannelProfile

PHASE_STARTUP = "startup"
PHASE_LOADING = "loading"
PHASE_COMPUTE = "compute"
PHASE_COMMUNICATION = "communication"

PHASES = (PHASE_STARTUP, PHASE_LOADING, PHASE_COMPUTE, PHASE_COMMUNICATION)

_RUNNABLE = "runnable"
_BLOCKED = "blocked"
_DONE = "done"


class _Killed(BaseException):
    """Internal signal that tears down peers after a failure."""


@dataclass
class _Waiter:
    kind: str                      # "keys" | "barrier" | "ps"
    deadline: float = math.inf
    prefix: str = ""
    min_count: int = 0
    barrier_id: object = None
    ps_round: object = None
    timed_out: bool = False
    wake_time: float | None = None


class SimTask:
    """One simulated worker: thread, virtual clock, and phase accounting."""

    def __init__(self, rank: int, fn):
        self.rank = rank
        self.fn = fn
        self.clock = 0.0
        self.phases = {p: 0.0 for p in PHASES}
        self.state = _RUNNABLE
        self.resume = threading.Event()
        self.waiter: _Waiter | None = None
        self.killed = False
        self.error: BaseException | None = None
        self.error_clock = math.inf
        self.result = None
        self.thread: threading.Thread | None = None


class SimKernel:
    """Scheduler, versioned blob state, and synchronization primitives."""

    def __init__(self):
        self.tasks: dict[int, SimTask] = {}
        self._sched = threading.Event()
        # key -> sorted list of (visible_at, seq, value-or-None); None = deleted
        self._blob: dict[str, list[tuple[float, int, bytes | None]]] = {}
        self._seq = 0
        self._barriers: dict[object, dict] = {}

    # ------------------------------------------------------------------ setup

    def add_worker(self, rank: int, fn) -> SimTask:
        task = SimTask(rank, fn)
        task.thread = threading.Thread(target=self._thread_main, args=(task,),
                                       daemon=True)
        self.tasks[rank] = task
        return task

    def preload(self, key: str, value: bytes) -> None:
        """Install a blob visible from time zero (starter-side setup)."""
        self._store_version(key, value, 0.0)

    # ------------------------------------------------------------- scheduling

    def _thread_main(self, task: SimTask) -> None:
        task.resume.wait()
        task.resume.clear()
        try:
            if task.killed:
                raise _Killed()
            task.result = task.fn()
        except _Killed:
            task.error = JobAborted(f"worker {task.rank} cancelled")
            task.error_clock = math.inf  # never the primary failure
        except BaseException as exc:  # noqa: BLE001 - propagated to run()
            task.error = exc
            task.error_clock = task.clock
        finally:
            task.state = _DONE
            self._sched.set()

    def run(self) -> None:
        """Drive all workers to completion; re-raise the earliest failure."""
        for task in self.tasks.values():
            task.thread.start()
        while True:
            live = [t for t in self.tasks.values() if t.state != _DONE]
            if not live:
                break
            failed = any(t.error is not None for t in self.tasks.values()
                         if t.state == _DONE)
            if failed:
                self._kill(live)
                continue
            candidates = []
            for t in live:
                if t.state == _RUNNABLE:
                    candidates.append((t.clock, 0, t.rank, t, False))
                elif t.waiter is not None:
                    candidates.append((t.waiter.deadline, 1, t.rank, t, True))
            if not candidates:
                break
            candidates.sort(key=lambda c: (c[0], c[1], c[2]))
            when, _, _, task, is_timeout = candidates[0]
            if is_timeout:
                if math.isinf(when):
                    self._kill(live, reason="simulation deadlock: all workers "
                                            "blocked without deadlines")
                    continue
                task.waiter.timed_out = True
                task.waiter.wake_time = when
                task.state = _RUNNABLE
            self._step(task)
        errors = [t for t in self.tasks.values()
                  if t.error is not None and not isinstance(t.error, JobAborted)]
        if errors:
            first = min(errors, key=lambda t: (t.error_clock, t.rank))
            raise first.error
        aborted = [t for t in self.tasks.values() if isinstance(t.error, JobAborted)]
        if aborted:
            raise aborted[0].error

    def _step(self, task: SimTask) -> None:
        self._sched.clear()
        task.resume.set()
        self._sched.wait()

    def _kill(self, live: list[SimTask], reason: str | None = None) -> None:
        for t in live:
            t.killed = True
            if reason is not None and t.error is None:
                t.error = FaasmlError(reason)
                t.error_clock = t.clock
            if t.state == _BLOCKED:
                t.state = _RUNNABLE
                t.waiter = None
        # Resume them one at a time so the lockstep invariant holds.
        for t in live:
            if t.state != _DONE:
                self._step(t)

    # ------------------------------------------------- worker-thread services

    def _yield(self, task: SimTask) -> None:
        """Hand control back; returns once this task is the earliest runnable."""
        self._sched.set()
        task.resume.wait()
        task.resume.clear()
        if task.killed:
            raise _Killed()

    def charge(self, task: SimTask, seconds: float, phase: str) -> None:
        if seconds < 0.0:
            raise FaasmlError("cannot charge negative time")
        task.clock += seconds
        task.phases[phase] += seconds

    def before_effect(self, task: SimTask) -> None:
        self._yield(task)

    def _block(self, task: SimTask, waiter: _Waiter) -> _Waiter:
        task.waiter = waiter
        task.state = _BLOCKED
        self._yield(task)
        task.waiter = None
        if waiter.wake_time is not None and waiter.wake_time > task.clock:
            jump = waiter.wake_time - task.clock
            self.charge(task, jump, PHASE_COMMUNICATION)
        return waiter

    # ----------------------------------------------------------- blob storage

    def _store_version(self, key: str, value: bytes | None, visible_at: float) -> None:
        versions = self._blob.setdefault(key, [])
        self._seq += 1
        bisect.insort(versions, (visible_at, self._seq, value))

    def _value_at(self, key: str, when: float) -> bytes | None:
        versions = self._blob.get(key)
        if not versions:
            return None
        idx = bisect.bisect_right(versions, (when, math.inf, b"")) - 1
        if idx < 0:
            return None
        return versions[idx][2]

    def blob_put(self, key: str, value: bytes, visible_at: float) -> None:
        self._store_version(key, bytes(value), visible_at)
        self._wake_key_watchers(key, visible_at)

    def blob_get(self, key: str, when: float) -> bytes | None:
        return self._value_at(key, when)

    def blob_list(self, prefix: str, when: float) -> list[str]:
        return sorted(k for k in self._blob
                      if k.startswith(prefix) and self._value_at(k, when) is not None)

    def blob_delete(self, prefix: str, when: float) -> int:
        count = 0
        for key in list(self._blob):
            if key.startswith(prefix) and self._value_at(key, when) is not None:
                self._store_version(key, None, when)
                count += 1
        return count

    def _wake_key_watchers(self, key: str, visible_at: float) -> None:
        # Puts of different sizes can become visible out of execution order,
        # so probe every known version time for the earliest satisfying count
        # rather than only this put's own visibility time.
        for t in self.tasks.values():
            if t.state != _BLOCKED or t.waiter is None or t.waiter.kind != "keys":
                continue
            if not key.startswith(t.waiter.prefix):
                continue
            ready_at = self._earliest_count_time(t.waiter.prefix,
                                                 t.waiter.min_count, -1.0)
            if ready_at is not None:
                t.waiter.wake_time = max(ready_at, t.clock)
                t.state = _RUNNABLE

    def _earliest_count_time(self, prefix: str, min_count: int,
                             after: float) -> float | None:
        """Earliest time > after when already-written versions satisfy the count."""
        times = sorted({entry[0]
                        for key, versions in self._blob.items()
                        if key.startswith(prefix)
                        for entry in versions if entry[0] > after})
        for when in times:
            if len(self.blob_list(prefix, when)) >= min_count:
                return when
        return None

    def block_for_keys(self, task: SimTask, prefix: str, min_count: int,
                       timeout_s: float) -> bool:
        """Block until count reached or timeout; True means timed out."""
        # The caller's poll saw a snapshot taken before its own list latency
        # was charged, so a key may already be visible by now, or a put may
        # have executed whose visibility lies ahead; either way, schedule the
        # wake instead of waiting for a future put.
        if len(self.blob_list(prefix, task.clock)) >= min_count:
            return False
        in_flight = self._earliest_count_time(prefix, min_count, task.clock)
        if in_flight is not None:
            self.charge(task, in_flight - task.clock, PHASE_COMMUNICATION)
            return False
        waiter = _Waiter(kind="keys", prefix=prefix, min_count=min_count,
                         deadline=task.clock + timeout_s)
        waiter = self._block(task, waiter)
        return waiter.timed_out

    # --------------------------------------------------------------- barriers

    def barrier(self, task: SimTask, barrier_id, parties: int, action=None):
        """All parties meet; clocks align to the latest arrival.

        `action(max_clock)` runs exactly once, in the last arriving worker's
        thread, and its return value is handed to every participant.
        """
        self.before_effect(task)
        state = self._barriers.setdefault(
            barrier_id, {"arrived": 0, "max": 0.0, "result": None, "done": False})
        state["arrived"] += 1
        state["max"] = max(state["max"], task.clock)
        if state["arrived"] == parties:
            if action is not None:
                state["result"] = action(state["max"])
            state["done"] = True
            for t in self.tasks.values():
                if (t.state == _BLOCKED and t.waiter is not None
                        and t.waiter.kind == "barrier"
                        and t.waiter.barrier_id == barrier_id):
                    t.waiter.wake_time = max(state["max"], t.clock)
                    t.state = _RUNNABLE
            if state["max"] > task.clock:
                self.charge(task, state["max"] - task.clock, PHASE_COMMUNICATION)
            return state["result"]
        self._block(task, _Waiter(kind="barrier", barrier_id=barrier_id))
        return state["result"]


class SimWorkerStore(BlobStore):
    """Per-worker facade over the kernel's blob state with profile charging."""

    def __init__(self, kernel: SimKernel, task: SimTask, profile: ChannelProfile):
        self.kernel = kernel
        self.task = task
        self.profile = profile

    def put(self, key: str, value: bytes) -> None:
        self.check_key(key)
        self.profile.check_size(len(value))
        self.kernel.before_effect(self.task)
        self.kernel.charge(self.task, self.profile.transfer_seconds(len(value)),
                           PHASE_COMMUNICATION)
        self.kernel.blob_put(key, value, self.task.clock)

    def get(self, key: str) -> bytes | None:
        self.kernel.before_effect(self.task)
        value = self.kernel.blob_get(key, self.task.clock)
        nbytes = len(value) if value is not None else 0
        self.kernel.charge(self.task, self.profile.transfer_seconds(nbytes),
                           PHASE_COMMUNICATION)
        return value

    def list(self, prefix: str = "") -> list[str]:
        self.kernel.before_effect(self.task)
        keys = self.kernel.blob_list(prefix, self.task.clock)
        self.kernel.charge(self.task, self.profile.latency_s, PHASE_COMMUNICATION)
        return keys

    def delete(self, prefix: str) -> int:
        self.kernel.before_effect(self.task)
        count = self.kernel.blob_delete(prefix, self.task.clock)
        self.kernel.charge(self.task, self.profile.latency_s, PHASE_COMMUNICATION)
        return count

    def wait_for_keys(self, prefix: str, min_count: int,
                      timeout_s: float = DEFAULT_TIMEOUT_S,
                      poll_interval_s: float = 0.0) -> list[str]:
        # Event-driven: block until a put completes, then charge one list
        # latency for the poll that observed it.
        while True:
            keys = self.list(prefix)
            if len(keys) >= min_count:
                return keys
            timed_out = self.kernel.block_for_keys(self.task, prefix, min_count,
                                                   timeout_s)
            if timed_out:
                found = len(self.kernel.blob_list(prefix, self.task.clock))
                raise StragglerTimeout(
                    f"waited {timeout_s}s (virtual) for {min_count} keys under "
                    f"{prefix!r}, found {found}")


class SimPS:
    """Simulated parameter-server link with BSP-at-server semantics."""

    def __init__(self, kernel: SimKernel, profile: ChannelProfile, dim: int,
                 lr: float, expected_pushes: int,
                 timeout_s: float = DEFAULT_TIMEOUT_S):
        self.kernel = kernel
        self.profile = profile
        self.dim = dim
        self.lr = lr
        self.expected = expected_pushes
        self.timeout_s = timeout_s
        self.model = np.zeros(dim)
        self.version = 0
        self._pending: dict[tuple[int, int], list[tuple[np.ndarray, float]]] = {}
        self._applied: dict[tuple[int, int], float] = {}

    def _blob_bytes(self) -> int:
        return 14 + 8 * (self.dim + 1)

    def push(self, task: SimTask, grad: np.ndarray, epoch: int,
             iteration: int) -> None:
        if grad.shape != (self.dim,):
            raise FaasmlError("dim mismatch in simulated push")
        self.kernel.before_effect(task)
        self.kernel.charge(task, self.profile.transfer_seconds(self._blob_bytes()),
                           PHASE_COMMUNICATION)
        round_id = (epoch, iteration)
        bucket = self._pending.setdefault(round_id, [])
        bucket.append((grad, task.clock))
        if len(bucket) == self.expected:
            mean = np.zeros(self.dim)
            for g, _ in bucket:
                mean += g
            mean /= self.expected
            self.model = self.model - self.lr * mean
            self.version += 1
            # The update applies once the slowest push has fully arrived.
            applied_at = max(arrival for _, arrival in bucket)
            self._applied[round_id] = applied_at
            del self._pending[round_id]
            for t in self.kernel.tasks.values():
                if (t.state == _BLOCKED and t.waiter is not None
                        and t.waiter.kind == "ps" and t.waiter.ps_round == round_id):
                    t.waiter.wake_time = max(applied_at, t.clock)
                    t.state = _RUNNABLE
            if applied_at > task.clock:
                self.kernel.charge(task, applied_at - task.clock,
                                   PHASE_COMMUNICATION)
            return
        waiter = _Waiter(kind="ps", ps_round=round_id,
                         deadline=task.clock + self.timeout_s)
        waiter = self.kernel._block(task, waiter)
        if waiter.timed_out:
            raise StragglerTimeout(
                f"push barrier for round {round_id} timed out after "
                f"{self.timeout_s}s (virtual)")

    def pull(self, task: SimTask) -> tuple[int, np.ndarray]:
        self.kernel.before_effect(task)
        self.kernel.charge(task, self.profile.transfer_seconds(self._blob_bytes()),
                           PHASE_COMMUNICATION)
        return self.version, self.model.copy()
