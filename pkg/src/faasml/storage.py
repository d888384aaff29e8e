"""Key-value blob stores and the channel personas they emulate.

Backends: an in-memory map and a filesystem directory (put = write temp file,
then atomic rename). A profiled wrapper charges a virtual clock for each
operation: latency + bytes/bandwidth for put/get, latency only for list and
delete. 1 MB = 1e6 bytes so charges are bit-reproducible.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, replace

from .errors import BlobTooLarge, ConfigError, StragglerTimeout

DEFAULT_POLL_INTERVAL_S = 0.01
DEFAULT_TIMEOUT_S = 600.0


@dataclass(frozen=True)
class ChannelProfile:
    """Latency/bandwidth/limits persona of a communication channel."""

    name: str
    bandwidth_MBps: float
    latency_s: float
    startup_s: float = 0.0
    max_item_bytes: int | None = None
    hourly_price_usd: float = 0.0

    def __post_init__(self):
        if self.bandwidth_MBps <= 0.0:
            raise ConfigError("bandwidth must be positive")
        if self.latency_s < 0.0 or self.startup_s < 0.0:
            raise ConfigError("latency and startup must be non-negative")

    def transfer_seconds(self, nbytes: int) -> float:
        return self.latency_s + nbytes / (self.bandwidth_MBps * 1e6)

    def check_size(self, nbytes: int) -> None:
        if self.max_item_bytes is not None and nbytes > self.max_item_bytes:
            raise BlobTooLarge(
                f"payload of {nbytes} bytes exceeds {self.name} item limit "
                f"of {self.max_item_bytes} bytes")


def builtin_profiles() -> dict[str, ChannelProfile]:
    """Measured channel personas; any field may be overridden via config.

    The dynamodb persona has no published latency/bandwidth here, so it
    reuses the s3 timing with its own 400 KB item cap. The ps_link persona
    is the effective FaaS-to-VM rate (75 MB moved in 1.85 s, serialization
    included).
    """
    profiles = [
        ChannelProfile("s3", bandwidth_MBps=65.0, latency_s=8e-2, startup_s=0.0,
                       hourly_price_usd=0.0),
        ChannelProfile("elasticache_t3", bandwidth_MBps=630.0, latency_s=1e-2,
                       startup_s=120.0, hourly_price_usd=0.034),
        ChannelProfile("elasticache_m5", bandwidth_MBps=1260.0, latency_s=1e-2,
                       startup_s=120.0, hourly_price_usd=0.156),
        ChannelProfile("dynamodb", bandwidth_MBps=65.0, latency_s=8e-2,
                       startup_s=0.0, max_item_bytes=400 * 1024,
                       hourly_price_usd=0.0),
        ChannelProfile("ebs", bandwidth_MBps=1950.0, latency_s=3e-5),
        ChannelProfile("net_t2", bandwidth_MBps=120.0, latency_s=5e-4),
        ChannelProfile("net_c5", bandwidth_MBps=225.0, latency_s=1.5e-4),
        ChannelProfile("ps_link", bandwidth_MBps=75.0 / 1.85, latency_s=0.0,
                       startup_s=0.0, hourly_price_usd=0.68),
    ]
    return {p.name: p for p in profiles}


def profile_with_overrides(profile: ChannelProfile, overrides: dict) -> ChannelProfile:
    for key in overrides:
        if key == "name" or not hasattr(profile, key):
            raise ConfigError(f"unknown channel profile field {key!r}")
    return replace(profile, **overrides)


class VirtualClock:
    """Per-worker elapsed-seconds accumulator used by the profiled wrapper."""

    def __init__(self, now: float = 0.0):
        self.now = float(now)

    def advance(self, seconds: float) -> None:
        if seconds < 0.0:
            raise ConfigError("cannot advance a clock backwards")
        self.now += seconds


class BlobStore:
    """Abstract key-value blob store; keys are UTF-8 strings <= 512 bytes."""

    def put(self, key: str, value: bytes) -> None:
        raise NotImplementedError

    def get(self, key: str) -> bytes | None:
        raise NotImplementedError

    def list(self, prefix: str = "") -> list[str]:
        raise NotImplementedError

    def delete(self, prefix: str) -> int:
        raise NotImplementedError

    @staticmethod
    def check_key(key: str) -> None:
        if not key or len(key.encode("utf-8")) > 512:
            raise ConfigError("key must be non-empty and at most 512 UTF-8 bytes")

    def wait_for_keys(self, prefix: str, min_count: int,
                      timeout_s: float = DEFAULT_TIMEOUT_S,
                      poll_interval_s: float = DEFAULT_POLL_INTERVAL_S) -> list[str]:
        """Poll list(prefix) until at least min_count keys are present."""
        deadline = time.monotonic() + timeout_s
        while True:
            keys = self.list(prefix)
            if len(keys) >= min_count:
                return keys
            if time.monotonic() >= deadline:
                raise StragglerTimeout(
                    f"waited {timeout_s}s for {min_count} keys under {prefix!r}, "
                    f"found {len(keys)}")
            time.sleep(poll_interval_s)


class MemoryStore(BlobStore):
    """Thread-safe in-memory store; puts are atomic dict assignments."""

    def __init__(self):
        self._data: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put(self, key: str, value: bytes) -> None:
        self.check_key(key)
        with self._lock:
            self._data[key] = bytes(value)

    def get(self, key: str) -> bytes | None:
        with self._lock:
            return self._data.get(key)

    def list(self, prefix: str = "") -> list[str]:
        with self._lock:
            return sorted(k for k in self._data if k.startswith(prefix))

    def delete(self, prefix: str) -> int:
        with self._lock:
            victims = [k for k in self._data if k.startswith(prefix)]
            for k in victims:
                del self._data[k]
            return len(victims)


class FileStore(BlobStore):
    """Directory-backed store; '/' in keys maps to subdirectories.

    put writes "<path>.tmp" and renames it into place, so readers never see
    a torn write and ".tmp" files stay invisible to list.
    """

    def __init__(self, root):
        self.root = os.path.abspath(str(root))
        os.makedirs(self.root, exist_ok=True)

    def _path(self, key: str) -> str:
        path = os.path.normpath(os.path.join(self.root, key))
        if os.path.commonpath([path, self.root]) != self.root:
            raise ConfigError(f"key {key!r} escapes the store root")
        return path

    def put(self, key: str, value: bytes) -> None:
        self.check_key(key)
        path = self._path(key)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        # Unique temp name: concurrent writers to one key must not share it.
        tmp = f"{path}.{os.getpid()}.{threading.get_ident()}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(value)
        os.replace(tmp, path)

    def get(self, key: str) -> bytes | None:
        try:
            with open(self._path(key), "rb") as fh:
                return fh.read()
        except FileNotFoundError:
            return None

    def list(self, prefix: str = "") -> list[str]:
        keys = []
        for dirpath, _, filenames in os.walk(self.root):
            for name in filenames:
                if name.endswith(".tmp"):
                    continue
                rel = os.path.relpath(os.path.join(dirpath, name), self.root)
                key = rel.replace(os.sep, "/")
                if key.startswith(prefix):
                    keys.append(key)
        return sorted(keys)

    def delete(self, prefix: str) -> int:
        count = 0
        for key in self.list(prefix):
            try:
                os.remove(self._path(key))
                count += 1
            except FileNotFoundError:
                pass
        return count


class ProfiledStore(BlobStore):
    """Charge a virtual clock per operation without changing behavior."""

    def __init__(self, inner: BlobStore, profile: ChannelProfile,
                 clock: VirtualClock):
        self.inner = inner
        self.profile = profile
        self.clock = clock

    def put(self, key: str, value: bytes) -> None:
        self.profile.check_size(len(value))
        self.clock.advance(self.profile.transfer_seconds(len(value)))
        self.inner.put(key, value)

    def get(self, key: str) -> bytes | None:
        value = self.inner.get(key)
        nbytes = len(value) if value is not None else 0
        self.clock.advance(self.profile.transfer_seconds(nbytes))
        return value

    def list(self, prefix: str = "") -> list[str]:
        self.clock.advance(self.profile.latency_s)
        return self.inner.list(prefix)

    def delete(self, prefix: str) -> int:
        self.clock.advance(self.profile.latency_s)
        return self.inner.delete(prefix)


def with_profile(store: BlobStore, profile: ChannelProfile,
                 clock: VirtualClock) -> ProfiledStore:
    """Wrap a store so every call charges the caller's virtual clock."""
    return ProfiledStore(store, profile, clock)


class CountingStore(BlobStore):
    """Instrument a store with transfer counts, byte totals, and an op trace.

    Transfers are puts and gets; list/delete are recorded in the trace but do
    not count as transfers. A shared trace list (with its own sequence) can be
    passed so several per-worker wrappers log into one ordered trace.
    """

    def __init__(self, inner: BlobStore, trace: list | None = None, label=None):
        self.inner = inner
        self.puts = 0
        self.gets = 0
        self.bytes_put = 0
        self.bytes_got = 0
        self.trace = trace if trace is not None else []
        self.label = label
        self._lock = threading.Lock()

    @property
    def transfers(self) -> int:
        return self.puts + self.gets

    def _record(self, op: str, key: str, nbytes: int) -> None:
        with self._lock:
            self.trace.append((len(self.trace), op, key, nbytes, self.label))

    def put(self, key: str, value: bytes) -> None:
        self.inner.put(key, value)
        self.puts += 1
        self.bytes_put += len(value)
        self._record("put", key, len(value))

    def get(self, key: str) -> bytes | None:
        value = self.inner.get(key)
        if value is not None:
            self.gets += 1
            self.bytes_got += len(value)
            self._record("get", key, len(value))
        return value

    def list(self, prefix: str = "") -> list[str]:
        return self.inner.list(prefix)

    def delete(self, prefix: str) -> int:
        n = self.inner.delete(prefix)
        self._record("delete", prefix, 0)
        return n

    def wait_for_keys(self, prefix: str, min_count: int,
                      timeout_s: float = DEFAULT_TIMEOUT_S,
                      poll_interval_s: float = DEFAULT_POLL_INTERVAL_S) -> list[str]:
        return self.inner.wait_for_keys(prefix, min_count, timeout_s,
                                        poll_interval_s)
