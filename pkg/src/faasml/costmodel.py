"""Analytical end-to-end time and dollar-cost model, plus what-if scenarios.

Per-epoch structure of both infrastructures:

    faas(w) = startup_faas(w) + s/B_s3
              + R_f * f_f(w) * ((3w-2) * ((m/w)/B_sel + L_sel) + C_f/w)
    iaas(w) = startup_iaas(w) + s/B_s3
              + R_i * f_i(w) * ((2w-2) * ((m/w)/B_net + L_net) + C_i/w)

where s and m are dataset/model MB, R the single-worker epochs to converge,
f(w) the convergence scaling factor (1.0 unless measured), C the
single-worker compute seconds per epoch, and the storage-side channel is
either the object store or the in-memory cache. The communication constant
counts remote transfers per synchronization round: the storage-mediated path
needs 3w-2 of them, the direct network path 2w-2. Note the functional form
charges every transfer at size m/w, and at w=1 the faas form leaves a single
residual latency term; both quirks are kept as-is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import models, optimizers
from .data import Dataset
from .errors import ConfigError, EstimateFailed

# Measured startup seconds at w = 10, 50, 100, 200.
DEFAULT_FAAS_STARTUP = {10: 1.2, 50: 11.0, 100: 18.0, 200: 35.0}
DEFAULT_IAAS_STARTUP = {10: 132.0, 50: 160.0, 100: 292.0, 200: 606.0}

CHANNEL_S3 = "s3"
CHANNEL_CACHE = "cache"


def interp_startup(table: dict[int, float], w: int, kind: str) -> float:
    """Piecewise-linear between measured points; held flat above the last one.

    Below the smallest measured point, FaaS scales near-linearly in w so the
    value is scaled by w/w_min; IaaS holds the w_min value (one VM still pays
    the full provisioning path).
    """
    if w < 1:
        raise ConfigError("worker count must be >= 1")
    points = sorted(table.items())
    ws = [p[0] for p in points]
    vals = [p[1] for p in points]
    if w <= ws[0]:
        if kind == "faas":
            return vals[0] * w / ws[0]
        return vals[0]
    if w >= ws[-1]:
        return vals[-1]
    return float(np.interp(w, ws, vals))


def scaling_factor(table: dict[int, float] | None, w: int) -> float:
    """Convergence scaling factor f(w); identity when no table is supplied."""
    if table is None:
        return 1.0
    points = sorted(table.items())
    ws = [p[0] for p in points]
    vals = [p[1] for p in points]
    if w <= ws[0]:
        return vals[0]
    if w >= ws[-1]:
        return vals[-1]
    return float(np.interp(w, ws, vals))


@dataclass(frozen=True)
class PricingTable:
    """Per-unit prices in USD. Platform list prices, editable via config."""

    faas_worker_hourly: float = 0.176    # 3 GB function
    iaas_vm_hourly: float = 0.0464       # t2.medium
    ps_vm_hourly: float = 0.68           # c5.4xlarge parameter server
    gpu_vm_hourly: float = 0.75          # g3s.xlarge
    cache_node_hourly: float = 0.034     # cache.t3.small


@dataclass(frozen=True)
class CostModelParams:
    """Every constant of the analytical model in one place.

    Bandwidths are MB/s (1 MB = 1e6 bytes), latencies and startups seconds,
    sizes MB. Defaults are the measured platform constants.
    """

    dataset_mb: float = 8000.0
    model_mb: float = 224e-6
    workers: int = 10
    startup_faas: dict[int, float] = field(
        default_factory=lambda: dict(DEFAULT_FAAS_STARTUP))
    startup_iaas: dict[int, float] = field(
        default_factory=lambda: dict(DEFAULT_IAAS_STARTUP))
    bandwidth_s3: float = 65.0
    latency_s3: float = 8e-2
    bandwidth_ebs: float = 1950.0
    latency_ebs: float = 3e-5
    bandwidth_net: float = 120.0         # t2.medium peer link; c5 is 225
    latency_net: float = 5e-4
    bandwidth_cache: float = 630.0       # cache.t3.medium; m5.large is 1260
    latency_cache: float = 1e-2
    epochs_faas: float = 10.0            # R_f: single-worker epochs to converge
    epochs_iaas: float = 10.0            # R_i
    scaling_faas: dict[int, float] | None = None   # f_f(w) table
    scaling_iaas: dict[int, float] | None = None   # f_i(w)
    compute_epoch_faas: float = 10.0     # C_f: single-worker seconds per epoch
    compute_epoch_iaas: float = 10.0     # C_i
    faas_channel: str = CHANNEL_S3       # storage channel for the faas term
    pricing: PricingTable = field(default_factory=PricingTable)

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for name in ("bandwidth_s3", "bandwidth_ebs", "bandwidth_net",
                     "bandwidth_cache"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("latency_s3", "latency_ebs", "latency_net", "latency_cache"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.faas_channel not in (CHANNEL_S3, CHANNEL_CACHE):
            raise ConfigError("faas_channel must be 's3' or 'cache'")


@dataclass(frozen=True)
class TimeBreakdown:
    startup_s: float
    loading_s: float
    communication_s: float
    computation_s: float

    @property
    def total_s(self) -> float:
        return self.startup_s + self.loading_s + self.communication_s \
            + self.computation_s


def faas_time(p: CostModelParams, loading_bandwidth: float | None = None) -> TimeBreakdown:
    """Storage-mediated serverless execution time with per-term breakdown."""
    w = p.workers
    if p.faas_channel == CHANNEL_CACHE:
        bw, lat = p.bandwidth_cache, p.latency_cache
    else:
        bw, lat = p.bandwidth_s3, p.latency_s3
    startup = interp_startup(p.startup_faas, w, "faas")
    loading = p.dataset_mb / (loading_bandwidth or p.bandwidth_s3)
    rounds = p.epochs_faas * scaling_factor(p.scaling_faas, w)
    comm = rounds * (3 * w - 2) * ((p.model_mb / w) / bw + lat)
    compute = rounds * p.compute_epoch_faas / w
    return TimeBreakdown(startup, loading, comm, compute)


def iaas_time(p: CostModelParams, loading_bandwidth: float | None = None) -> TimeBreakdown:
    """VM-cluster execution time with per-term breakdown."""
    w = p.workers
    startup = interp_startup(p.startup_iaas, w, "iaas")
    loading = p.dataset_mb / (loading_bandwidth or p.bandwidth_s3)
    rounds = p.epochs_iaas * scaling_factor(p.scaling_iaas, w)
    comm = rounds * (2 * w - 2) * ((p.model_mb / w) / p.bandwidth_net + p.latency_net)
    compute = rounds * p.compute_epoch_iaas / w
    return TimeBreakdown(startup, loading, comm, compute)


def hybrid_time(p: CostModelParams, link_bandwidth: float, link_latency: float,
                loading_bandwidth: float | None = None) -> TimeBreakdown:
    """Serverless workers plus one VM parameter server.

    Startup overlaps the function fleet with one VM provision; communication
    is a push and a pull per worker per round, charged at the link constants.
    """
    w = p.workers
    startup = max(interp_startup(p.startup_faas, w, "faas"),
                  interp_startup(p.startup_iaas, 1, "iaas"))
    loading = p.dataset_mb / (loading_bandwidth or p.bandwidth_s3)
    rounds = p.epochs_faas * scaling_factor(p.scaling_faas, w)
    comm = rounds * (2 * w) * ((p.model_mb / w) / link_bandwidth + link_latency)
    compute = rounds * p.compute_epoch_faas / w
    return TimeBreakdown(startup, loading, comm, compute)


def dollar_cost(time_s: float, workers: int, pricing: PricingTable, infra: str,
                channel_hourly_usd: float = 0.0, extra_vm_hourly: float = 0.0) -> float:
    """USD for an execution: per-second worker charges plus hourly extras.

    faas: workers * time * per-worker rate, plus any channel node billed by
    started hour. iaas: workers * time * VM rate. extra_vm_hourly covers a
    dedicated parameter-server VM in hybrid setups.
    """
    if time_s < 0:
        raise ConfigError("time must be non-negative")
    if infra == "faas":
        unit = pricing.faas_worker_hourly / 3600.0
    elif infra == "iaas":
        unit = pricing.iaas_vm_hourly / 3600.0
    else:
        raise ConfigError("infra must be 'faas' or 'iaas'")
    cost = workers * time_s * unit
    if time_s > 0:
        hours = math.ceil(time_s / 3600.0)
        cost += hours * channel_hourly_usd
        cost += hours * extra_vm_hourly
    return cost


# ---------------------------------------------------------------------------
# Sampling-based epoch estimator
# ---------------------------------------------------------------------------


def single_worker_losses(dataset: Dataset, algorithm: str, lr: float,
                         batch_size: int, max_epochs: int, local_epochs: int = 10,
                         rho: float = 1.0, l2: float = 0.0,
                         model_kind: str = models.MODEL_LR, k: int = 3,
                         seed: int = 0) -> list[float]:
    """Loss after each epoch of a single-worker run, starting at epoch 0.

    The returned list has the initial loss first, so losses[r] is the loss
    after r epochs. ADMM advances local_epochs per round and k-means one
    epoch per EM iteration.
    """
    X, y = dataset.features, dataset.labels
    dim = models.model_dim(model_kind, dataset.n_features, k)
    if model_kind == models.MODEL_KMEANS:
        rng = np.random.default_rng(seed)
        idx = rng.choice(dataset.n_rows, size=k, replace=False)
        centroids = dataset.features[idx].ravel()
        losses = [models.evaluate(centroids, dataset, model_kind, k).loss]
        epochs = 0
        while epochs < max_epochs:
            stats = models.kmeans_assign_stats(centroids, X, k)
            centroids = optimizers.kmeans_merge([stats], centroids, k,
                                                dataset.n_features)
            epochs += 1
            losses.append(models.evaluate(centroids, dataset, model_kind, k).loss)
        return losses
    loss_grad = models.LOSS_GRAD[model_kind]
    w = np.zeros(dim)
    losses = [models.evaluate(w, dataset, model_kind, k).loss]
    if algorithm == optimizers.ALGO_ADMM:
        u = np.zeros(dim)
        z = np.zeros(dim)
        epochs = 0
        while epochs < max_epochs:
            wi = optimizers.admm_local_solve(loss_grad, X, y, z, u, rho, lr,
                                             local_epochs, batch_size)
            z = optimizers.admm_global_update([wi], [u], rho, l2)
            u = optimizers.admm_dual_update(u, wi, z)
            epochs += local_epochs
            loss = models.evaluate(z, dataset, model_kind, k).loss
            losses.extend([losses[-1]] * (local_epochs - 1))
            losses.append(loss)
        return losses
    epochs = 0
    while epochs < max_epochs:
        w = optimizers.local_sgd_epochs(loss_grad, X, y, w, lr, batch_size, 1)
        epochs += 1
        losses.append(models.evaluate(w, dataset, model_kind, k).loss)
    return losses


def epochs_to_threshold(losses: list[float], threshold: float) -> int | None:
    for r, loss in enumerate(losses):
        if loss <= threshold:
            return r
    return None


def estimate_epochs(dataset: Dataset, algorithm: str, threshold: float,
                    sample_frac: float = 0.1, seed: int = 0, lr: float = 0.1,
                    batch_size: int = 100, local_epochs: int = 10,
                    rho: float = 1.0, l2: float = 0.0,
                    model_kind: str = models.MODEL_LR, k: int = 3,
                    max_epochs: int = 200) -> int:
    """Estimate epochs-to-threshold by training on a uniform row sample.

    The batch size is scaled by the sampling fraction so the sampled run
    performs the same number of optimizer steps per epoch as the full run;
    otherwise mini-batch epoch counts would not transfer across scales.
    """
    if not 0.0 < sample_frac <= 1.0:
        raise ConfigError("sample fraction must be in (0, 1]")
    if sample_frac < 1.0:
        rng = np.random.default_rng(seed)
        size = max(1, int(round(dataset.n_rows * sample_frac)))
        idx = np.sort(rng.choice(dataset.n_rows, size=size, replace=False))
        sample = Dataset(dataset.features[idx], dataset.labels[idx])
        batch_size = max(1, int(round(batch_size * sample_frac)))
    else:
        sample = dataset
    losses = single_worker_losses(sample, algorithm, lr, batch_size, max_epochs,
                                  local_epochs, rho, l2, model_kind, k, seed)
    r = epochs_to_threshold(losses, threshold)
    if r is None:
        raise EstimateFailed(
            f"loss threshold {threshold} not reached within {max_epochs} "
            f"epochs; best loss {min(losses)}", min(losses))
    return r


# ---------------------------------------------------------------------------
# Scenarios and sweeps
# ---------------------------------------------------------------------------

SCENARIO_BASELINE = "baseline"
SCENARIO_HYBRID_FAST_LINK = "hybrid_fast_link"
SCENARIO_HOT_DATA = "hot_data"

SCENARIOS = (SCENARIO_BASELINE, SCENARIO_HYBRID_FAST_LINK, SCENARIO_HOT_DATA)

# Effective FaaS-to-VM model-transfer rate: 75 MB moved in 1.85 s, including
# serialization. Bulk object reads from a VM do better; 70 MB/s is the
# measured function-to-VM HTTP ceiling used for hot-data loading.
HYBRID_LINK_BANDWIDTH = 75.0 / 1.85
HYBRID_LINK_LATENCY = 0.0
VM_EGRESS_BANDWIDTH = 70.0


@dataclass(frozen=True)
class Scenario:
    """Named constant substitutions for exploratory comparisons."""

    name: str
    hybrid_link_bandwidth: float = HYBRID_LINK_BANDWIDTH
    hybrid_link_latency: float = HYBRID_LINK_LATENCY
    faas_loading_bandwidth: float | None = None
    iaas_loading_bandwidth: float | None = None
    include_hybrid: bool = False


def get_scenario(name: str) -> Scenario:
    if name == SCENARIO_BASELINE:
        return Scenario(name)
    if name == SCENARIO_HYBRID_FAST_LINK:
        return Scenario(name, hybrid_link_bandwidth=10000.0, include_hybrid=True)
    if name == SCENARIO_HOT_DATA:
        return Scenario(name, faas_loading_bandwidth=VM_EGRESS_BANDWIDTH,
                        iaas_loading_bandwidth=None, include_hybrid=True)
    raise ConfigError(
        f"unknown scenario {name!r}; valid scenarios: {', '.join(SCENARIOS)}")


@dataclass(frozen=True)
class VariantResult:
    variant: str
    workers: int
    breakdown: TimeBreakdown
    cost_usd: float


def whatif(scenario: Scenario, p: CostModelParams,
           cache_hourly_usd: float = 0.0) -> list[VariantResult]:
    """Evaluate faas/iaas (and hybrid, when relevant) under the scenario."""
    w = p.workers
    results = []
    ft = faas_time(p, loading_bandwidth=scenario.faas_loading_bandwidth)
    results.append(VariantResult(
        "faas", w, ft,
        dollar_cost(ft.total_s, w, p.pricing, "faas", cache_hourly_usd)))
    if scenario.name == SCENARIO_HOT_DATA:
        it = iaas_time(p, loading_bandwidth=p.bandwidth_ebs)
    else:
        it = iaas_time(p, loading_bandwidth=scenario.iaas_loading_bandwidth)
    results.append(VariantResult(
        "iaas", w, it, dollar_cost(it.total_s, w, p.pricing, "iaas")))
    if scenario.include_hybrid:
        ht = hybrid_time(p, scenario.hybrid_link_bandwidth,
                         scenario.hybrid_link_latency,
                         loading_bandwidth=scenario.faas_loading_bandwidth)
        results.append(VariantResult(
            "hybrid", w, ht,
            dollar_cost(ht.total_s, w, p.pricing, "faas",
                        extra_vm_hourly=p.pricing.ps_vm_hourly)))
    return results


SWEEP_HEADER = "config,w,time_s,cost_usd,startup_s,loading_s,comm_s,compute_s,pareto"


@dataclass(frozen=True)
class SweepRow:
    config: str
    workers: int
    breakdown: TimeBreakdown
    cost_usd: float
    pareto: bool = False


def sweep(p: CostModelParams, w_values, configs=None,
          cache_hourly_usd: float = 0.034) -> list[SweepRow]:
    """Grid-evaluate time/cost over worker counts for each named config.

    Default configs: faas over the object store, faas over the cache, and
    iaas. Rows on a config's (time, cost) pareto front are flagged.
    """
    if configs is None:
        configs = [
            ("faas_s3", "faas", replace(p, faas_channel=CHANNEL_S3)),
            ("faas_cache", "faas", replace(p, faas_channel=CHANNEL_CACHE)),
            ("iaas", "iaas", p),
        ]
    rows: list[SweepRow] = []
    for name, infra, params in configs:
        entries = []
        for w in w_values:
            pw = replace(params, workers=w)
            if infra == "faas":
                bd = faas_time(pw)
                extra = cache_hourly_usd if pw.faas_channel == CHANNEL_CACHE else 0.0
                cost = dollar_cost(bd.total_s, w, pw.pricing, "faas", extra)
            else:
                bd = iaas_time(pw)
                cost = dollar_cost(bd.total_s, w, pw.pricing, "iaas")
            entries.append(SweepRow(name, w, bd, cost))
        for row in entries:
            dominated = any(
                (o.breakdown.total_s <= row.breakdown.total_s
                 and o.cost_usd <= row.cost_usd
                 and (o.breakdown.total_s < row.breakdown.total_s
                      or o.cost_usd < row.cost_usd))
                for o in entries if o is not row)
            rows.append(replace(row, pareto=not dominated))
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    lines = [SWEEP_HEADER]
    for r in rows:
        bd = r.breakdown
        lines.append(f"{r.config},{r.workers},{bd.total_s!r},{r.cost_usd!r},"
                     f"{bd.startup_s!r},{bd.loading_s!r},"
                     f"{bd.communication_s!r},{bd.computation_s!r},"
                     f"{int(r.pareto)}")
    return "\n".join(lines) + "\n"


def whatif_csv(results: list[VariantResult]) -> str:
    lines = [SWEEP_HEADER]
    for r in results:
        bd = r.breakdown
        lines.append(f"{r.variant},{r.workers},{bd.total_s!r},{r.cost_usd!r},"
                     f"{bd.startup_s!r},{bd.loading_s!r},"
                     f"{bd.communication_s!r},{bd.computation_s!r},0")
    return "\n".join(lines) + "\n"
