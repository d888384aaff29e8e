import math

import numpy as np
import pytest

from faasml import models, optimizers
from faasml.collectives import GLOBAL_MODEL_KEY, decode_update, encode_update
from faasml.data import generate_synthetic
from faasml.errors import (CheckpointError, ConfigError, DivergenceError,
                           LifetimeExceeded)
from faasml.runtime import (DatasetSpec, JobConfig, WorkerState,
                            decode_checkpoint, encode_checkpoint, run_job,
                            starter)
from faasml.sim import SimKernel, SimWorkerStore
from faasml.storage import MemoryStore, builtin_profiles


def _cfg(**kw):
    base = dict(model="lr", dataset=DatasetSpec(n=800, d=6), workers=3,
                algorithm="ga_sgd", channel="s3", pattern="allreduce",
                sync="bsp", lr=0.1, batch_size=100, loss_threshold=0.0,
                max_epochs=3, mode="simulate", seed=5, poll_interval_s=0.002)
    base.update(kw)
    return JobConfig(**base)


# ----------------------------------------------------------------- validation

def test_config_validation_messages():
    with pytest.raises(ConfigError, match="job.workers"):
        _cfg(workers=0).validate()
    with pytest.raises(ConfigError, match="job.loss_threshold"):
        _cfg(loss_threshold=math.nan).validate()
    with pytest.raises(ConfigError, match="lifetime"):
        _cfg(lifetime_s=10.0, checkpoint_margin_s=20.0).validate()
    with pytest.raises(ConfigError):
        _cfg(sync="asp", algorithm="admm").validate()
    with pytest.raises(ConfigError):
        _cfg(pattern="ps", algorithm="ma_sgd").validate()
    with pytest.raises(ConfigError):
        _cfg(model="kmeans", algorithm="ga_sgd").validate()


# -------------------------------------------------------------------- starter

def test_starter_writes_disjoint_partitions_and_manifest():
    cfg = _cfg(workers=3)
    dataset = cfg.dataset.load(cfg)
    store = MemoryStore()
    keys = starter(store.put, dataset, cfg)
    assert keys == ["part/0", "part/1", "part/2"]
    manifest = store.get("manifest").decode("utf-8").splitlines()
    assert manifest == keys
    from faasml.data import dataset_from_bytes
    seen = []
    for key in keys:
        part = dataset_from_bytes(store.get(key))
        seen.append(part.features)
    total = sum(p.shape[0] for p in seen)
    assert total == dataset.n_rows
    assert np.array_equal(np.vstack(seen), dataset.features)
    sizes = [p.shape[0] for p in seen]
    assert max(sizes) - min(sizes) <= 1


def test_relaunched_rank_reuses_partition():
    # The manifest is keyed by rank, so a respawned worker 1 reads part/1.
    cfg = _cfg(workers=3)
    dataset = cfg.dataset.load(cfg)
    store = MemoryStore()
    keys = starter(store.put, dataset, cfg)
    manifest = store.get("manifest").decode("utf-8").splitlines()
    assert manifest[1] == keys[1] == "part/1"


# ----------------------------------------------------------- report contracts

def test_breakdown_sums_to_total_and_converges():
    cfg = _cfg(dataset=DatasetSpec(n=2000, d=10), workers=4,
               loss_threshold=0.6, max_epochs=30)
    report = run_job(cfg)
    assert report.converged
    parts = sum(v for k, v in report.breakdown.items() if k != "total_s")
    assert abs(parts - report.breakdown["total_s"]) <= 1e-6
    for row_prev, row_next in zip(report.loss_trace, report.loss_trace[1:]):
        assert row_next[1] >= row_prev[1]  # trace monotone in time


def test_simulate_runs_bit_reproducible():
    cfg1 = _cfg(stragglers={1: 3.0})
    cfg2 = _cfg(stragglers={1: 3.0})
    rep1 = run_job(cfg1)
    rep2 = run_job(cfg2)
    assert rep1.to_json() == rep2.to_json()
    assert rep1.trace_csv() == rep2.trace_csv()
    assert np.array_equal(rep1.final_model, rep2.final_model)


def test_cost_sanity_more_workers_faster_when_compute_bound():
    slow = _cfg(workers=1, compute_seconds_per_epoch=100.0, max_epochs=5)
    fast = _cfg(workers=10, compute_seconds_per_epoch=100.0, max_epochs=5,
                batch_size=80)
    t1 = run_job(slow).breakdown["total_s"]
    t10 = run_job(fast).breakdown["total_s"]
    assert t10 < t1


def test_sim_startup_charge_w10():
    report = run_job(_cfg(workers=10, batch_size=80, max_epochs=1))
    assert report.breakdown["startup_s"] == pytest.approx(1.2, abs=1e-9)


def test_straggler_scales_only_compute():
    base = run_job(_cfg(max_epochs=2))
    slowed = run_job(_cfg(max_epochs=2, stragglers={1: 2.0}))
    pw_base = {e["rank"]: e for e in base.per_worker}
    pw_slow = {e["rank"]: e for e in slowed.per_worker}
    assert pw_slow[1]["compute_s"] == pytest.approx(2 * pw_base[1]["compute_s"],
                                                    rel=1e-12)
    assert pw_slow[0]["compute_s"] == pytest.approx(pw_base[0]["compute_s"],
                                                    rel=1e-12)
    assert pw_slow[1]["startup_s"] == pw_base[1]["startup_s"]
    assert pw_slow[1]["loading_s"] == pw_base[1]["loading_s"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    # The proximal penalty makes the update linear in w, so an oversized
    # step factor blows the iterate up to overflow within one local solve.
    with pytest.raises(DivergenceError):
        run_job(_cfg(algorithm="admm", local_epochs=10, lr=1e8,
                     batch_size=20, max_epochs=20,
                     dataset=DatasetSpec(n=200, d=4)))


# ----------------------------------------------------------------- BSP барrier

def test_bsp_store_trace_barrier_invariant():
    cfg = _cfg(workers=3, keep_store_trace=True, max_epochs=2, batch_size=50)
    report = run_job(cfg)
    puts = [(seq, key) for seq, op, key, _, _ in report.store_trace
            if op == "put"]
    first_put = {}
    for seq, key in puts:
        first_put.setdefault(key, seq)
    merged = sorted(k for k in first_put if k.startswith("m/"))
    assert merged, "expected merged keys in the trace"
    for key in merged:
        _, e, i = key.split("/")
        nxt = [s for k, s in first_put.items()
               if k.startswith(f"u/{e}/{int(i) + 1}/")]
        for s in nxt:
            assert s > first_put[key]


def test_bsp_round_exit_after_slowest_entry():
    # Workers enter a round at staggered virtual times; everyone leaves at or
    # after the latest entry.
    kernel = SimKernel()
    profile = builtin_profiles()["s3"]
    delays = [0.0, 0.1, 0.5]
    exits = {}

    def make(rank):
        def body():
            from faasml.collectives import CollectiveContext, allreduce
            task = kernel.tasks[rank]
            kernel.charge(task, delays[rank], "compute")
            store = SimWorkerStore(kernel, task, profile)
            ctx = CollectiveContext(store=store, n_workers=3, my_rank=rank,
                                    reduce_op="sum", timeout_s=30.0)
            allreduce(ctx, np.ones(4), 1.0)
            exits[rank] = task.clock
        return body

    for r in range(3):
        kernel.add_worker(r, make(r))
    kernel.run()
    for r in range(3):
        # barrier semantics plus at least the round's own transfer charges
        assert exits[r] >= max(delays) + profile.latency_s


# ------------------------------------------------------------------------ ASP

def test_asp_single_worker_matches_sequential_sgd():
    cfg = _cfg(workers=1, sync="asp", dataset=DatasetSpec(n=400, d=5),
               batch_size=50, max_epochs=4)
    report = run_job(cfg)
    ds = generate_synthetic(400, 5, "classification", seed=cfg.seed)
    w = np.zeros(5)
    for epoch in range(4):
        lr = optimizers.lr_schedule(cfg.lr, epoch, "inv_sqrt")
        w = optimizers.local_sgd_epochs(models.lr_loss_grad, ds.features,
                                        ds.labels, w, lr, 50, 1)
    assert np.array_equal(report.final_model, w)


def test_asp_last_writer_wins_semantics():
    # Forced interleave read-read-write-write at the store level.
    store = MemoryStore()
    m1 = np.array([1.0, 1.0])
    m2 = np.array([2.0, 2.0])
    r1 = store.get(GLOBAL_MODEL_KEY)
    r2 = store.get(GLOBAL_MODEL_KEY)
    assert r1 is None and r2 is None
    store.put(GLOBAL_MODEL_KEY, encode_update(m1))
    store.put(GLOBAL_MODEL_KEY, encode_update(m2))
    final, _ = decode_update(store.get(GLOBAL_MODEL_KEY))
    assert np.array_equal(final, m2)


def test_asp_straggler_rate_gap():
    cfg = _cfg(workers=2, sync="asp", dataset=DatasetSpec(n=600, d=6),
               stragglers={1: 10.0}, compute_seconds_per_epoch=50.0,
               max_epochs=20, batch_size=100, lifetime_s=1e9)
    report = run_job(cfg)
    per = {e["rank"]: e for e in report.per_worker}
    rate0 = cfg.max_epochs / per[0]["total_s"]
    rate1 = cfg.max_epochs / per[1]["total_s"]
    assert rate0 >= 5.0 * rate1


# ------------------------------------------------------------------ lifecycle

def test_checkpoint_roundtrip_exact():
    rng = np.random.default_rng(9)
    state = WorkerState(worker_id=2, epoch=7, iteration=3,
                        model=rng.standard_normal(11),
                        extras=[rng.standard_normal(11),
                                rng.standard_normal(11)])
    blob = encode_checkpoint(state)
    assert blob[:4] == b"LMCK"
    back = decode_checkpoint(blob)
    assert back.worker_id == 2 and back.epoch == 7 and back.iteration == 3
    assert np.array_equal(back.model, state.model)
    assert len(back.extras) == 2
    for a, b in zip(back.extras, state.extras):
        assert np.array_equal(a, b)


def test_checkpoint_rejects_corruption():
    state = WorkerState(0, 1, 2, np.arange(4.0), [])
    blob = encode_checkpoint(state)
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:-5])
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob + b"\0")


def test_lifetime_respawn_transparent_final_model():
    common = dict(dataset=DatasetSpec(n=900, d=6), workers=3, batch_size=100,
                  compute_seconds_per_epoch=60.0, max_epochs=4)
    unlimited = run_job(_cfg(**common))
    limited = run_job(_cfg(**common, lifetime_s=30.0, checkpoint_margin_s=10.0))
    assert limited.respawns >= 3
    assert np.array_equal(limited.final_model, unlimited.final_model)
    assert limited.breakdown["total_s"] > unlimited.breakdown["total_s"]


def test_lifetime_respawn_transparent_admm():
    common = dict(algorithm="admm", local_epochs=5, rho=1.0, l2=0.1,
                  dataset=DatasetSpec(n=600, d=5), workers=2,
                  batch_size=600, compute_seconds_per_epoch=20.0, max_epochs=20)
    unlimited = run_job(_cfg(**common))
    limited = run_job(_cfg(**common, lifetime_s=120.0,
                           checkpoint_margin_s=60.0))
    assert limited.respawns >= 2
    assert np.array_equal(limited.final_model, unlimited.final_model)


def test_single_iteration_longer_than_lifetime_fatal():
    cfg = _cfg(workers=2, compute_seconds_per_epoch=5000.0, batch_size=400,
               lifetime_s=60.0, checkpoint_margin_s=5.0,
               dataset=DatasetSpec(n=800, d=6))
    with pytest.raises(LifetimeExceeded):
        run_job(cfg)


# --------------------------------------------------------------------- modes

def test_real_local_memory_and_file_store(tmp_path):
    cfg_mem = _cfg(mode="real_local", max_epochs=2)
    rep_mem = run_job(cfg_mem)
    cfg_file = _cfg(mode="real_local", max_epochs=2,
                    store_dir=str(tmp_path / "store"))
    rep_file = run_job(cfg_file)
    assert np.array_equal(rep_mem.final_model, rep_file.final_model)
    sim = run_job(_cfg(max_epochs=2))
    assert np.max(np.abs(rep_mem.final_model - sim.final_model)) == 0.0


def test_kmeans_job_decreases_loss():
    cfg = _cfg(model="kmeans", algorithm="kmeans_em", k=3,
               dataset=DatasetSpec(n=900, d=4), max_epochs=6,
               loss_threshold=0.0)
    report = run_job(cfg)
    losses = [row[2] for row in report.loss_trace]
    assert losses[-1] <= losses[1] + 1e-9
    assert report.epochs == 6


def test_threshold_at_init_stops_immediately():
    cfg = _cfg(loss_threshold=1.0, max_epochs=9)  # ln 2 < 1 at epoch 0
    report = run_job(cfg)
    assert report.converged
    assert report.epochs == 0
    assert report.rounds == 0


def test_more_workers_than_rows_rejected():
    with pytest.raises(ConfigError, match="job.workers"):
        run_job(_cfg(workers=5, dataset=DatasetSpec(n=3, d=2)))


def test_asp_real_local_completes_and_converges():
    cfg = _cfg(mode="real_local", sync="asp", workers=3,
               dataset=DatasetSpec(n=600, d=6), batch_size=100,
               loss_threshold=0.55, max_epochs=30, lifetime_s=1e9)
    report = run_job(cfg)
    assert report.converged
    assert report.final_model is not None and report.final_model.shape == (6,)
    assert all(e["total_s"] >= 0.0 for e in report.per_worker)


def test_channel_overrides_change_sim_charges():
    fast = _cfg(max_epochs=2, channel_overrides={"latency_s": 0.0})
    slow = _cfg(max_epochs=2)
    rep_fast = run_job(fast)
    rep_slow = run_job(slow)
    assert rep_fast.breakdown["communication_s"] < \
        rep_slow.breakdown["communication_s"]
    assert np.array_equal(rep_fast.final_model, rep_slow.final_model)


def test_stress_scatter_stragglers_respawn_kmeans():
    # Interaction soup: scatterreduce, a straggler, a tight lifetime, k-means.
    cfg = _cfg(model="kmeans", algorithm="kmeans_em", k=4,
               dataset=DatasetSpec(n=1000, d=5), workers=5,
               pattern="scatterreduce", stragglers={3: 2.5},
               compute_seconds_per_epoch=40.0, lifetime_s=60.0,
               checkpoint_margin_s=30.0, max_epochs=8)
    report = run_job(cfg)
    assert report.epochs == 8
    assert report.respawns >= 1
    baseline = run_job(_cfg(model="kmeans", algorithm="kmeans_em", k=4,
                            dataset=DatasetSpec(n=1000, d=5), workers=5,
                            pattern="scatterreduce", stragglers={3: 2.5},
                            compute_seconds_per_epoch=40.0, max_epochs=8))
    assert np.array_equal(report.final_model, baseline.final_model)
