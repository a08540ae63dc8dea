import json

import pytest
import torch

from pmae import harness
from pmae.config import ConfigError
from pmae.harness import ExperimentConfig, ExperimentFailure, prepare_backbone, run_experiment
from pmae.rundir import execute_run

from conftest import tiny_experiment


@pytest.fixture
def setup(cache_dir):
    cfg = tiny_experiment()
    bb, _ = prepare_backbone(cfg)
    return cfg, bb


def test_schedule_and_scopes(setup):
    cfg, bb = setup
    res = run_experiment(cfg, 7, bb)
    tr = res.trace
    R, T = cfg.rounds_per_task, cfg.tasks
    skipped = sum(len(s) for s in tr["skipped"])
    assert sum(tr["local_updates"].values()) + skipped == R * T * cfg.clients
    kinds = [f["kind"] for f in tr["finetune"]]
    assert kinds.count("mid") == T * (R - 1) and kinds.count("end") == T
    assert all(f["p_r_unchanged"] for f in tr["finetune"])
    assert res.backbone_checksum_start == res.backbone_checksum_end == bb.checksum()
    assert tr["pool_tasks"] == list(range(T))
    assert set(tr["restore_counts"]) == {cfg.restore_count}
    # end-of-task fine-tunes see the whole pool
    ends = [f for f in tr["finetune"] if f["kind"] == "end"]
    assert ends[-1]["records"] == tr["pool_records"]
    assert ends[0]["records"] < ends[-1]["records"]
    m = res.metrics()
    assert len(m["A_t"]) == T and sorted(m["class_order"]) == list(range(cfg.num_classes))


def test_every_client_updates_each_round_without_skips(cache_dir):
    cfg = tiny_experiment(beta=100.0)
    bb, _ = prepare_backbone(cfg)
    tr = run_experiment(cfg, 7, bb).trace
    assert all(not s for s in tr["skipped"])
    assert tr["local_updates"] == {k: cfg.rounds_all for k in range(cfg.clients)}


def test_ablation_switches(setup):
    cfg, bb = setup
    u1 = run_experiment(cfg.replace(ablate="u1"), 7, bb).trace
    assert set(u1["restore_counts"]) == {1}
    nopool = run_experiment(cfg.replace(ablate="no-pool"), 7, bb).trace
    assert nopool["pool_tasks"] == []
    ends = [f["records"] for f in nopool["finetune"] if f["kind"] == "end"]
    full = [f["records"] for f in run_experiment(cfg, 7, bb).trace["finetune"] if f["kind"] == "end"]
    assert ends[0] == full[0] and ends[-1] < full[-1]
    noft = run_experiment(cfg.replace(method="no-server-ft"), 7, bb).trace
    assert noft["finetune"] == []
    assert noft["pool_tasks"] == list(range(cfg.tasks))


def test_single_task_identity(cache_dir):
    cfg = tiny_experiment(tasks=1, rounds_all=2)
    bb, _ = prepare_backbone(cfg)
    m = run_experiment(cfg, 7, bb).metrics()
    assert m["A_bar"] == m["A_t"][0] == m["accuracy_matrix"][0][0]


def test_determinism_and_worker_count(setup, monkeypatch):
    cfg, bb = setup
    a = run_experiment(cfg, 7, bb).metrics()
    b = run_experiment(cfg, 7, bb).metrics()
    assert json.dumps(a) == json.dumps(b)
    monkeypatch.setenv("PMAE_WORKERS", "3")
    c = run_experiment(cfg, 7, bb).metrics()
    assert json.dumps(a) == json.dumps(c)


def test_failure_names_location(setup, monkeypatch):
    cfg, bb = setup
    real = harness.local_update

    def broken(task, client_id, *a, **kw):
        if task == 1 and client_id == 1:
            raise RuntimeError("disk on fire")
        return real(task, client_id, *a, **kw)

    monkeypatch.setattr(harness, "local_update", broken)
    with pytest.raises(ExperimentFailure) as exc:
        run_experiment(cfg.replace(beta=100.0), 7, bb)
    d = exc.value.to_dict()
    assert d == {"error": "RuntimeError", "message": "disk on fire", "task": 1, "round": 0, "client": 1}


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig(method="other")
    with pytest.raises(ConfigError):
        ExperimentConfig(method="no-server-ft", ablate="u1")
    with pytest.raises(ConfigError):
        ExperimentConfig(rounds_all=24, tasks=5)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"nonsense": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "missing.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "list.yaml")
    (tmp_path / "ok.yaml").write_text("tasks: 2\nrounds_all: 4\nbeta: 0.5\n")
    cfg = ExperimentConfig.from_file(tmp_path / "ok.yaml")
    assert (cfg.tasks, cfg.rounds_per_task, cfg.beta) == (2, 2, 0.5)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_desk_defaults():
    cfg = ExperimentConfig()
    assert (cfg.tasks, cfg.clients, cfg.rounds_all, cfg.epochs, cfg.restore_count, cfg.server_epochs) == (
        5, 4, 25, 2, 4, 5,
    )
    assert cfg.seeds == [2023, 2024, 2025]
    assert cfg.rounds_per_task == 5


def test_backbone_cache_reuse(cache_dir):
    cfg = tiny_experiment()
    a, _ = prepare_backbone(cfg)
    b, _ = prepare_backbone(cfg)
    assert a.checksum() == b.checksum()
    assert len(list(cache_dir.glob("backbone_*.ckpt"))) >= 1
    other, _ = prepare_backbone(cfg.replace(encoder_seed=5))
    assert other.checksum() != a.checksum()


def test_run_directory(tmp_path, cache_dir):
    cfg = tiny_experiment(seeds=[1, 2], persist_pool=True, client_loss_csv=True)
    m = execute_run(cfg, tmp_path / "run", dump_reconstructions=True)
    out = tmp_path / "run"
    for name in ("config.json", "manifest.json", "metrics.json", "accuracy.csv", "accuracy_matrix.csv"):
        assert (out / name).exists(), name
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "complete"
    assert set(man["seed_paths"]) == {"1", "2"}
    assert all((out / p).exists() for p in man["seed_paths"].values())
    assert json.loads((out / "config.json").read_text()) == cfg.to_dict()
    assert set(m["seeds"]) == {"1", "2"}
    assert len(list((out / "reconstructions").glob("*.png"))) == 2 * cfg.tasks
    assert (out / "pool_seed1" / "pool.json").exists()
    assert (out / "client_losses_seed1.csv").read_text().startswith("task,round,client,epoch,loss")
    rows = (out / "accuracy.csv").read_text().splitlines()
    assert rows[0] == "seed,stage,A_t" and len(rows) == 1 + 2 * cfg.tasks
    assert float(rows[1].split(",")[2]) == m["seeds"]["1"]["A_t"][0]


def test_content_hash_is_stable(cache_dir, tmp_path):
    from pmae.rundir import content_hash

    cfg = tiny_experiment()
    assert content_hash(cfg) == content_hash(tiny_experiment())
    assert content_hash(cfg) != content_hash(cfg.replace(beta=0.3))


def test_float64_backbone_runs(cache_dir):
    cfg = tiny_experiment(tasks=1, rounds_all=2)
    bb, _ = prepare_backbone(cfg)
    bb64 = bb.to(torch.float64)
    m = run_experiment(cfg, 7, bb64).metrics()
    assert 0.0 <= m["A_bar"] <= 1.0
