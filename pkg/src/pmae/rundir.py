"""Self-describing run directories.

Layout written by :func:`execute_run`::

    <out>/config.json            config echo
    <out>/manifest.json          RunManifest: snapshot, content hash, per-seed paths, timings
    <out>/metrics.json           accuracy matrix, A_t and A_bar per seed (no timings)
    <out>/accuracy.csv           A_t curve, one row per (seed, stage)
    <out>/accuracy_matrix.csv    every a[i][t] entry
    <out>/seeds/seed<S>.json     per-seed metrics plus the execution trace

``metrics.json`` depends only on the config and the seeds, so two runs with
the same inputs produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .harness import ExperimentConfig, load_experiment_corpus, prepare_backbone, run_experiment

METRICS_FILE = "metrics.json"
MANIFEST_FILE = "manifest.json"
CONFIG_FILE = "config.json"


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def code_digest() -> str:
    """sha256 over the package sources, in sorted path order."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode() + b"\0")
        h.update(p.read_bytes() + b"\0")
    return h.hexdigest()


def content_hash(cfg: ExperimentConfig) -> str:
    """Stable identifier of (code, config); seeds are part of the config."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(code_digest().encode() + b"\0" + blob).hexdigest()


@dataclass
class RunManifest:
    config: dict
    content_hash: str
    seed_paths: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    status: str = "running"

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "content_hash": self.content_hash,
            "seed_paths": self.seed_paths,
            "timings": self.timings,
            "status": self.status,
        }

    def write(self, out_dir: Path) -> None:
        _dump_json(Path(out_dir) / MANIFEST_FILE, self.to_dict())


def _mean(values) -> float:
    return float(sum(Fraction(v) for v in values) / len(values))


def summarize(per_seed: dict) -> dict:
    seeds = list(per_seed)
    T = len(per_seed[seeds[0]]["A_t"])
    return {
        "A_t_mean": [_mean([per_seed[s]["A_t"][t] for s in seeds]) for t in range(T)],
        "A_bar_mean": _mean([per_seed[s]["A_bar"] for s in seeds]),
    }


def execute_run(
    cfg: ExperimentConfig,
    out_dir,
    seeds: Optional[list] = None,
    cache_dir=None,
    dump_reconstructions=None,
) -> dict:
    """Run every seed of ``cfg`` and write the run directory; returns the metrics dict.

    ``dump_reconstructions`` is a directory for reconstruction panels, or
    ``True`` for ``<out>/reconstructions``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if seeds is not None:
        cfg = cfg.replace(seeds=list(seeds))
    snapshot = cfg.to_dict()
    _dump_json(out / CONFIG_FILE, snapshot)
    manifest = RunManifest(snapshot, content_hash(cfg))
    manifest.write(out)

    t0 = time.perf_counter()
    backbone, bb_meta = prepare_backbone(cfg, cache_dir)
    manifest.timings["backbone_s"] = round(time.perf_counter() - t0, 3)
    corpus = load_experiment_corpus(cfg)
    if dump_reconstructions is True:
        dump_dir = out / "reconstructions"
    else:
        dump_dir = Path(dump_reconstructions) if dump_reconstructions else None

    per_seed = {}
    for seed in cfg.seeds:
        t1 = time.perf_counter()
        res = run_experiment(cfg, seed, backbone, corpus, out_dir=out, dump_dir=dump_dir)
        m = res.metrics()
        m["backbone_checksum_start"] = res.backbone_checksum_start
        m["backbone_checksum_end"] = res.backbone_checksum_end
        per_seed[str(seed)] = m
        seed_path = out / "seeds" / f"seed{seed}.json"
        _dump_json(seed_path, {"metrics": m, "trace": res.trace})
        manifest.seed_paths[str(seed)] = seed_path.relative_to(out).as_posix()
        manifest.timings[f"seed{seed}_s"] = round(time.perf_counter() - t1, 3)
        manifest.write(out)

    metrics = {
        "method": cfg.method,
        "ablate": cfg.ablate,
        "tasks": cfg.tasks,
        "beta": cfg.beta,
        "seeds": per_seed,
        "summary": summarize(per_seed),
        "backbone": {k: v for k, v in bb_meta.items() if k != "source"},
    }
    _dump_json(out / METRICS_FILE, metrics)
    _write_csvs(out, per_seed)
    manifest.timings["total_s"] = round(time.perf_counter() - t0, 3)
    manifest.status = "complete"
    manifest.write(out)
    return metrics


def _write_csvs(out: Path, per_seed: dict) -> None:
    lines = ["seed,stage,A_t"]
    cells = ["seed,task,after_task,accuracy"]
    for s, m in per_seed.items():
        lines += [f"{s},{t + 1},{a!r}" for t, a in enumerate(m["A_t"])]
        for i, row in enumerate(m["accuracy_matrix"]):
            cells += [f"{s},{i + 1},{t + 1},{v!r}" for t, v in enumerate(row) if v is not None]
    (out / "accuracy.csv").write_text("\n".join(lines) + "\n")
    (out / "accuracy_matrix.csv").write_text("\n".join(cells) + "\n")


def load_metrics(run_dir) -> dict:
    path = Path(run_dir) / METRICS_FILE
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; not a completed run directory")
    return json.loads(path.read_text())
