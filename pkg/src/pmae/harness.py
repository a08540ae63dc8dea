"""Federated class-incremental experiment driver.

Per task: grow the classifier, run ``R = rounds_all / tasks`` rounds of
{broadcast, local updates, FedAvg, mid-task server fine-tune on the round's
reconstructions (all but the last round)}, then merge the task's restore sets
into the pool and fine-tune on reconstructions of the whole pool. The
post-fine-tune global model is scored on every seen task.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from . import checkpoint
from . import rng as rngs
from .client import ClientSettings, classification_logits, local_update
from .config import ConfigError, ModelConfig, preset
from .data import Corpus, load_corpus, make_corpus
from .dump import reconstruction_panels, write_png
from .metrics import MetricsLedger
from .model import Backbone, predict
from .partition import dirichlet_partition, split_tasks
from .pretrain import pretrain_decoder
from .prompts import expand_classifier, init_params
from .server import (
    RestorePool,
    ServerSettings,
    fedavg,
    make_entry,
    pool_merge,
    reconstruct_dataset,
    save_pool,
    server_finetune,
)

log = logging.getLogger(__name__)

METHODS = ("pmae", "no-server-ft")
ABLATIONS = ("none", "recon-prompt", "u1", "no-pool")


@dataclass
class ExperimentConfig:
    """Every knob of a run. Symbols: T=tasks, K=clients, beta, R_all=rounds_all,
    E=epochs, E_server=server_epochs, u=restore_count."""

    model: Any = "bench"  # preset name or ModelConfig dict
    tasks: int = 5
    clients: int = 4
    beta: float = 0.1
    rounds_all: int = 25
    epochs: int = 2
    server_epochs: int = 5
    restore_count: int = 4
    lr: float = 3e-3
    batch_size: int = 32
    server_lr: float = 1e-2
    server_batch_size: int = 16
    server_full_batch_max: int = 0
    loss_pixels: str = "all"
    method: str = "pmae"
    ablate: str = "none"
    seeds: list = field(default_factory=lambda: [2023, 2024, 2025])
    # corpus
    corpus: str = "synthetic"  # or a path to an .npz file
    num_classes: int = 10
    train_per_class: int = 100
    test_per_class: int = 30
    corpus_seed: int = 0
    # backbone
    backbone_checkpoint: Optional[str] = None
    encoder_seed: int = 0
    pretrain_epochs: int = 30
    pretrain_classes: int = 20
    pretrain_per_class: int = 100
    pretrain_corpus_seed: int = 1
    pretrain_palette: tuple = (0.0, 0.5)
    pretrain_lr: float = 1e-3
    workers: int = 1
    client_loss_csv: bool = False
    persist_pool: bool = False

    def __post_init__(self):
        self.pretrain_palette = tuple(float(v) for v in self.pretrain_palette)
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.ablate not in ABLATIONS:
            raise ConfigError(f"ablate must be one of {ABLATIONS}, got {self.ablate!r}")
        if self.method == "no-server-ft" and self.ablate != "none":
            raise ConfigError("ablations apply to the pmae method only")
        if self.tasks < 1 or self.clients < 1:
            raise ConfigError("tasks and clients must be positive")
        if self.rounds_all % self.tasks:
            raise ConfigError(f"rounds_all {self.rounds_all} not divisible by tasks {self.tasks}")
        if self.epochs < 1 or self.server_epochs < 1 or self.restore_count < 1:
            raise ConfigError("epochs, server_epochs and restore_count must be >= 1")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.loss_pixels not in ("all", "masked_only"):
            raise ConfigError("loss_pixels must be 'all' or 'masked_only'")

    @property
    def rounds_per_task(self) -> int:
        return self.rounds_all // self.tasks

    @property
    def model_config(self) -> ModelConfig:
        if isinstance(self.model, ModelConfig):
            return self.model
        if isinstance(self.model, str):
            return preset(self.model)
        return ModelConfig.from_dict(dict(self.model))

    @property
    def effective_u(self) -> int:
        return 1 if self.ablate == "u1" else self.restore_count

    def client_settings(self) -> ClientSettings:
        return ClientSettings(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            restore_count=self.effective_u,
            loss_pixels=self.loss_pixels,
            use_recon_prompt=self.ablate != "recon-prompt",
        )

    def server_settings(self) -> ServerSettings:
        return ServerSettings(
            epochs=self.server_epochs,
            lr=self.server_lr,
            full_batch_max=self.server_full_batch_max,
            batch_size=self.server_batch_size,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pretrain_palette"] = list(self.pretrain_palette)
        if isinstance(self.model, ModelConfig):
            d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        import yaml

        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping of config keys")
        return cls.from_dict(data)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def backbone_key(self) -> str:
        keys = (
            "model",
            "encoder_seed",
            "pretrain_epochs",
            "pretrain_classes",
            "pretrain_per_class",
            "pretrain_corpus_seed",
            "pretrain_palette",
            "pretrain_lr",
            "loss_pixels",
        )
        d = self.to_dict()
        d["model"] = self.model_config.to_dict()
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ExperimentFailure(RuntimeError):
    def __init__(self, cause: BaseException, task=None, round=None, client=None):
        self.cause, self.task, self.round, self.client = cause, task, round, client
        super().__init__(f"{type(cause).__name__} at task={task} round={round} client={client}: {cause}")

    def to_dict(self) -> dict:
        return {
            "error": type(self.cause).__name__,
            "message": str(self.cause),
            "task": self.task,
            "round": self.round,
            "client": self.client,
        }


@dataclass
class ExperimentResult:
    seed: int
    ledger: MetricsLedger
    class_order: list[int]
    backbone_checksum_start: str
    backbone_checksum_end: str
    trace: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        d = self.ledger.to_dict()
        d["seed"] = self.seed
        d["class_order"] = self.class_order
        return d


# ---------------------------------------------------------------------------
# corpus / backbone setup
# ---------------------------------------------------------------------------


def load_experiment_corpus(cfg: ExperimentConfig) -> Corpus:
    mc = cfg.model_config
    if cfg.corpus == "synthetic":
        return make_corpus(
            cfg.num_classes, cfg.train_per_class, cfg.test_per_class, mc.image_side, mc.channels, cfg.corpus_seed
        )
    corpus = load_corpus(cfg.corpus)
    if corpus.image_shape != (mc.channels, mc.image_side, mc.image_side):
        raise ConfigError(f"corpus images {corpus.image_shape} do not match model config")
    return corpus


def pretraining_corpus(cfg: ExperimentConfig) -> Corpus:
    """Separate synthetic classes in a shifted (darker by default) colour domain."""
    mc = cfg.model_config
    return make_corpus(
        cfg.pretrain_classes,
        cfg.pretrain_per_class,
        max(4, cfg.pretrain_per_class // 10),
        mc.image_side,
        mc.channels,
        cfg.pretrain_corpus_seed,
        palette=tuple(cfg.pretrain_palette),
    )


def prepare_backbone(cfg: ExperimentConfig, cache_dir=None) -> tuple[Backbone, dict]:
    """Load the configured checkpoint, or build an encoder from its seed and pre-train a decoder.

    Pre-trained backbones are cached under ``cache_dir`` (default
    ``$PMAE_CACHE`` or ``~/.cache/pmae``) keyed by the relevant config keys.
    """
    if cfg.backbone_checkpoint:
        bb = checkpoint.load_backbone(cfg.backbone_checkpoint)
        if bb.config != cfg.model_config:
            raise ConfigError("backbone checkpoint config differs from the run's model config")
        return bb, {"source": str(cfg.backbone_checkpoint)}
    cache_dir = Path(cache_dir or os.environ.get("PMAE_CACHE", Path.home() / ".cache" / "pmae"))
    path = cache_dir / f"backbone_{cfg.backbone_key()}.ckpt"
    if path.exists():
        bb = checkpoint.load_backbone(path)
        _, _, meta = checkpoint.load(path)
        return bb, meta
    base = Backbone.build(cfg.model_config, seed=cfg.encoder_seed)
    pc = pretraining_corpus(cfg)
    res = pretrain_decoder(
        base, pc.train_x, pc.test_x, epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr, seed=cfg.encoder_seed,
        loss_pixels=cfg.loss_pixels,
    )
    meta = {"source": "pretrained", "heldout_mse": res.heldout_mse}
    checkpoint.save_backbone(res.backbone, path, meta)
    # reload so cached and fresh runs see identical float32 weights
    return checkpoint.load_backbone(path), meta


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(w, backbone: Backbone, images: torch.Tensor, targets: torch.Tensor, batch: int = 256) -> float:
    if images.shape[0] == 0:
        raise ConfigError("empty evaluation split")
    correct = 0
    with torch.no_grad():
        for s in range(0, images.shape[0], batch):
            logits = classification_logits(backbone, images[s : s + batch].to(backbone.dtype), w)
            correct += int((predict(logits) == targets[s : s + batch]).sum())
    return correct / images.shape[0]


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------


def run_experiment(
    cfg: ExperimentConfig,
    seed: int,
    backbone: Backbone,
    corpus: Optional[Corpus] = None,
    out_dir=None,
    dump_dir=None,
) -> ExperimentResult:
    mc = backbone.config
    if mc != cfg.model_config:
        raise ConfigError("backbone config differs from the run's model config")
    corpus = corpus if corpus is not None else load_experiment_corpus(cfg)
    stream = split_tasks(corpus.train_y.numpy(), corpus.test_y.numpy(), cfg.tasks, rngs.stream(seed, rngs.TASK_SPLIT))
    order = stream.class_order
    remap = torch.full((max(order) + 1,), -1, dtype=torch.long)
    remap[torch.tensor(order)] = torch.arange(len(order))
    train_y = remap[corpus.train_y]
    test_y = remap[corpus.test_y]
    train_y_np = corpus.train_y.numpy()

    csettings = cfg.client_settings()
    ssettings = cfg.server_settings()
    recon_prompt = cfg.ablate != "recon-prompt"
    fine_tune = cfg.method == "pmae"
    R = cfg.rounds_per_task
    workers = int(os.environ.get("PMAE_WORKERS", cfg.workers))

    ledger = MetricsLedger(cfg.tasks)
    trace = {"local_updates": {k: 0 for k in range(cfg.clients)}, "finetune": [], "restore_counts": [], "skipped": []}
    start_sum = backbone.checksum()
    pool = RestorePool()
    w = None
    round_global = 0
    loss_rows = []

    pool_dir = Path(out_dir) / f"pool_seed{seed}" if (out_dir and cfg.persist_pool) else None

    def finetune(w, source, t, tau, kind):
        data = reconstruct_dataset(source, backbone, use_recon_prompt=recon_prompt)
        before = w.checksum("p_r")
        w2, losses = server_finetune(w, data, backbone, ssettings, seed, round_global)
        trace["finetune"].append(
            {
                "task": t,
                "round": tau,
                "kind": kind,
                "records": len(data),
                "p_r_unchanged": w2.checksum("p_r") == before,
                "losses": losses,
            }
        )
        return w2

    for task in stream:
        t = task.index
        tl = train_y_np[task.train_idx]
        part = dirichlet_partition(task.train_idx, tl, cfg.clients, cfg.beta, rngs.stream(seed, rngs.PARTITION, t))
        new = len(task.classes)
        w = init_params(mc, new, rngs.stream(seed, rngs.PROMPT_INIT)) if w is None else expand_classifier(w, new)
        w = type(w)(**{f: v.to(backbone.dtype) for f, v in w.tensors().items()})
        sets = {}
        for tau in range(R):
            broadcast = w

            def work(k, broadcast=broadcast, rg=round_global):
                idx = torch.from_numpy(part[k])
                try:
                    return local_update(
                        t, k, broadcast, corpus.train_x[idx], train_y[idx], backbone, csettings, seed, rg
                    )
                except Exception as exc:  # noqa: BLE001 - re-raised with location
                    raise ExperimentFailure(exc, t, tau, k) from exc

            if workers > 1:
                with ThreadPoolExecutor(workers) as ex:
                    results = list(ex.map(work, range(cfg.clients)))
            else:
                results = [work(k) for k in range(cfg.clients)]
            active = [r for r in results if r is not None]
            trace["skipped"].append([k for k, r in enumerate(results) if r is None])
            for r in active:
                trace["local_updates"][r.client_id] += 1
                trace["restore_counts"].append(len(r.restore_set))
                if cfg.client_loss_csv:
                    for e, l in enumerate(r.epoch_losses):
                        loss_rows.append((t, tau, r.client_id, e, l))
            try:
                w = fedavg([r.params for r in active], [r.num_samples for r in active])
                sets = {r.client_id: r.restore_set for r in active}
                if fine_tune and tau != R - 1:
                    w = finetune(w, make_entry(t, sets, w.p_r), t, tau, "mid")
            except ExperimentFailure:
                raise
            except Exception as exc:  # noqa: BLE001
                raise ExperimentFailure(exc, t, tau) from exc
            round_global += 1
        try:
            if cfg.ablate == "no-pool":
                source = make_entry(t, sets, w.p_r)
            else:
                pool = pool_merge(pool, t, sets, w.p_r)
                source = pool
                if pool_dir is not None:
                    save_pool(pool_dir, pool, mc)
            if fine_tune:
                w = finetune(w, source, t, R - 1, "end")
        except Exception as exc:  # noqa: BLE001
            raise ExperimentFailure(exc, t, R - 1) from exc
        for i in range(t + 1):
            ti = stream.tasks[i].test_idx
            ledger.record(i, t, evaluate(w, backbone, corpus.test_x[ti], test_y[ti]))
        log.info("seed %d task %d: A_t=%.4f", seed, t + 1, ledger.stage_accuracy()[-1])
        if dump_dir is not None:
            _dump(Path(dump_dir), backbone, corpus.train_x[task.train_idx[:4]], w.p_r, seed, t)

    trace["pool_tasks"] = pool.tasks
    trace["pool_records"] = pool.total_records()
    if cfg.client_loss_csv and out_dir is not None:
        p = Path(out_dir) / f"client_losses_seed{seed}.csv"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text("task,round,client,epoch,loss\n" + "".join(f"{a},{b},{c},{d},{e:.6f}\n" for a, b, c, d, e in loss_rows))
    return ExperimentResult(seed, ledger, order, start_sum, backbone.checksum(), trace)


def _dump(directory: Path, backbone, images, p_r, seed, t):
    strips = reconstruction_panels(images, backbone, p_r, rngs.stream(seed, rngs.RESTORE_MASK, 10_000 + t))
    panel = np.concatenate(strips, axis=0)
    write_png(directory / f"seed{seed}_task{t + 1:02d}.png", panel)
