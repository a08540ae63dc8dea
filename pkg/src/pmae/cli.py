"""``pmae`` command line: pretrain-decoder, run, plot.

Failures print one JSON object to stderr and exit nonzero (2 for usage or
configuration errors, 1 for errors raised during execution). Setting
``PMAE_WORKERS`` overrides the configured number of client worker threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError
from .harness import ABLATIONS, METHODS, ExperimentConfig, ExperimentFailure

EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pmae", description="Federated class-incremental prompt tuning with masked-autoencoder replay.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pre = sub.add_parser("pretrain-decoder", help="pre-train the decoder behind a frozen encoder")
    pre.add_argument("--config", type=Path)
    pre.add_argument("--epochs", type=int)
    pre.add_argument("--out", type=Path, required=True, help="checkpoint path to write")

    run = sub.add_parser("run", help="run an experiment and write a run directory")
    run.add_argument("--config", type=Path)
    run.add_argument("--method", choices=METHODS)
    run.add_argument("--ablate", choices=ABLATIONS)
    run.add_argument("--beta", type=float)
    run.add_argument("--tasks", type=int)
    run.add_argument("--clients", type=int)
    run.add_argument("--rounds", type=int, help="total communication rounds over all tasks")
    run.add_argument("--seed", type=int, action="append", help="repeatable; defaults to the config's seeds")
    run.add_argument("--out", type=Path, required=True)
    run.add_argument(
        "--dump-reconstructions",
        nargs="?",
        const=True,
        default=None,
        metavar="DIR",
        help="write reconstruction panels after each task (default DIR: <out>/reconstructions)",
    )
    run.add_argument("--cache-dir", type=Path, help="pre-trained backbone cache")

    plot = sub.add_parser("plot", help="plot A_t curves and A_bar bars from run directories")
    plot.add_argument("runs", nargs="+", type=Path)
    plot.add_argument("--out", type=Path, required=True)
    return p


def load_config(path, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(path) if path else ExperimentConfig()
    kw = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**kw) if kw else cfg


def cmd_pretrain(args) -> dict:
    from . import checkpoint
    from .harness import pretraining_corpus
    from .model import Backbone
    from .pretrain import pretrain_decoder, summarize_curve

    cfg = load_config(args.config, pretrain_epochs=args.epochs)
    corpus = pretraining_corpus(cfg)
    base = Backbone.build(cfg.model_config, seed=cfg.encoder_seed)
    res = pretrain_decoder(
        base, corpus.train_x, corpus.test_x, cfg.pretrain_epochs, cfg.pretrain_lr, seed=cfg.encoder_seed,
        loss_pixels=cfg.loss_pixels,
    )
    meta = {"source": "pretrained", "heldout_mse": res.heldout_mse}
    checkpoint.save_backbone(res.backbone, args.out, meta)
    curve = args.out.with_suffix(".mse.json")
    curve.write_text(json.dumps({"heldout_mse": res.heldout_mse, "train_loss": res.train_loss}, indent=2) + "\n")
    return {"checkpoint": str(args.out), "curve": str(curve), **summarize_curve(res.heldout_mse)}


def cmd_run(args) -> dict:
    from .rundir import execute_run

    cfg = load_config(
        args.config,
        method=args.method,
        ablate=args.ablate,
        beta=args.beta,
        tasks=args.tasks,
        clients=args.clients,
        rounds_all=args.rounds,
    )
    metrics = execute_run(cfg, args.out, args.seed, args.cache_dir, args.dump_reconstructions)
    return {"out": str(args.out), **metrics["summary"]}


def cmd_plot(args) -> dict:
    from .plotting import plot_runs

    return {"figures": [str(p) for p in plot_runs(args.runs, args.out)]}


COMMANDS = {"pretrain-decoder": cmd_pretrain, "run": cmd_run, "plot": cmd_plot}


def _fail(code: int, payload: dict) -> int:
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, {"error": "UsageError", "message": str(exc)})
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        summary = COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        return _fail(EXIT_USAGE, {"error": type(exc).__name__, "message": str(exc)})
    except ExperimentFailure as exc:
        return _fail(EXIT_RUNTIME, exc.to_dict())
    except Exception as exc:  # noqa: BLE001 - reported as structured JSON
        return _fail(EXIT_RUNTIME, {"error": type(exc).__name__, "message": str(exc)})
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
