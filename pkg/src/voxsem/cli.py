"""Command-line entry point: ``voxsem <command> [--config F] [--set k=v] [--seed N] [--out D]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import store
from .inference import evaluate, retrieve
from .slam import PriorTable, em_run, simulate_world, world_to_text, em_result_to_text
from .store import ConfigError, RunConfig
from .vae import train
from .voxeldata import build_dataset, jaccard

log = logging.getLogger("voxsem")

COMMANDS = {
    "gen-data": "render the synthetic dataset to OUT/dataset",
    "train": "train the shape VAE and write OUT/model.ckpt",
    "classify": "classify test views and write metrics CSVs",
    "retrieve": "reconstruct full shapes for test views and report IoU",
    "slam-sim": "simulate a world and run EM semantic SLAM",
    "export-metrics": "write confusion, distance, PR and summary CSVs",
    "grad-check": "finite-difference check of the training loss gradient",
    "verify": "run the oracle identity suites",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="voxsem", description="Factorized shape VAE, classification, retrieval "
                                           "and semantic SLAM at desk scale.")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, text in COMMANDS.items():
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="flat 'section.key = value' file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config entry; repeatable")
        s.add_argument("--seed", type=int, help="master seed (default run.seed)")
        s.add_argument("--out", help="output directory (default run.out)")
        if name in ("train", "classify", "retrieve", "export-metrics"):
            s.add_argument("--data", help="dataset directory (default OUT/dataset)")
        if name in ("classify", "retrieve", "export-metrics", "slam-sim"):
            s.add_argument("--checkpoint", help="model checkpoint (default OUT/model.ckpt)")
        if name == "verify":
            s.add_argument("--quick", action="store_true", help="smaller oracle suites")
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg.validate()


def _setup_logging(out: Path, command):
    out.mkdir(parents=True, exist_ok=True)
    log.handlers.clear()
    log.setLevel(logging.INFO)
    log.propagate = False
    fh = logging.FileHandler(out / f"{command}.log", mode="w")
    fh.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(fh)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(logging.Formatter("%(message)s"))
    sh.setLevel(logging.WARNING)
    log.addHandler(sh)
    for name in ("voxsem.vae",):
        child = logging.getLogger(name)
        child.handlers = [fh]
        child.setLevel(logging.INFO)
        child.propagate = False


def _path(arg, default):
    return Path(arg) if arg else default


def _load_data(args, out):
    path = _path(getattr(args, "data", None), out / "dataset")
    if not (path / "manifest.json").is_file():
        raise FileNotFoundError(f"no dataset at {path}; run gen-data first")
    return store.load_dataset(path)


def _load_model(args, out):
    path = _path(getattr(args, "checkpoint", None), out / "model.ckpt")
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}; run train first")
    return store.load_checkpoint(path)


def cmd_gen_data(args, cfg, out):
    ds = build_dataset(cfg.data, cfg.seed)
    store.save_dataset(out / "dataset", ds)
    n_test = sum(s == "test" for s in ds.split)
    print(f"wrote {len(ds.samples)} samples ({n_test} test) to {out / 'dataset'}")


def cmd_train(args, cfg, out):
    ds = _load_data(args, out)
    cfg.train.seed = cfg.seed
    t0 = time.perf_counter()
    model = train(ds, cfg.train)
    store.save_checkpoint(out / "model.ckpt", model)
    rows = [[e, h["total"], h["kl"], h["recon"], h["reg"]] for e, h in enumerate(model.history)]
    store.write_csv(out / "loss_history.csv", ["epoch", "total", "kl", "recon", "reg"], rows)
    log.info("training took %.1f s", time.perf_counter() - t0)
    print(f"trained {cfg.train.epochs} epochs; final loss {model.history[-1]['total']:.6g}")


def cmd_classify(args, cfg, out):
    ds, model = _load_data(args, out), _load_model(args, out)
    report = evaluate(model, ds.test)
    store.export_metrics(out, report)
    print(f"accuracy {report.accuracy:.4f}  mean IoU {report.mean_iou:.4f}  "
          f"mAP {report.map:.4f}  AUC {report.auc:.4f}")


def cmd_retrieve(args, cfg, out):
    ds, model = _load_data(args, out), _load_model(args, out)
    test = ds.test
    if not test:
        raise ValueError("dataset has no test samples")
    shapes = retrieve(model, np.stack([s.view for s in test]))
    rows = [[n, s.label.class_id, s.label.instance_id, s.label.viewpoint_id, int(s.noisy),
             jaccard(shape, s.full)] for n, (shape, s) in enumerate(zip(shapes, test))]
    store.write_csv(out / "retrieval.csv",
                    ["sample", "class_id", "instance_id", "viewpoint_id", "noisy", "iou"], rows)
    print(f"mean IoU {np.mean([r[-1] for r in rows]):.4f} over {len(rows)} test views")


def cmd_slam_sim(args, cfg, out):
    table = None
    if args.checkpoint:
        table = PriorTable.from_model(store.load_checkpoint(args.checkpoint))
    world = simulate_world(cfg.slam, cfg.seed, table)
    res = em_run(world, cfg.slam)
    (out / "world.txt").write_text(world_to_text(world))
    (out / "em_result.txt").write_text(em_result_to_text(res))
    store.export_em(out, res, world)
    d = res.diagnostics
    print(f"pose RMSE {d['pose_rmse']:.4f} (odometry {d['odometry_rmse']:.4f})  "
          f"label accuracy {d['label_accuracy']:.3f}  iterations {res.iterations}")


def cmd_export_metrics(args, cfg, out):
    cmd_classify(args, cfg, out)


def cmd_grad_check(args, cfg, out):
    from .verify import grad_check_suite

    r = grad_check_suite(cfg.seed)
    print(r.line())
    return 0 if r.passed else 2


def cmd_verify(args, cfg, out):
    from .verify import run_all

    results = run_all(cfg.seed, quick=args.quick)
    store.write_csv(out / "verify.csv", ["suite", "measured", "tolerance", "passed", "seconds"],
                    [[r.name, r.measured, r.tolerance, r.passed, r.seconds] for r in results])
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 2


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "classify": cmd_classify,
            "retrieve": cmd_retrieve, "slam-sim": cmd_slam_sim,
            "export-metrics": cmd_export_metrics, "grad-check": cmd_grad_check,
            "verify": cmd_verify}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    out = Path(cfg.out)
    try:
        _setup_logging(out, args.command)
        cfg.echo(out)
        log.info("command %s seed %d", args.command, cfg.seed)
        code = HANDLERS[args.command](args, cfg, out)
        return int(code or 0)
    except (FileNotFoundError, ValueError) as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # pragma: no cover - reported as runtime failure
        log.exception("runtime failure")
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    finally:
        for h in list(log.handlers):
            h.close()
            log.removeHandler(h)


def main():
    sys.exit(run())
