"""Command line driver: ``mattekit {synth,train,infer,eval,sweep,inspect}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import load_model, save_model
from .config import ConfigError, PipelineConfig, load_config
from .dataset import (
    load_assets,
    read_dataset,
    synthesize_dataset,
    toy_assets,
    write_dataset,
)
from .estimator import predict_matte
from .guided_filter import parse_refine
from .metrics import SweepConfig, evaluate, trimap_copy_predictor, trimap_sweep
from .model import build_model
from .storage import CheckpointError, load_checkpoint, read_image, read_matte, read_trimap, write_matte
from .training import PHASES, TrainingError, train, write_loss_csv

logger = logging.getLogger("mattekit")

THREADS_ENV = "MATTEKIT_THREADS"


# --------------------------------------------------------------------------
# run log
# --------------------------------------------------------------------------

class RunLog:
    """Line-delimited JSON events appended to ``path`` (or discarded if None)."""

    def __init__(self, path=None, command=None):
        self.fh = open(path, "a", encoding="utf-8") if path else None
        self.command = command

    def event(self, kind, **fields):
        if self.fh is None:
            return
        rec = {"time": round(time.time(), 3), "command": self.command, "event": kind, **fields}
        self.fh.write(json.dumps(rec, default=_json_default) + "\n")
        self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


class _LogHandler(logging.Handler):
    def __init__(self, run_log):
        super().__init__(logging.INFO)
        self.run_log = run_log

    def emit(self, record):
        self.run_log.event(record.levelname.lower(), logger=record.name, message=record.getMessage())


def _json_default(obj):
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def thread_cap():
    """Worker cap from ``MATTEKIT_THREADS``; ``None`` when unset."""
    raw = os.environ.get(THREADS_ENV)
    if raw in (None, ""):
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _workers(cfg):
    cap = thread_cap()
    return max(1, min(cfg.workers, cap) if cap else cfg.workers)


def _d_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _refine(text):
    try:
        parse_refine(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


# --------------------------------------------------------------------------
# matte directory helpers
# --------------------------------------------------------------------------

def _files(root, name):
    """``{id: path}`` for a flat ``<id>.png`` folder or a dataset folder with ``<id>/<name>.png``."""
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"not a directory: {root}")
    nested = {p.parent.name: p for p in sorted(root.glob(f"*/{name}.png"))}
    if nested:
        return nested
    return {p.stem: p for p in sorted(root.glob("*.png"))}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args, cfg, log):
    dcfg = cfg.dataset
    if args.toy:
        n_fg, n_bg = args.toy
        fgs, bgs = toy_assets(n_fg, n_bg, size=args.toy_size, seed=cfg.seed)
        bg_ids = [f"bg{i:03d}" for i in range(n_bg)]
        log.event("assets", source="toy", n_fg=n_fg, n_bg=n_bg, size=args.toy_size)
    else:
        fg_dir = args.fg_dir or cfg.paths.get("foregrounds")
        bg_dir = args.bg_dir or cfg.paths.get("backgrounds")
        if not fg_dir or not bg_dir:
            raise ValueError("synth needs --fg-dir and --bg-dir (or paths in the config) or --toy")
        fgs, bgs, bg_ids = load_assets(fg_dir, bg_dir)
        log.event("assets", source="files", n_fg=len(fgs), n_bg=len(bgs))
    if dcfg.n_backgrounds > len(bgs):
        dcfg = dataclasses.replace(dcfg, n_backgrounds=len(bgs))
        logger.warning("only %d backgrounds available; using that many per foreground", len(bgs))
    samples = synthesize_dataset(fgs, bgs, dcfg, bg_ids=bg_ids, workers=_workers(cfg))
    manifest = write_dataset(samples, args.out)
    log.event("synth_done", n_samples=len(samples), manifest=str(manifest))
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_train(args, cfg, log):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = read_dataset(args.data)
    fresh = build_model(cfg.stage1, cfg.stage2, seed=cfg.seed)
    plan = cfg.training
    if args.steps is not None:
        plan = dataclasses.replace(plan, stage1_steps=args.steps[0], stage2_steps=args.steps[1],
                                   finetune_steps=args.steps[2])
    phases = PHASES
    optimizer = None
    step0 = 0
    done = None
    model = fresh
    if args.checkpoint:
        model, optimizer, meta = load_model(args.checkpoint, expected=fresh)
        done = meta.get("phase")
        if done in PHASES:
            phases = PHASES[PHASES.index(done) + 1:]
        step0 = meta.get("step", 0)
        log.event("resume", checkpoint=str(args.checkpoint), completed_phase=done, step=step0)
    history = []
    ckpt = out / "model.ckpt"
    t0 = time.time()

    def on_step(rec):
        rec = dict(rec, step=rec["step"] + step0)
        history.append(rec)
        log.event("step", **rec)

    for phase in phases:
        if plan.steps(phase) == 0:
            continue
        model, _, optimizer = train(model, dataset, plan, cfg.dataset, cfg.loss, optimizer,
                                    phases=(phase,), callback=on_step)
        step0 = history[-1]["step"] + 1 if history else step0
        save_model(ckpt, model, optimizer, phase=phase, step=step0)
        log.event("phase_done", phase=phase, step=step0, seconds=round(time.time() - t0, 3))
    if not any(plan.steps(p) for p in phases):
        save_model(ckpt, model, optimizer, phase=done, step=step0)
    write_loss_csv(history, out / "loss.csv")
    log.event("train_done", steps=len(history), checkpoint=str(ckpt))
    print(f"trained {len(history)} steps; checkpoint {ckpt}")


def _load_for_inference(args, cfg):
    if not args.checkpoint:
        raise ValueError("--checkpoint is required")
    model, _, _ = load_model(args.checkpoint)
    return model


def cmd_infer(args, cfg, log):
    model = _load_for_inference(args, cfg)
    if args.data:
        samples = read_dataset(args.data)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for s in samples:
            write_matte(out / f"{s.id}.png", predict_matte(model, s.image, s.trimap, args.refine))
        log.event("infer_done", n_images=len(samples), out=str(out), refine=args.refine)
        print(f"wrote {len(samples)} mattes to {out}")
        return
    if not (args.image and args.trimap):
        raise ValueError("infer needs --image and --trimap, or --data")
    image = read_image(args.image)
    trimap = read_trimap(args.trimap)
    out = Path(args.out)
    if out.suffix.lower() != ".png":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"{Path(args.image).stem}.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_matte(out, predict_matte(model, image, trimap, args.refine))
    log.event("infer_done", n_images=1, out=str(out), refine=args.refine)
    print(f"wrote {out}")


def _write_report(report, out, log, name):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / f"{name}.csv")
    report.to_json(out / f"{name}.json")
    log.event(f"{name}_done", aggregate=report.aggregate(), n_missing=len(report.missing))
    for agg in report.aggregate():
        print(json.dumps(agg, default=_json_default))


def cmd_eval(args, cfg, log):
    preds = _files(args.pred, "alpha")
    gts = _files(args.gt, "alpha")
    tris = _files(args.trimaps or args.gt, "trimap")
    ids = sorted(gts)
    missing = [i for i in ids if i not in preds or i not in tris]
    if missing:
        raise ValueError(f"no prediction or trimap for {len(missing)} images, e.g. {missing[0]!r}")
    if not ids:
        raise ValueError(f"no ground-truth mattes found in {args.gt}")
    report = evaluate([read_matte(preds[i]) for i in ids], [read_matte(gts[i]) for i in ids],
                      [read_trimap(tris[i]) for i in ids], ids, workers=_workers(cfg))
    _write_report(report, args.out, log, "metrics")


def cmd_sweep(args, cfg, log):
    samples = read_dataset(args.data)
    scfg = cfg.eval
    if args.d_list:
        scfg = SweepConfig(d_list=args.d_list, one_per_foreground=scfg.one_per_foreground, seed=scfg.seed)
    if args.baseline:
        predictor = trimap_copy_predictor
    else:
        model = _load_for_inference(args, cfg)

        def predictor(image, trimap):
            return predict_matte(model, image, trimap, args.refine)
    report = trimap_sweep(predictor, samples, scfg)
    report.params["predictor"] = "trimap-copy" if args.baseline else {"refine": args.refine}
    _write_report(report, args.out, log, "sweep")


def cmd_inspect(args, cfg, log):
    path = Path(args.path)
    if path.is_dir():
        samples = read_dataset(path)
        info = {"kind": "dataset", "n_samples": len(samples),
                "foregrounds": sorted({s.provenance.get("fg_id") for s in samples}),
                "shape": list(samples[0].alpha.shape) if samples else None}
    elif path.suffix.lower() in (".yaml", ".yml"):
        info = {"kind": "config", "effective": load_config(path).to_dict()}
    else:
        tensors, meta, fp = load_checkpoint(path)
        params = {k: v for k, v in tensors.items() if k.startswith("param/")}
        info = {"kind": "checkpoint", "fingerprint": fp, "meta": meta,
                "n_parameters": int(sum(v.size for v in params.values())),
                "tensors": {k: list(v.shape) for k, v in tensors.items()}}
    print(json.dumps(info, indent=1, default=_json_default))


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _pair(text):
    try:
        a, b = (int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N_FG,N_BG, got {text!r}") from None
    return a, b


def _triple(text):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        vals = ()
    if len(vals) != 3 or min(vals) < 0:
        raise argparse.ArgumentTypeError(f"expected S1,S2,FT step counts, got {text!r}")
    return vals


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML pipeline config (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="global seed, overrides the config")
    common.add_argument("--log", help="JSON-lines run log (default: <out>/run.jsonl when --out is a directory)")

    parser = argparse.ArgumentParser(prog="mattekit", description="Deep image matting toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{synth,train,infer,eval,sweep,inspect}")

    p = sub.add_parser("synth", parents=[common], help="composite foregrounds onto backgrounds")
    p.add_argument("--fg-dir", help="folder of <id>_fg.png / <id>_alpha.png pairs")
    p.add_argument("--bg-dir", help="folder of background images")
    p.add_argument("--toy", type=_pair, help="generate N_FG,N_BG synthetic assets instead of reading files")
    p.add_argument("--toy-size", type=int, default=64)
    p.add_argument("--out", required=True, help="dataset output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="run the three training phases")
    p.add_argument("--data", required=True, help="dataset directory written by synth")
    p.add_argument("--out", required=True, help="output directory for model.ckpt, loss.csv, run.jsonl")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--steps", type=_triple, help="override step budgets as S1,S2,FT")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="predict alpha mattes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image")
    p.add_argument("--trimap")
    p.add_argument("--data", help="predict every sample of a dataset directory")
    p.add_argument("--out", required=True, help="output PNG path or directory")
    p.add_argument("--refine", type=_refine, default="stage2", help="none | stage2 | guided[:r=20,eps=1e-4]")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score predicted mattes against ground truth")
    p.add_argument("--pred", required=True, help="folder of <id>.png or dataset folder")
    p.add_argument("--gt", required=True, help="folder of <id>.png or dataset folder")
    p.add_argument("--trimaps", help="folder of <id>.png trimaps (default: taken from --gt)")
    p.add_argument("--out", required=True, help="directory for metrics.csv / metrics.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="metrics as a function of trimap dilation")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", action="store_true", help="score the trimap-copy baseline instead of a model")
    p.add_argument("--refine", type=_refine, default="stage2")
    p.add_argument("--d-list", type=_d_list, help="comma-separated dilation radii")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", parents=[common], help="describe a checkpoint, config or dataset")
    p.add_argument("path")
    p.add_argument("--out", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_inspect)
    return parser


def _log_path(args):
    if args.log:
        return args.log
    out = getattr(args, "out", None)
    if not out or args.command == "inspect":
        return None
    out = Path(out)
    if out.suffix.lower() == ".png":
        return out.parent / "run.jsonl"
    return out / "run.jsonl"


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    run_log = None
    handler = None
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        cfg = cfg.with_seed(args.seed if args.seed is not None else cfg.seed)
        log_path = _log_path(args)
        if log_path is not None:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        run_log = RunLog(log_path, args.command)
        handler = _LogHandler(run_log)
        logger.addHandler(handler)
        logger.setLevel(logging.INFO)
        run_log.event("start", argv=sys.argv[1:] if argv is None else list(argv), version=__version__)
        run_log.event("config", effective=cfg.to_dict(), threads=thread_cap())
        t0 = time.time()
        with threadpool_limits(limits=thread_cap()):
            args.func(args, cfg, run_log)
        run_log.event("done", seconds=round(time.time() - t0, 3))
        return 0
    except (ValueError, OSError, ConfigError, CheckpointError, TrainingError) as exc:
        if run_log is not None:
            run_log.event("error", message=str(exc))
        print(f"mattekit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        if handler is not None:
            logger.removeHandler(handler)
        if run_log is not None:
            run_log.close()


if __name__ == "__main__":
    sys.exit(main())
