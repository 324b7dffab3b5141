"""``sta-lab`` command-line interface.

Exit codes: 0 success, 2 configuration / input errors, 3 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as synth
from .cka import ActivationDump, block_similarity, capture_activations, redundancy_summary
from .config import ConfigError, RunConfig, load_config
from .flops import flops_model, token_schedule_config
from .io import (
    Checkpoint,
    FormatError,
    atomic_write_bytes,
    atomic_write_text,
    encode_pgm,
    heatmap_pgm,
    load_checkpoint,
    load_dataset,
    load_tns,
    save_checkpoint,
    save_tns,
)
from .metrics import EvalResult, evaluate
from .model import StaUNet
from .tensor import ShapeError
from .train import TrainingDiverged, train

log = logging.getLogger("sta_lab")

EXIT_USAGE = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


def _limit_threads() -> None:
    n = int(os.environ.get("STA_LAB_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(limits=max(n, 1))


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir)


def _load_split(cfg: RunConfig, split: str):
    root = Path(cfg.data.dataset_dir)
    if not root.is_dir():
        raise UsageError(f"dataset directory {root} does not exist")
    try:
        ds = load_dataset(root)
        images, masks, names = ds.load_split(split)
    except (FileNotFoundError, KeyError, FormatError) as e:
        raise UsageError(str(e)) from e
    if len(images) == 0:
        raise UsageError(f"split {split!r} of {root} is empty")
    if ds.num_classes != cfg.model.num_classes:
        raise UsageError(f"dataset has {ds.num_classes} classes, model expects {cfg.model.num_classes}")
    return images, masks, names


def _checkpoint_path(cfg: RunConfig, override: str | None) -> Path:
    return Path(override or cfg.eval.checkpoint or _out(cfg) / "checkpoint.stau")


def _load_model(cfg: RunConfig, path: Path) -> StaUNet:
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found")
    try:
        ckpt = load_checkpoint(path)
    except FormatError as e:
        raise UsageError(f"unreadable checkpoint {path}: {e}") from e
    echo = ckpt.run_config.get("model")
    if echo is not None and echo != cfg.to_json()["model"]:
        raise UsageError(f"incompatible checkpoint {path}: model section differs from the run configuration")
    try:
        model = StaUNet(cfg.to_model_config(), seed=cfg.train.seed)
        model.load_state_dict(ckpt.tensors)
    except (FormatError, ShapeError, ValueError) as e:
        raise UsageError(f"incompatible checkpoint {path}: {e}") from e
    return model


def write_eval_csv(path: Path, res: EvalResult) -> None:
    cls = res.classes
    head = ["case"] + [f"dsc_{c}" for c in cls] + [f"iou_{c}" for c in cls] + ["mean_dsc", "mean_iou"]
    lines = [",".join(head)]
    for name, d, i in zip(res.case_names, res.dsc, res.iou):
        lines.append(",".join([name, *map(repr, map(float, d)), *map(repr, map(float, i)),
                               repr(float(d.mean())), repr(float(i.mean()))]))
    md, mi = res.dsc.mean(axis=0), res.iou.mean(axis=0)
    lines.append(",".join(["mean", *map(repr, map(float, md)), *map(repr, map(float, mi)),
                           repr(res.mean_dsc), repr(res.mean_iou)]))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, out: str | None) -> int:
    g = cfg.gen_data
    root = Path(out or cfg.data.dataset_dir)
    if g.extent % 32:
        raise UsageError(f"gen_data.extent {g.extent} must be divisible by 32")
    try:
        synth.generate(root, g.n_train, g.n_test, g.extent, g.num_classes, g.seed, g.noise)
    except OSError as e:
        raise UsageError(f"cannot write dataset to {root}: {e}") from e
    print(f"wrote {g.n_train} train / {g.n_test} test images to {root}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    images, masks, _ = _load_split(cfg, cfg.data.train_split)
    mcfg, tcfg = cfg.to_model_config(), cfg.to_train_config()
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    model = StaUNet(mcfg, seed=tcfg.seed)
    report = train(model, images, masks, tcfg, metrics_csv=out / "metrics.csv")
    tensors = model.state_dict()
    ckpt = Checkpoint(
        {
            "dtype": "f32",
            "params": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
            "config": cfg.to_json(),
            "epoch": report.epochs,
            "iteration": report.iterations,
        },
        tensors,
    )
    save_checkpoint(out / "checkpoint.stau", ckpt)
    summary = {
        "iterations": report.iterations,
        "epochs": report.epochs,
        "epoch_loss": report.epoch_loss,
        "lr_first": report.lr_trace[0],
        "lr_last": report.lr_trace[-1],
    }
    if load_dataset(cfg.data.dataset_dir).splits.get(cfg.data.eval_split):
        ti, tm, tn = _load_split(cfg, cfg.data.eval_split)
        res = evaluate(model, ti, tm, mcfg.num_classes, tn, cfg.eval.exclude_classes)
        write_eval_csv(out / "eval.csv", res)
        summary.update(mean_dsc=res.mean_dsc, mean_iou=res.mean_iou)
    atomic_write_text(out / "train_report.json", json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str | None) -> int:
    images, masks, names = _load_split(cfg, cfg.data.eval_split)
    model = _load_model(cfg, _checkpoint_path(cfg, checkpoint))
    res = evaluate(model, images, masks, cfg.model.num_classes, names, cfg.eval.exclude_classes)
    out = _out(cfg)
    write_eval_csv(out / "eval.csv", res)
    print(f"mean DSC {res.mean_dsc:.4f}  mean IoU {res.mean_iou:.4f}  ({len(names)} cases)")
    return 0


def cmd_dump_activations(cfg: RunConfig, checkpoint: str | None) -> int:
    images, _, _ = _load_split(cfg, cfg.data.eval_split)
    model = _load_model(cfg, _checkpoint_path(cfg, checkpoint))
    images = images[: cfg.cka.n_samples]
    try:
        dump = capture_activations(model, images, cfg.cka.blocks, cfg.cka.max_features, cfg.train.seed)
    except (KeyError, ValueError) as e:
        raise UsageError(str(e)) from e
    root = Path(cfg.cka.dump_dir or _out(cfg) / "activations")
    entries = []
    for i, (name, mat) in enumerate(zip(dump.names, dump.blocks)):
        fname = f"{i:02d}_{name}.tns"
        save_tns(root / fname, mat.astype(np.float32))
        entries.append({"name": name, "file": fname, "shape": list(mat.shape)})
    index = {"n_samples": int(len(images)), "seed": cfg.train.seed, "blocks": entries}
    atomic_write_text(root / "index.json", json.dumps(index, indent=2) + "\n")
    print(f"dumped {len(entries)} blocks x {len(images)} samples to {root}")
    return 0


def load_dump(root: Path) -> ActivationDump:
    index_path = root / "index.json"
    if not index_path.is_file():
        raise UsageError(f"no activation index at {index_path}")
    index = json.loads(index_path.read_text())
    names = [b["name"] for b in index["blocks"]]
    mats = [load_tns(root / b["file"]).astype(np.float64) for b in index["blocks"]]
    return ActivationDump(names, mats)


def cmd_analyze_cka(cfg: RunConfig) -> int:
    root = Path(cfg.cka.dump_dir or _out(cfg) / "activations")
    dump = load_dump(root)
    bw = None if cfg.cka.bandwidth == "unit" else cfg.cka.bandwidth
    try:
        mat = block_similarity(dump, normalize=False, bandwidth=bw)
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = _out(cfg)
    lines = [",".join(["block", *mat.names])]
    for name, row in zip(mat.names, mat.values):
        lines.append(",".join([name, *(repr(float(v)) for v in row)]))
    atomic_write_text(out / "cka.csv", "\n".join(lines) + "\n")
    atomic_write_bytes(out / "cka_heatmap.pgm", encode_pgm(heatmap_pgm(mat.values, cfg.cka.heatmap_cell)))
    summary = redundancy_summary(mat)
    atomic_write_text(out / "cka_summary.json", json.dumps({"blocks": mat.names, **summary}, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def cmd_flops(cfg: RunConfig) -> int:
    mcfg = cfg.to_model_config()
    out = _out(cfg)
    rep = flops_model(mcfg)
    atomic_write_text(out / "flops.csv", rep.to_csv())
    print(rep.to_table())
    if cfg.flops.token_schedules:
        lines = ["schedule,total_flops"]
        print("\ntoken schedule                 GFLOPs")
        for sched in cfg.flops.token_schedules:
            total = flops_model(token_schedule_config(mcfg, tuple(sched))).total
            label = "->".join(map(str, sched))
            lines.append(f"{label},{total}")
            print(f"{label:<28}{total / 1e9:>10.3f}")
        atomic_write_text(out / "flops_schedules.csv", "\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sta-lab", description="Super token attention U-Net toolkit")
    p.add_argument("command", choices=["gen-data", "train", "eval", "dump-activations", "analyze-cka", "flops"])
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--seed", type=int, help="override train.seed and gen_data.seed")
    p.add_argument("--out", help="output directory (dataset directory for gen-data)")
    p.add_argument("--poly-per-epoch", action="store_true", help="restart the poly schedule every epoch")
    p.add_argument("--checkpoint", help="checkpoint for eval / dump-activations")
    p.add_argument("--exclude-classes", type=int, nargs="*", metavar="K",
                   help="class ids left out of eval means (e.g. background)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    _limit_threads()
    try:
        cfg = load_config(args.config)
        updates = {}
        if args.seed is not None:
            updates["train"] = cfg.train.model_copy(update={"seed": args.seed})
            updates["gen_data"] = cfg.gen_data.model_copy(update={"seed": args.seed})
        if args.poly_per_epoch:
            updates["train"] = updates.get("train", cfg.train).model_copy(update={"poly_per_epoch": True})
        if args.exclude_classes is not None:
            updates["eval"] = cfg.eval.model_copy(update={"exclude_classes": list(args.exclude_classes)})
        if args.out and args.command != "gen-data":
            updates["output_dir"] = args.out
        if updates:
            cfg = cfg.model_copy(update=updates)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "dump-activations":
            return cmd_dump_activations(cfg, args.checkpoint)
        if args.command == "analyze-cka":
            return cmd_analyze_cka(cfg)
        return cmd_flops(cfg)
    except ConfigError as e:
        print(f"config error at {e.path or '<root>'}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
