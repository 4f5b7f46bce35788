"""Command-line interface: ``aicsd {gen-data,train,eval,visualize,compare}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or I/O error.
"""

import argparse
import hashlib
import json
import logging
import shutil
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np
import torch

from aicsd import losses
from aicsd.config import ExperimentConfig
from aicsd.data import export_directory, generate_synthetic, load_directory, load_image
from aicsd.errors import AICSDError, CheckpointError, ConfigurationError
from aicsd.models import build_toy_segnet, freeze, load_checkpoint
from aicsd.trainer import METHODS, RunLog, evaluate, train
from aicsd import viz

logger = logging.getLogger("aicsd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global random seed")
    p.add_argument("--config", default=argparse.SUPPRESS, help="experiment config (INI)")
    p.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser():
    common = _common()
    parser = _Parser(prog="aicsd", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset to disk")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--noise", type=float, default=0.12)
    g.add_argument("--color-jitter", type=float, default=0.08)
    g.add_argument("--hue-spread", type=float, default=1.0)
    g.add_argument("--class-shapes", action="store_true")

    t = sub.add_parser("train", parents=[common], help="train a network (teacher or student)")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--arch", choices=("student", "teacher"))
    t.add_argument("--output-dir")
    t.add_argument("--teacher-ckpt")
    t.add_argument("--epochs", type=int)
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ignore-index", type=int, default=255)
    e.add_argument("--batch-size", type=int, default=8)
    e.add_argument("--json", action="store_true", help="print machine-readable JSON")

    v = sub.add_parser("visualize", parents=[common], help="ICS heatmaps and intra-class distribution maps")
    v.add_argument("--teacher-ckpt", required=True)
    v.add_argument("--student-ckpt", action="append", default=[], metavar="[NAME=]PATH")
    v.add_argument("--image", required=True)
    v.add_argument("--out", required=True)

    c = sub.add_parser("compare", parents=[common], help="aggregate runs into a per-method table")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--out", required=True)
    return parser


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_gen_data(args):
    seed = getattr(args, "seed", 0)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not (out / "manifest.json").exists():
        raise ConfigurationError(f"{out} exists and is not a generated dataset; refusing to overwrite")
    samples = generate_synthetic(
        args.n, args.classes, args.size, args.size, seed,
        noise=args.noise, color_jitter=args.color_jitter,
        hue_spread=args.hue_spread, class_shapes=args.class_shapes,
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    # build next to the target and swap in, so a failure leaves no partial dataset
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        export_directory(samples, tmp)
        files = sorted(p.relative_to(tmp).as_posix() for p in tmp.rglob("*.png"))
        manifest = {
            "generator": "synthetic-shapes",
            "n": args.n,
            "num_classes": args.classes,
            "height": args.size,
            "width": args.size,
            "seed": seed,
            "noise": args.noise,
            "color_jitter": args.color_jitter,
            "hue_spread": args.hue_spread,
            "class_shapes": args.class_shapes,
            "ignore_index": 255,
            "files": {f: _sha256(tmp / f) for f in files},
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_train(args):
    overrides = list(args.set)
    if args.method:
        overrides.append(f"train.method={args.method}")
    if args.arch:
        overrides.append(f"train.arch={args.arch}")
    if args.output_dir:
        overrides.append(f"output.dir={args.output_dir}")
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if args.teacher_ckpt:
        overrides.append(f"teacher.checkpoint={args.teacher_ckpt}")
    cfg = ExperimentConfig.from_file(getattr(args, "config", None), overrides)
    arch = cfg.get("train", "arch")
    if hasattr(args, "seed"):
        cfg.set("train", "seed", args.seed)
        cfg.set(arch, "seed", args.seed)
    tcfg = cfg.train_config()

    teacher = None
    ckpt = cfg.get("teacher", "checkpoint")
    if tcfg.method != "none":
        if not ckpt:
            raise ConfigurationError(f"method '{tcfg.method}' needs a teacher: pass --teacher-ckpt")
        teacher = freeze(load_checkpoint(ckpt))
        if teacher.num_classes != cfg.int("data", "num_classes"):
            raise CheckpointError(f"{ckpt}: teacher has {teacher.num_classes} classes, data has {cfg.int('data', 'num_classes')}")
    net = build_toy_segnet(cfg.net_config(arch))
    train_set, val_set = cfg.datasets()
    out = Path(tcfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text())
    _, log = train(tcfg, teacher, net, train_set, val_set)
    last = log[-1]
    best = max(log.records, key=lambda r: -1 if np.isnan(r["val_miou"]) else r["val_miou"])
    print(f"final val mIoU {last['val_miou']:.4f}  pixel accuracy {last['val_pixacc']:.4f}")
    print(f"best  val mIoU {best['val_miou']:.4f} (epoch {best['epoch']})  -> {out}")
    return 0


def cmd_eval(args):
    net = load_checkpoint(args.ckpt)
    data = Path(args.data)
    if not data.is_dir():
        raise FileNotFoundError(f"dataset directory {data} not found")
    samples = load_directory(data, net.num_classes, args.ignore_index)
    if not samples:
        raise ConfigurationError(f"no samples found under {data}")
    report = evaluate(net, samples, args.ignore_index, args.batch_size)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
        return 0
    print(f"{'class':>5}  {'IoU':>8}")
    for c, iou in enumerate(report.per_class_iou):
        print(f"{c:>5}  {'n/a' if np.isnan(iou) else f'{iou:.4f}':>8}")
    print(f"mIoU            {report.miou:.4f}")
    print(f"pixel accuracy  {report.pixel_accuracy:.4f}")
    return 0


def _named_ckpts(items):
    out = []
    for k, item in enumerate(items):
        name, sep, path = item.partition("=")
        if not sep:
            path, name = item, f"student{k}" if len(items) > 1 else "student"
        out.append((name, path))
    return out


@torch.no_grad()
def network_structure(net, image):
    """Intra-class distributions ``[C, H*W]`` and ICS matrix ``[C, C]`` for one image."""
    logits = net.eval()(torch.from_numpy(image)[None])[0].double()
    dist = losses.spatial_softmax(logits)
    return dist, losses.ics_matrix(dist)


def cmd_visualize(args):
    image = load_image(args.image)
    hw = image.shape[1:]
    networks = [("teacher", args.teacher_ckpt)] + _named_ckpts(args.student_ckpt)
    results = {}
    for name, path in networks:
        if name in results:
            raise ConfigurationError(f"duplicate network name '{name}'")
        results[name] = network_structure(load_checkpoint(path), image)
    num_classes = {r[1].shape[0] for r in results.values()}
    if len(num_classes) != 1:
        raise CheckpointError("networks disagree on the number of classes")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vmin = min(float(ics.min()) for _, ics in results.values())
    vmax = max(float(ics.max()) for _, ics in results.values())
    dmax = max(float(d.max()) for d, _ in results.values())
    ics_t = results["teacher"][1]
    summary = {"image": str(args.image), "networks": {}}
    for name, (dist, ics) in results.items():
        np.savetxt(out / f"{name}_ics.csv", ics.numpy(), delimiter=",", fmt="%.10g")
        np.save(out / f"{name}_distributions.npy", dist.numpy().reshape(-1, *hw))
        viz.plot_ics_heatmap(ics.numpy(), out / f"{name}_ics.png", f"{name}: inter-class similarity", vmin, vmax)
        viz.plot_distribution_grid(dist.numpy(), hw, out / f"{name}_distributions.png", f"{name}: intra-class distributions", dmax)
        summary["networks"][name] = {"ics_loss_vs_teacher": float(losses.ics_loss(ics_t, ics))}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for name, info in summary["networks"].items():
        print(f"{name:>12}  ICS loss vs teacher {info['ics_loss_vs_teacher']:.6g}")
    return 0


def _load_run(run_dir):
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "run.json").read_text())
    log = RunLog.from_csv(run_dir / "metrics.csv")
    evaluated = [r for r in log.records if not np.isnan(r["val_miou"])]
    if not evaluated:
        raise ConfigurationError(f"{run_dir}: run has no validation records")
    best = max(evaluated, key=lambda r: r["val_miou"])
    per_class = None
    if meta.get("best") and meta["best"].get("report"):
        per_class = [np.nan if v is None else v for v in meta["best"]["report"]["per_class_iou"]]
    return {
        "dir": str(run_dir),
        "method": meta["method"],
        "alw_mode": meta["config"]["alw"]["mode"],
        "seed": meta["seed"],
        "best_miou": best["val_miou"],
        "best_pixacc": best["val_pixacc"],
        "best_epoch": best["epoch"],
        "per_class_iou": per_class,
    }


def summarize_runs(runs):
    """Group run records by method (fixed order none, kd, icsd, aicsd) into mean/std rows."""
    aicsd_modes = {r["alw_mode"] for r in runs if r["method"] == "aicsd"}
    groups = {}
    for r in runs:
        label = r["method"]
        if label == "aicsd" and len(aicsd_modes) > 1:
            label = f"aicsd[{r['alw_mode']}]"
        groups.setdefault(label, []).append(r)
    rows = []
    for method in METHODS:
        labels = sorted(k for k in groups if k == method or k.startswith(method + "["))
        if not labels:
            warnings.warn(f"no runs for method '{method}'; omitted from the table")
        for label in labels:
            rs = groups[label]
            miou = np.array([r["best_miou"] for r in rs])
            acc = np.array([r["best_pixacc"] for r in rs])
            pcs = [r["per_class_iou"] for r in rs if r["per_class_iou"] is not None]
            rows.append({
                "method": label,
                "runs": len(rs),
                "seeds": [r["seed"] for r in rs],
                "miou_mean": float(miou.mean()),
                "miou_std": float(miou.std()),
                "pixacc_mean": float(acc.mean()),
                "pixacc_std": float(acc.std()),
                "per_class_iou_mean": np.nanmean(np.array(pcs, dtype=float), axis=0).tolist() if pcs else None,
            })
    return rows


def format_table(rows):
    lines = [f"{'method':<28} {'runs':>4}  {'best val mIoU':>18}  {'pixel accuracy':>18}"]
    for r in rows:
        lines.append(
            f"{r['method']:<28} {r['runs']:>4}  {r['miou_mean']:>9.4f} ± {r['miou_std']:<6.4f}"
            f"  {r['pixacc_mean']:>9.4f} ± {r['pixacc_std']:<6.4f}"
        )
    return "\n".join(lines)


def cmd_compare(args):
    runs = []
    for d in args.runs:
        try:
            runs.append(_load_run(d))
        except (OSError, KeyError, ValueError) as exc:
            warnings.warn(f"skipping {d}: {exc}")
    if not runs:
        raise ConfigurationError("no readable runs given")
    rows = summarize_runs(runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = format_table(rows)
    (out / "summary.txt").write_text(table + "\n")
    (out / "summary.json").write_text(json.dumps({"rows": rows, "runs": runs}, indent=2, default=float) + "\n")
    bars = {r["method"]: r["per_class_iou_mean"] for r in rows if r["per_class_iou_mean"] is not None}
    viz.plot_class_iou_bars(bars, out / "per_class_iou.png")
    print(table)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
    "compare": cmd_compare,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if not args.command:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    logging.captureWarnings(True)
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (AICSDError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
