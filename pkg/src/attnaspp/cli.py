"""Command-line entry point: ``attnaspp <command> [options]``.

Exit codes: 0 success, 1 usage/config error, 2 data/parse error,
3 numerical failure. ``ATTNASPP_OUTPUT_DIR`` overrides ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    FormatError, NiftiError, SynthConfig, dataset_split, extract_axial, gen_synthetic,
    load_samples, read_nifti, read_tensor, write_samples,
)
from .data.samples import encode_pgm, encode_pgm_gray
from .gradcheck import format_table, run_gradcheck, summarize
from .metrics import evaluate_set
from .models import VARIANTS, CheckpointError, load_network
from .optim import NumericalError
from .tensor import ShapeError, Tensor
from .train import RunConfig, load_config_file, train

logger = logging.getLogger("attnaspp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ENV = "ATTNASPP_OUTPUT_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(arg) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or arg)


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------- config plumbing

_TRAIN_FLAGS = {
    # flag name -> argument type
    "variant": str, "depth": int, "base_channels": int, "input_size": int,
    "aspp_rates": _int_list, "spp_scales": _int_list, "aspp_repeats": int,
    "epochs": int, "batch_size": int, "lr": float, "eta_min": float, "t_i": int,
    "seed": int, "train_manifest": str, "val_manifest": str, "test_manifest": str,
    "manifest": str, "split": _int_list, "precision": str, "threshold": float,
    "preset": str,
}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with flat (optionally dotted) keys")
    for name, typ in _TRAIN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--restart", action="store_true", default=None,
                   help="enable warm restarts of the cosine schedule")
    p.add_argument("--out", default=None, help="output directory")


def _run_config(args) -> RunConfig:
    values = load_config_file(args.config) if args.config else {}
    for name in list(_TRAIN_FLAGS) + ["restart"]:
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    if args.out is not None:
        values["out_dir"] = args.out
    if os.environ.get(OUTPUT_ENV):
        values["out_dir"] = os.environ[OUTPUT_ENV]
    cfg = RunConfig.from_mapping(values)
    cfg.validate()
    return cfg


def _load_splits(cfg: RunConfig):
    if cfg.train_manifest:
        if not cfg.val_manifest:
            raise UsageError("--val-manifest is required with --train-manifest")
        tr = load_samples(cfg.train_manifest)
        va = load_samples(cfg.val_manifest)
        te = load_samples(cfg.test_manifest) if cfg.test_manifest else []
        return tr, va, te
    if cfg.manifest:
        return dataset_split(load_samples(cfg.manifest), cfg.split, cfg.seed)
    raise UsageError("no data: give --manifest or --train-manifest/--val-manifest")


def _fingerprint(samples) -> str:
    return hashlib.sha256("\n".join(s.id for s in samples).encode()).hexdigest()[:16]


def _data_echo(tr, va, te) -> dict:
    return {"train": {"n": len(tr), "ids_sha256": _fingerprint(tr)},
            "val": {"n": len(va), "ids_sha256": _fingerprint(va)},
            "test": {"n": len(te), "ids_sha256": _fingerprint(te)}}


def _train_one(cfg: RunConfig, splits, out: Path):
    tr, va, te = splits
    net, report = train(cfg, tr, va, te, out_dir=out, log=logger.info)
    report.config["data"] = _data_echo(tr, va, te)
    (out / "report.json").write_text(report.to_json())
    return net, report


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = _run_config(args)
    splits = _load_splits(cfg)
    out = Path(cfg.out_dir)
    _, report = _train_one(cfg, splits, out)
    if report.test:
        t = report.test
        print(f"test  DSC {t['dsc']:.4f}  mIoU {t['miou']:.4f}  Acc {t['acc']:.4f}  "
              f"(n={t['n']}, best epoch {report.best_epoch + 1})")
    print(f"checkpoints and report written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load_network(args.checkpoint)
    samples = load_samples(args.manifest)
    ev = evaluate_set(net, samples, args.threshold)
    s = ev.summary
    row = f"{net.spec.variant:<16} {s['dsc']:8.4f} {s['miou']:8.4f} {s['acc']:8.4f}"
    print(f"{'model':<16} {'DSC':>8} {'mIoU':>8} {'Acc':>8}\n{row}")
    if args.out or os.environ.get(OUTPUT_ENV):
        out = _out_dir(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_metrics.csv").write_text(ev.to_csv())
        (out / "eval_metrics.txt").write_text(ev.to_text() + "\n")
        (out / "eval_summary.json").write_text(json.dumps(
            {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest),
             "variant": net.spec.variant, **s}, indent=2))
    return EXIT_OK


def cmd_predict(args) -> int:
    net = load_network(args.checkpoint)
    if args.attention and not net.spec.gated:
        raise UsageError(f"--attention needs a gated variant, checkpoint is {net.spec.variant!r}")
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for path in args.images:
        img = read_tensor(path).astype(np.float32)
        img = img.reshape(img.shape[-2:]) if img.ndim == 3 and img.shape[0] == 1 else img
        if img.ndim != 2:
            raise FormatError(f"{path}: expected an H x W image, got shape {img.shape}")
        x = Tensor(img[None, None])
        stem = Path(path).stem
        if args.attention:
            prob, alphas = net(x, return_alphas=True)
            for k, a in enumerate(alphas, 1):
                (out / f"{stem}_alpha{k}.pgm").write_bytes(encode_pgm_gray(a.data[0, 0]))
        else:
            prob = net(x)
        (out / f"{stem}_mask.pgm").write_bytes(encode_pgm(prob.data[0, 0] >= args.threshold))
        written += 1
    print(f"wrote {written} mask(s) to {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    base = _run_config(args)
    splits = _load_splits(base)
    if not splits[2]:
        raise UsageError("compare needs a test split (--test-manifest or --manifest)")
    root = Path(base.out_dir)
    rows, echoes = [], {}
    for variant in VARIANTS:
        cfg = RunConfig(**{**asdict(base), "variant": variant})
        logger.info("training %s", variant)
        _, report = _train_one(cfg, splits, root / variant)
        t = report.test or {}
        rows.append((variant, t.get("dsc"), t.get("miou"), t.get("acc"), t.get("iou_fg")))
        echoes[variant] = {"seed": report.config["seed"], "data": report.config["data"],
                           "num_parameters": report.config["num_parameters"],
                           "best_epoch": report.best_epoch, "timings": report.timings}
    text = format_comparison(rows)
    print(text)
    (root / "compare.txt").write_text(text + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "dsc", "miou", "acc", "iou_fg"])
    for r in rows:
        w.writerow([r[0]] + [f"{v:.6f}" for v in r[1:]])
    (root / "compare.csv").write_text(buf.getvalue())
    (root / "compare.json").write_text(json.dumps(
        {"rows": [dict(zip(["model", "dsc", "miou", "acc", "iou_fg"], r)) for r in rows],
         "runs": echoes, "code_version": __version__}, indent=2))
    return EXIT_OK


def format_comparison(rows) -> str:
    lines = [f"{'model':<16} {'DSC':>8} {'mIoU':>8} {'Acc':>8}"]
    for name, d, m, a, _ in rows:
        lines.append(f"{name:<16} {d:8.4f} {m:8.4f} {a:8.4f}")
    ranked = sorted(rows, key=lambda r: -r[1])
    lines.append("observed DSC ordering: " + " > ".join(r[0] for r in ranked))
    return "\n".join(lines)


def cmd_gradcheck(args) -> int:
    rows = summarize(run_gradcheck(seeds=range(args.seeds)))
    print(format_table(rows))
    return EXIT_OK if all(ok for *_, ok in rows) else EXIT_NUMERIC


def cmd_synth(args) -> int:
    cfg = SynthConfig(size=args.size, min_blobs=args.min_blobs, max_blobs=args.max_blobs,
                      min_radius=args.min_radius, max_radius=args.max_radius,
                      contrast=args.contrast, noise_sigma=args.noise, warp=args.warp,
                      p_empty=args.p_empty, seed=args.seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    samples = gen_synthetic(cfg, args.n)
    out = _out_dir(args.out)
    path = write_samples(samples, out)
    if args.split:
        parts = dataset_split(samples, args.split, args.seed)
        for name, part in zip(("train", "val", "test"), parts):
            ids = {s.id for s in part}
            lines = [ln for ln in path.read_text().splitlines(True) if ln.split("\t")[0] in ids]
            order = {s.id: i for i, s in enumerate(part)}
            lines.sort(key=lambda ln: order[ln.split("\t")[0]])
            (out / f"{name}.tsv").write_text("".join(lines))
    (out / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=2))
    print(f"wrote {len(samples)} samples, manifest {path}")
    return EXIT_OK


def cmd_slices(args) -> int:
    labels = args.label or []
    if labels and len(labels) != len(args.image):
        raise UsageError("--label must be given once per --image")
    samples = []
    for i, img_path in enumerate(args.image):
        vol = read_nifti(img_path)
        lab = read_nifti(labels[i]) if labels else None
        prefix = Path(img_path).name.split(".")[0]
        samples.extend(extract_axial(vol, lab, policy=args.policy, modality=args.modality,
                                     prefix=prefix, norm=args.norm))
    path = write_samples(samples, _out_dir(args.out))
    print(f"wrote {len(samples)} slice pairs, manifest {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="attnaspp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("train", help="train one model")
    _add_train_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("compare", help="train all four variants on the same data")
    _add_train_flags(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="write PGM masks for TEN1 images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("images", nargs="+")
    sp.add_argument("--out", default="predictions")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--attention", action="store_true", help="also write attention maps")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    sp.add_argument("--seeds", type=int, default=5)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--n", type=int, default=250)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--min-blobs", type=int, default=1)
    sp.add_argument("--max-blobs", type=int, default=2)
    sp.add_argument("--min-radius", type=float, default=0.1)
    sp.add_argument("--max-radius", type=float, default=0.2)
    sp.add_argument("--contrast", type=float, default=0.6)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--warp", type=float, default=0.15)
    sp.add_argument("--p-empty", type=float, default=0.1)
    sp.add_argument("--split", type=_int_list, default=None,
                    help="also write train/val/test manifests, e.g. 200,25,25")
    sp.add_argument("--out", default="data/synth")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("slices", help="extract axial slices from NIfTI-1 volumes")
    sp.add_argument("--image", nargs="+", required=True)
    sp.add_argument("--label", nargs="+", default=None)
    sp.add_argument("--modality", choices=["t1c", "t2f", "t2w", "synth"], default="t1c")
    sp.add_argument("--policy", choices=["all", "max_area"], default="all")
    sp.add_argument("--norm", choices=["minmax", "zscore"], default="minmax")
    sp.add_argument("--out", default="data/slices")
    sp.set_defaults(func=cmd_slices)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NiftiError, FormatError, CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ShapeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
