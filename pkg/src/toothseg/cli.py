"""Command-line entry point: phantom -> folds -> localize -> crop -> segment -> evaluate.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("toothseg")

COMMANDS = ("phantom", "folds", "train-localize", "crop", "train-segment", "eval-localize", "eval-segment", "report")


class UsageError(ValueError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides config seeds)")
    p.add_argument("--config", default="toy", help="YAML config path or preset name (toy, paper, paper_lr1e-7)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    p.add_argument("-v", "--verbose", action="store_true")


def _fold_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--folds", help="folds.json from the 'folds' command")
    p.add_argument("--fold", type=int, default=0, help="test fold index")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="toothseg", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"toothseg {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    _common(p)
    p.add_argument("--n", type=int, default=None, help="number of cases (default: config n_cases)")

    p = sub.add_parser("folds", help="stratified, case-grouped cross-validation folds")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--no-stratify", action="store_true")

    p = sub.add_parser("train-localize", help="train the landmark network")
    _common(p)
    p.add_argument("--manifest", required=True)
    _fold_args(p)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("crop", help="extract per-tooth crops (ground-truth or predicted landmarks)")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", help="landmark network checkpoint; omit to crop at ground-truth landmarks")

    p = sub.add_parser("train-segment", help="train the lesion U-Net on a crop cache")
    _common(p)
    p.add_argument("--crops", required=True)
    _fold_args(p)
    p.add_argument("--loss", choices=("focal", "focal_tversky", "combo"), default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("eval-localize", help="point errors and radius accuracies")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    _fold_args(p)
    p.add_argument("--radii", type=float, nargs="+", default=[2.0, 2.5, 3.0, 4.0])
    p.add_argument("--units", choices=("mm", "voxel"), default="mm")

    p = sub.add_parser("eval-segment", help="lesion detection and Dice on a crop cache")
    _common(p)
    p.add_argument("--crops", required=True)
    p.add_argument("--checkpoint", required=True)
    _fold_args(p)
    p.add_argument("--loss", default="", help="label for the report row")
    p.add_argument("--no-regions", action="store_true", help="ignore stored cuboid regions")

    p = sub.add_parser("report", help="render report JSON files as text tables")
    _common(p)
    p.add_argument("inputs", nargs="+")
    return ap


# ------------------------------------------------------------------ helpers


def _load_config(args):
    from .trainer import load_config, preset

    src = args.config
    cfg = load_config(src) if (src.endswith((".yaml", ".yml")) or Path(src).exists()) else preset(src)
    if args.seed is not None:
        cfg = cfg.override("phantom", seed=args.seed)
        cfg = cfg.override("localizer", seed=args.seed, threads=args.threads)
        cfg = cfg.override("segmenter", seed=args.seed, threads=args.threads)
    else:
        cfg = cfg.override("localizer", threads=args.threads).override("segmenter", threads=args.threads)
    return cfg


def _replay(out: Path, args, cfg, extra=None) -> None:
    import torch

    info = {
        "command": args.command,
        "argv": args.argv,
        "args": {k: v for k, v in vars(args).items() if k not in ("argv", "func")},
        "config": cfg.to_dict() if cfg is not None else None,
        "versions": {
            "toothseg": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    }
    if extra:
        info.update(extra)
    (out / "replay.json").write_text(json.dumps(info, indent=2, default=str))


def _manifest(path):
    from .core import load_manifest

    return load_manifest(path, check_paths=True)


def _fold_split(args, ids):
    """(train ids, test ids); without a folds file everything is training data."""
    from .trainer import FoldSpec

    if not args.folds:
        return list(ids), []
    spec = FoldSpec.from_dict(json.loads(Path(args.folds).read_text()))
    if not 0 <= args.fold < spec.k:
        raise UsageError(f"--fold must lie in [0, {spec.k})")
    test = set(spec.test_ids(args.fold))
    return [i for i in ids if i not in test], [i for i in ids if i in test]


# ----------------------------------------------------------------- commands


def cmd_phantom(args, cfg, out):
    from .phantom import generate_dataset

    n = args.n if args.n is not None else cfg.n_cases
    if n < 1:
        raise UsageError("--n must be >= 1")
    m = generate_dataset(cfg.phantom, n, out)
    print(f"wrote {len(m)} cases to {out}")


def cmd_folds(args, cfg, out):
    from .trainer import make_folds

    m = _manifest(args.manifest)
    k = args.k if args.k is not None else cfg.folds
    spec = make_folds(m, k, not args.no_stratify, cfg.phantom.seed if args.seed is None else args.seed)
    (out / "folds.json").write_text(json.dumps(spec.to_dict(), indent=2))
    print(f"wrote {spec.k} folds of sizes {[len(f) for f in spec.folds]}")


def cmd_train_localize(args, cfg, out):
    from .scn import save_scn
    from .trainer import load_case, save_run, train_localizer

    lcfg = cfg.localizer
    kw = {}
    if args.iterations is not None:
        kw["iterations"] = args.iterations
    if args.lr is not None:
        kw["learning_rate"] = args.lr
    if kw:
        cfg = cfg.override("localizer", **kw)
        lcfg = cfg.localizer
    m = _manifest(args.manifest)
    train_ids, _ = _fold_split(args, [r.case_id for r in m])
    cases = [load_case(m, m.by_id()[i]) for i in train_ids]
    model, hist = train_localizer(cases, cfg.scn, lcfg, log_every=50 if args.verbose else 0)
    save_scn(model, out / "scn.pt")
    save_run(out, hist, extra={"train_cases": train_ids})
    print(f"trained {lcfg.iterations} iterations on {len(cases)} cases; final loss {hist[-1] if hist else float('nan'):.4f}")
    return cfg


def cmd_crop(args, cfg, out):
    from .core import load_cuboids, load_mask
    from .pipeline import extract_case_crops, save_crops
    from .scn import load_scn
    from .trainer import load_case, predict_landmarks

    m = _manifest(args.manifest)
    model = load_scn(args.checkpoint) if args.checkpoint else None
    samples, regions = [], []
    for rec in m:
        img, gt = load_case(m, rec)
        lms = predict_landmarks(model, img) if model is not None else gt
        lesion = load_mask(m.resolve(rec.lesion_mask_path))
        cub = load_cuboids(m.resolve(rec.cuboids_path)) if rec.cuboids_path else None
        s, r = extract_case_crops(img, lms, lesion, rec.jaw_label, rec.has_lesion, rec.case_id, cfg.crop, cub)
        samples += s
        regions += r
    save_crops(samples, out, regions)
    print(f"wrote {len(samples)} crops ({sum(s.has_lesion for s in samples)} with lesions) to {out}")


def _crops_split(args):
    from .pipeline import load_crops, load_regions

    crops = load_crops(args.crops)
    regions = load_regions(args.crops)
    train_ids, test_ids = _fold_split(args, sorted({c.source_case for c in crops}))
    return crops, regions, set(train_ids), set(test_ids)


def cmd_train_segment(args, cfg, out):
    from .trainer import save_run, train_segmenter
    from .unet import save_unet

    kw = {}
    if args.loss is not None:
        kw["loss_name"] = args.loss
    if args.iterations is not None:
        kw["iterations"] = args.iterations
    if args.lr is not None:
        kw["learning_rate"] = args.lr
    if kw:
        cfg = cfg.override("segmenter", **kw)
    crops, _, train_ids, _ = _crops_split(args)
    train = [c for c in crops if c.source_case in train_ids]
    if not train:
        raise UsageError("no training crops in the selected folds")
    model, hist = train_segmenter(train, cfg.unet, cfg.segmenter, log_every=100 if args.verbose else 0)
    save_unet(model, out / "unet.pt")
    save_run(out, hist, extra={"train_cases": sorted(train_ids)})
    print(f"trained {cfg.segmenter.iterations} iterations on {len(train)} crops; final loss {hist[-1] if hist else float('nan'):.5f}")
    return cfg


def cmd_eval_localize(args, cfg, out):
    from .scn import load_scn
    from .trainer import evaluate_localizer, load_case

    m = _manifest(args.manifest)
    model = load_scn(args.checkpoint)
    ids = [r.case_id for r in m]
    _, test_ids = _fold_split(args, ids)
    test_ids = test_ids or ids
    cases = [load_case(m, m.by_id()[i]) for i in test_ids]
    spacing = (1.0, 1.0, 1.0) if args.units == "voxel" else None
    rep = evaluate_localizer(model, cases, args.radii, spacing, label=f"SCN ({args.units})")
    rep.to_json(out / "report.json")
    text = rep.render_table()
    (out / "report.txt").write_text(text)
    print(text, end="")


def cmd_eval_segment(args, cfg, out):
    from .trainer import evaluate_segmenter
    from .unet import load_unet

    model = load_unet(args.checkpoint)
    crops, regions, _, test_ids = _crops_split(args)
    keep = [i for i, c in enumerate(crops) if not test_ids or c.source_case in test_ids]
    test = [crops[i] for i in keep]
    regs = None if args.no_regions else [regions[i] for i in keep]
    rep = evaluate_segmenter(model, test, regs, label=args.loss or "U-Net")
    rep.to_json(out / "report.json")
    text = rep.render_table()
    (out / "report.txt").write_text(text)
    print(text, end="")


def cmd_report(args, cfg, out):
    from .metrics import EvalReport, render_tables

    reports = [EvalReport.from_json(p) for p in args.inputs]
    text = render_tables(reports)
    (out / "report.txt").write_text(text)
    print(text, end="")


HANDLERS = {
    "phantom": cmd_phantom,
    "folds": cmd_folds,
    "train-localize": cmd_train_localize,
    "crop": cmd_crop,
    "train-segment": cmd_train_segment,
    "eval-localize": cmd_eval_localize,
    "eval-segment": cmd_eval_segment,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        import torch

        torch.set_num_threads(max(1, args.threads))
        resolved = HANDLERS[args.command](args, cfg, out) or cfg
        _replay(out, args, resolved)
    except (UsageError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"toothseg {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report any runtime failure as exit code 1
        print(f"toothseg {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
