"""Command-line interface.

Subcommands: synth, localize, flow, train, infer, eval, ablate,
patch-sweep, benchmark-flow. Reports are JSON on stdout unless --out is
given. Exit codes: 0 success, 2 invalid input, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import Config
from .errors import CardioMotionError, NumericalDivergence
from .imaging import read_flo, read_mask, write_flo, write_mask
from .localization import localize_lv
from .pipeline import (Dataset, ablate, compute_subject_flows, evaluate_model,
                       infer, load_model, patch_sweep, read_dataset,
                       read_subject, save_model, subject_from_phantom, train,
                       write_subject)
from .synth import make_cohort
from .varflow import average_angular_error, flow_density, format_aae

EXIT_INVALID = 2
EXIT_DIVERGED = 3


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _load_config(path: str | None) -> Config:
    return Config.from_json(path) if path else Config()


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file overriding the defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the report here instead of stdout")


def _split_ids(dataset: Dataset, train_frac: float, seed: int):
    ids = dataset.ids
    order = np.random.default_rng(seed).permutation(len(ids))
    cut = max(1, min(len(ids) - 1, int(round(train_frac * len(ids)))))
    train_ids = [ids[i] for i in sorted(order[:cut])]
    test_ids = [ids[i] for i in sorted(order[cut:])]
    return train_ids, test_ids


def cmd_synth(args) -> int:
    cohort = make_cohort(args.subjects, image_size=args.size, frames=args.frames,
                         seed=args.seed, infarct_motion_scale=args.infarct_scale,
                         noise_sigma=args.noise)
    root = Path(args.data)
    root.mkdir(parents=True, exist_ok=True)
    for i, phantom in enumerate(cohort):
        write_subject(root, subject_from_phantom(phantom, f"subject_{i:03d}"))
    _emit({"written": len(cohort), "directory": str(root)}, args.out)
    return 0


def cmd_localize(args) -> int:
    subject = read_subject(args.data)
    box = localize_lv(subject.sequence)
    _emit({"x": box.x, "y": box.y, "w": box.width, "h": box.height}, args.out)
    return 0


def cmd_flow(args) -> int:
    config = _load_config(args.config)
    subject = read_subject(args.data)
    flows = compute_subject_flows(Dataset([subject]), config)[subject.id]
    out_dir = Path(args.flo_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for j, field in enumerate(flows.flows):
        write_flo(field, out_dir / f"flow_{j:02d}.flo")
    _emit({"pairs": len(flows), "directory": str(out_dir)}, args.out)
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    dataset = read_dataset(args.data)
    model = train(dataset, config, args.seed, mode=args.mode)
    save_model(model, args.model)
    _emit({"model": args.model, "subjects": len(dataset),
           "mode": model.mode}, args.out)
    return 0


def cmd_infer(args) -> int:
    model = load_model(args.model)
    subject = read_subject(args.data)
    mask, scores = infer(model, subject.sequence, region=subject.region)
    write_mask(mask, args.pred)
    if args.scores:
        lines = ["x,y,score"]
        for (y, x), v in np.ndenumerate(scores):
            lines.append(f"{x},{y},{v!r}")
        Path(args.scores).write_text("\n".join(lines) + "\n")
    _emit({"prediction": args.pred, "positive_pixels": int(mask.labels.sum())},
          args.out)
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    dataset = read_dataset(args.data)
    subjects = dataset.subjects if not args.subjects \
        else dataset.subset(args.subjects.split(",")).subjects
    report = evaluate_model(model, subjects)
    payload = report.to_dict()
    if args.roc_csv:
        Path(args.roc_csv).write_text(
            "fpr,tpr\n" + "\n".join(f"{a!r},{b!r}" for a, b in report.roc) + "\n")
    if args.pr_csv:
        Path(args.pr_csv).write_text(
            "recall,precision\n" + "\n".join(f"{a!r},{b!r}" for a, b in report.pr) + "\n")
    _emit(payload, args.out)
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args.config)
    dataset = read_dataset(args.data)
    train_ids, test_ids = _split_ids(dataset, args.train_frac, args.seed)
    reports = ablate(dataset, config, args.seed, train_ids, test_ids)
    _emit({mode: r.to_dict() for mode, r in reports.items()}, args.out)
    return 0


def cmd_patch_sweep(args) -> int:
    config = _load_config(args.config)
    dataset = read_dataset(args.data)
    sizes = [int(s) for s in args.sizes.split(",")]
    train_ids, test_ids = _split_ids(dataset, args.train_frac, args.seed)
    rows = patch_sweep(dataset, sizes, config, args.seed, train_ids, test_ids)
    csv = "size,accuracy,seconds\n" + "\n".join(
        f"{s},{a!r},{t!r}" for s, a, t in rows) + "\n"
    if args.csv:
        Path(args.csv).write_text(csv)
    else:
        print(csv, end="")
    return 0


def cmd_benchmark_flow(args) -> int:
    if args.est and args.gt:
        est = read_flo(args.est)
        gt = read_flo(args.gt)
        mask = read_mask(args.mask) if args.mask else None
        mean, std = average_angular_error(est, gt, mask)
        density = flow_density(est)
        _emit({"aae_mean_deg": mean, "aae_std_deg": std,
               "aae": format_aae(mean, std), "density": density}, args.out)
        return 0
    config = _load_config(args.config)
    subject = read_subject(args.data)
    if subject.gt_flows is None:
        raise CardioMotionError(f"subject {subject.id} carries no ground-truth flow")
    flows = compute_subject_flows(Dataset([subject]), config)[subject.id]
    mask = subject.region
    means, stds, densities = [], [], []
    for est, gt in zip(flows.flows, subject.gt_flows.flows):
        mean, std = average_angular_error(est, gt, mask)
        means.append(mean)
        stds.append(std)
        densities.append(flow_density(est))
    mean = float(np.mean(means))
    std = float(np.mean(stds))
    _emit({"aae_mean_deg": mean, "aae_std_deg": std, "aae": format_aae(mean, std),
           "density": float(np.mean(densities)), "pairs": len(flows)}, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardiomotion",
        description="Pixel-level infarct detection from cardiac cine sequences")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a phantom dataset")
    p.add_argument("--data", required=True, help="output dataset directory")
    p.add_argument("--subjects", type=int, default=12)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--frames", type=int, default=25)
    p.add_argument("--infarct-scale", type=float, default=0.2)
    p.add_argument("--noise", type=float, default=0.01)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("localize", help="emit the 64x64 ROI box for a subject")
    p.add_argument("--data", required=True, help="subject directory")
    _add_common(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("flow", help="write .flo fields for every frame pair")
    p.add_argument("--data", required=True, help="subject directory")
    p.add_argument("--flo-dir", required=True, help="output directory for .flo files")
    _add_common(p)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="output model JSON path")
    p.add_argument("--mode", choices=["local_only", "global_only", "combined"])
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict the infarct mask for one subject")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="subject directory")
    p.add_argument("--pred", required=True, help="output mask PGM")
    p.add_argument("--scores", help="optional per-pixel score CSV")
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a model against ground truth")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subjects", help="comma-separated subject ids (default: all)")
    p.add_argument("--roc-csv")
    p.add_argument("--pr-csv")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare local/global/combined features")
    p.add_argument("--data", required=True)
    p.add_argument("--train-frac", type=float, default=0.75)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("patch-sweep", help="accuracy/time for window sizes")
    p.add_argument("--data", required=True)
    p.add_argument("--sizes", default="3,5,7,9,11,13,15,17")
    p.add_argument("--train-frac", type=float, default=0.75)
    p.add_argument("--csv", help="output CSV path (default: stdout)")
    _add_common(p)
    p.set_defaults(func=cmd_patch_sweep)

    p = sub.add_parser("benchmark-flow", help="AAE and density versus ground truth")
    p.add_argument("--data", help="subject directory with flows/ ground truth")
    p.add_argument("--est", help="estimated .flo (alternative to --data)")
    p.add_argument("--gt", help="ground-truth .flo")
    p.add_argument("--mask", help="optional evaluation mask PGM")
    _add_common(p)
    p.set_defaults(func=cmd_benchmark_flow)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CardioMotionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
