"""``vesselseg`` command line: phantom, train, eval, score, ablate, infer.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Logs go to stderr; results go to files under the requested output path.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .ablation import run_ablation, skeleton_iters_for, write_table
from .config import load_config
from .metrics import evaluate, report_case, summarize, write_report
from .model import AblationFlags
from .phantom import gen_dataset, make_ood_spec
from .report import plot_ablation, plot_case_metrics, plot_training
from .training import FULL_ROW, NonFiniteLossError, fit, load_cases, load_checkpoint, predict_case
from .volume_io import Mask, Volume, load_volume, normalize_intensity, save_volume

log = logging.getLogger("vesselseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
HELDOUT_SEED_OFFSET = 10_000

ABLATE_FLAGS = {
    "no-aggregator": {"use_aggregator": False},
    "no-adapter": {"use_adapter": False},
    "last-only": {"taps_last_only": True},
    "no-z": {"use_z_channel": False},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_ablate(text: str | None, base: AblationFlags) -> AblationFlags:
    if not text:
        return base
    updates = {}
    for item in text.split(","):
        item = item.strip()
        if item not in ABLATE_FLAGS:
            raise UsageError(f"unknown ablation {item!r}; choose from {sorted(ABLATE_FLAGS)}")
        updates.update(ABLATE_FLAGS[item])
    try:
        return replace(base, **updates)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_phantom(args) -> int:
    cfg = load_config(args.spec).with_seed(args.seed)
    spec = make_ood_spec(cfg.phantom) if args.ood else cfg.phantom
    manifest = gen_dataset(spec, args.n, args.out)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config).with_seed(args.seed)
    if not Path(args.data).is_file():
        raise FileNotFoundError(f"manifest not found: {args.data}")
    train = cfg.train if args.steps is None else replace(cfg.train, steps=args.steps)
    flags = parse_ablate(args.ablate, cfg.ablation)
    val = args.val or cfg.paths.get("val")
    res = fit(args.data, train, flags, args.out, cfg.model, val_manifest=val)
    plot_training(res.history, Path(args.out) / "training.png")
    final = res.history[-1]["loss"]
    if not np.isfinite(final):
        raise NonFiniteLossError(train.steps, final)
    print(res.checkpoint)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, train, flags = load_checkpoint(args.ckpt)
    cases = load_cases(args.data, train.resize_hw)
    out = Path(args.report)
    pred_dir = out / "pred"
    pred_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for c in cases:
        pred = predict_case(model, c.intensity, train.crop_depth)
        save_volume(Mask(pred, c.spacing), pred_dir / f"{c.name}.msk")
        reports.append(report_case(c.name, pred, c.mask, c.spacing, args.skeleton_iters))
    write_report(reports, summarize(reports), out, extra={"seed": train.seed, "checkpoint": str(args.ckpt)})
    plot_case_metrics(reports, out / "metrics.png")
    print(out / "summary.json")
    return EXIT_OK


def cmd_score(args) -> int:
    reports, summary = evaluate(args.pred, args.gt, args.skeleton_iters)
    write_report(reports, summary, args.report)
    plot_case_metrics(reports, Path(args.report) / "metrics.png")
    print(Path(args.report) / "summary.json")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config).with_seed(args.seed)
    if not Path(args.data).is_file():
        raise FileNotFoundError(f"manifest not found: {args.data}")
    out = Path(args.out)
    heldout = args.val or cfg.paths.get("val")
    if heldout is None:
        spec = replace(cfg.phantom, seed=cfg.phantom.seed + HELDOUT_SEED_OFFSET)
        heldout = gen_dataset(spec, cfg.heldout, out / "heldout")
    ood = args.ood or cfg.paths.get("ood")
    seeds = args.seeds or [cfg.train.seed]
    train = cfg.train if args.steps is None else replace(cfg.train, steps=args.steps)
    runs, table = run_ablation(
        args.data, heldout, train, out, cfg.model, seeds=seeds,
        ood_manifest=ood, skeleton_iters=skeleton_iters_for(cfg.phantom),
    )
    paths = write_table(table, runs, out)
    plot_ablation(table, out / "ablation.png", FULL_ROW)
    print(paths["markdown"])
    return EXIT_OK


def cmd_infer(args) -> int:
    model, train, _ = load_checkpoint(args.ckpt)
    vol = load_volume(args.volume)
    if not isinstance(vol, Volume) or vol.channels != 1:
        raise ValueError(f"{args.volume}: expected a single-channel .vol file")
    norm = normalize_intensity(vol)
    pred = predict_case(model, norm.data[0], train.crop_depth, args.threshold)
    save_volume(Mask(pred, vol.spacing), args.out)
    print(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vesselseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate a synthetic vessel dataset")
    s.add_argument("--spec", help="run config JSON (its 'phantom' section is used)")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--ood", action="store_true", help="apply the distribution-shift knobs")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train", help="train a model on a manifest")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ablate", help=f"comma list of {','.join(ABLATE_FLAGS)}")
    s.add_argument("--val")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="run a checkpoint over a manifest and write metric reports")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--skeleton-iters", type=int, default=4)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="score a directory of predicted masks against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--skeleton-iters", type=int, default=4)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("ablate", help="train the full model and its four ablations")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--val")
    s.add_argument("--ood")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("infer", help="segment a single volume")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vesselseg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"vesselseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"vesselseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
