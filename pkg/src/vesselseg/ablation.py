"""Train every ablation row under shared seeds and score each on held-out (and optional OOD) cases."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from .metrics import default_skeleton_iters, report_case, summarize
from .model import AblationFlags, ModelConfig
from .training import FULL_ROW, TABLE2_ROWS, Case, TrainConfig, fit, load_cases, predict_case

log = logging.getLogger(__name__)


def evaluate_model(model, cases: list[Case], crop: int, iters: int) -> list:
    return [report_case(c.name, predict_case(model, c.intensity, crop), c.mask, c.spacing, iters) for c in cases]


def _median(vals):
    vals = [v for v in vals if v is not None]
    return float(np.median(vals)) if vals else None


def run_ablation(
    manifest,
    heldout_manifest,
    cfg: TrainConfig,
    out_dir,
    model_cfg: ModelConfig = ModelConfig(),
    seeds=(0,),
    rows: dict[str, AblationFlags] | None = None,
    ood_manifest=None,
    skeleton_iters: int = 4,
) -> tuple[list[dict], list[dict]]:
    """Returns (per-run records, per-method rows with medians over seeds)."""
    rows = TABLE2_ROWS if rows is None else rows
    out_dir = Path(out_dir)
    heldout = load_cases(heldout_manifest, cfg.resize_hw)
    ood = load_cases(ood_manifest, cfg.resize_hw) if ood_manifest else []
    runs = []
    for method, flags in rows.items():
        for seed in seeds:
            tag = method.lower().replace(" ", "_").replace("/", "").replace("(", "").replace(")", "")
            res = fit(manifest, replace(cfg, seed=seed), flags, out_dir / "runs" / f"{tag}_seed{seed}", model_cfg)
            summ = summarize(evaluate_model(res.model, heldout, cfg.crop_depth, skeleton_iters))
            rec = {
                "method": method,
                "seed": seed,
                "trainable_params": res.model.trainable_count(),
                "final_loss": res.history[-1]["loss"],
                "train_dice": res.history[-1].get("train_dice"),
                "dice": summ["dice"]["mean"],
                "cldice": summ["cldice"]["mean"],
                "hd95_mm": summ["hd95_mm"]["mean"],
            }
            if ood:
                osum = summarize(evaluate_model(res.model, ood, cfg.crop_depth, skeleton_iters))
                rec["ood_dice"] = osum["dice"]["mean"]
                rec["ood_cldice"] = osum["cldice"]["mean"]
                rec["ood_hd95_mm"] = osum["hd95_mm"]["mean"]
            log.info("%s seed %d: %s", method, seed, rec)
            runs.append(rec)
    table = []
    for method in rows:
        mine = [r for r in runs if r["method"] == method]
        row = {"method": method, "full": method == FULL_ROW, "seeds": [r["seed"] for r in mine]}
        for key in ("dice", "cldice", "hd95_mm", "ood_dice", "ood_cldice", "ood_hd95_mm"):
            if key in mine[0]:
                row[key] = _median([r[key] for r in mine])
        table.append(row)
    return runs, table


def _fmt(v, pct=False):
    if v is None:
        return "undefined"
    return f"{100 * v:.2f}" if pct else f"{v:.3f}"


def write_table(table: list[dict], runs: list[dict], out_dir) -> dict[str, Path]:
    """ablation.md (Table-2 layout), ablation.csv and runs.jsonl under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    has_ood = "ood_dice" in table[0]
    head = "| Method | Dice(%) | clDice | HD95(mm) |" + (" OOD Dice(%) |" if has_ood else "")
    lines = [head, "|" + "---|" * (head.count("|") - 1)]
    for r in table:
        name = f"**{r['method']}**" if r["full"] else r["method"]
        line = f"| {name} | {_fmt(r['dice'], True)} | {_fmt(r['cldice'])} | {_fmt(r['hd95_mm'])} |"
        if has_ood:
            line += f" {_fmt(r['ood_dice'], True)} |"
        lines.append(line)
    md = out_dir / "ablation.md"
    md.write_text("\n".join(lines) + "\n")
    csv_path = out_dir / "ablation.csv"
    cols = ["method", "full", "dice", "cldice", "hd95_mm"] + (["ood_dice", "ood_cldice", "ood_hd95_mm"] if has_ood else []) + ["seeds"]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in table:
            w.writerow([" ".join(map(str, r[c])) if c == "seeds" else r[c] for c in cols])
    runs_path = out_dir / "runs.jsonl"
    runs_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in runs))
    return {"markdown": md, "csv": csv_path, "runs": runs_path}


def skeleton_iters_for(spec) -> int:
    return default_skeleton_iters(spec.r_max)
