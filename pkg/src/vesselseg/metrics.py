"""Dice, clDice (morphological skeleton), HD95 in millimetres, and directory evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume_io import load_mask

_CUBE = np.ones((3, 3, 3), dtype=bool)


def _pair(p, g) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(p).astype(bool), np.asarray(g).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dice(p, g) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1."""
    p, g = _pair(p, g)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def _min_pool(m: np.ndarray) -> np.ndarray:
    # window clipped at the volume border, i.e. out-of-bounds voxels are ignored
    return ndimage.minimum_filter(m, footprint=_CUBE, mode="nearest")


def _max_pool(m: np.ndarray) -> np.ndarray:
    return ndimage.maximum_filter(m, footprint=_CUBE, mode="nearest")


def soft_skeleton(m, iters: int) -> np.ndarray:
    """Iterative min/max-pool skeleton of a binary mask with a 3x3x3 element.

    One opening residue of the mask itself, then ``iters`` erode-and-residue
    passes, as in the reference clDice skeleton.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    m = np.asarray(m).astype(bool)
    skel = m & ~_max_pool(_min_pool(m))
    for _ in range(iters):
        m = _min_pool(m)
        skel |= m & ~_max_pool(_min_pool(m))
    return skel


def default_skeleton_iters(r_max: float) -> int:
    return int(math.ceil(r_max)) + 1


def cldice(p, g, iters: int = 4) -> float:
    """Harmonic mean of topology precision |S_p & G|/|S_p| and sensitivity |S_g & P|/|S_g|."""
    p, g = _pair(p, g)
    if not p.any() and not g.any():
        return 1.0
    sp, sg = soft_skeleton(p, iters), soft_skeleton(g, iters)
    if not sp.any() or not sg.any():
        return 0.0
    tprec = (sp & g).sum() / sp.sum()
    tsens = (sg & p).sum() / sg.sum()
    if tprec + tsens == 0:
        return 0.0
    return float(2.0 * tprec * tsens / (tprec + tsens))


def boundary(m: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbour in the background or on the volume edge."""
    m = np.asarray(m).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    inner = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(3, 1))
    return m & ~inner[1:-1, 1:-1, 1:-1]


def _directed_d95(a_pts: np.ndarray, b_pts: np.ndarray) -> float:
    dist, _ = cKDTree(b_pts).query(a_pts, k=1)
    return float(np.percentile(dist, 95))


def hd95(p, g, spacing=(1.0, 1.0, 1.0)) -> float | None:
    """Symmetric 95th-percentile Hausdorff distance in mm between mask boundaries.

    Returns None (undefined) when exactly one mask is empty and 0.0 when both are.
    """
    p, g = _pair(p, g)
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        return None
    sp = np.asarray(spacing, dtype=float)
    a = np.argwhere(boundary(p)) * sp
    b = np.argwhere(boundary(g)) * sp
    return max(_directed_d95(a, b), _directed_d95(b, a))


@dataclass
class MetricReport:
    case: str
    dice: float
    cldice: float
    hd95_mm: float | None
    pred_voxels: int
    gt_voxels: int


def report_case(case: str, p, g, spacing, iters: int = 4) -> MetricReport:
    p, g = _pair(p, g)
    return MetricReport(
        case, dice(p, g), cldice(p, g, iters), hd95(p, g, spacing), int(p.sum()), int(g.sum())
    )


def summarize(reports: list[MetricReport]) -> dict:
    out = {"cases": len(reports)}
    for key in ("dice", "cldice", "hd95_mm"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        out[key] = {
            "mean": float(np.mean(vals)) if vals else None,
            "median": float(np.median(vals)) if vals else None,
            "undefined": len(reports) - len(vals),
        }
    return out


def evaluate(pred_dir: str | Path, gt_dir: str | Path, iters: int = 4) -> tuple[list[MetricReport], dict]:
    """Score every ``*.msk`` in ``gt_dir`` against the same-named file in ``pred_dir``."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    gts = sorted(gt_dir.glob("*.msk"))
    if not gts:
        raise ValueError(f"no .msk files in {gt_dir}")
    reports = []
    for gpath in gts:
        ppath = pred_dir / gpath.name
        if not ppath.is_file():
            raise FileNotFoundError(f"missing prediction for {gpath.name} in {pred_dir}")
        g, p = load_mask(gpath), load_mask(ppath)
        reports.append(report_case(gpath.stem, p.data, g.data, g.spacing, iters))
    return reports, summarize(reports)


def write_report(reports: list[MetricReport], summary: dict, out_dir: str | Path, extra: dict | None = None) -> None:
    """metrics.jsonl, metrics.csv (case,dice,cldice,hd95_mm) and summary.json under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for r in reports:
            fh.write(json.dumps({**asdict(r), **(extra or {})}, sort_keys=True) + "\n")
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "dice", "cldice", "hd95_mm"])
        for r in reports:
            w.writerow([r.case, f"{r.dice:.6f}", f"{r.cldice:.6f}",
                        "undefined" if r.hd95_mm is None else f"{r.hd95_mm:.6f}"])
    (out_dir / "summary.json").write_text(json.dumps({**summary, **(extra or {})}, indent=1, sort_keys=True))
