"""Compound loss, training loop, checkpoints and sliding-window inference."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .decoder import predict_mask
from .metrics import dice
from .model import AblationFlags, ModelConfig, VesselSegmenter
from .phantom import read_manifest
from .volume_io import Mask, Volume, augment, crop_depth, load_mask, load_volume, normalize_intensity, resize_mask, resize_spatial
from .weightfile import load_tensors, save_tensors

log = logging.getLogger(__name__)

TABLE2_ROWS = {
    "w/o 3D Aggregator": AblationFlags(use_aggregator=False),
    "w/o 3D Adapter": AblationFlags(use_adapter=False),
    "Only Last Layer (11)": AblationFlags(taps_last_only=True),
    "Only Last Layer (11) w/o Z": AblationFlags(taps_last_only=True, use_z_channel=False),
    "Ours (Full)": AblationFlags(),
}
FULL_ROW = "Ours (Full)"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    steps: int = 2000
    batch_size: int = 1
    crop_depth: int = 16
    seed: int = 0
    dice_smooth: float = 1.0
    w_dice: float = 1.0
    w_ce: float = 1.0
    augment: bool = True
    eval_every: int = 100
    checkpoint_every: int = 500
    resize_hw: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.resize_hw is not None:
            object.__setattr__(self, "resize_hw", tuple(self.resize_hw))
        if min(self.lr, self.adam_eps, self.dice_smooth) <= 0:
            raise ValueError("lr, adam_eps and dice_smooth must be positive")
        if min(self.steps, self.batch_size, self.crop_depth, self.eval_every, self.checkpoint_every) < 1:
            raise ValueError("steps, batch_size, crop_depth, eval_every, checkpoint_every must be >= 1")
        if self.w_dice < 0 or self.w_ce < 0 or self.w_dice + self.w_ce == 0:
            raise ValueError("loss weights must be non-negative and not both zero")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["resize_hw"] = None if self.resize_hw is None else list(self.resize_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - (2 sum(p y) + eps) / (sum p + sum y + eps), summed over the whole batch."""
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(probs.shape)} vs {tuple(target.shape)}")
    inter = (probs * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (probs.sum() + target.sum() + smooth)


def ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on logits: y softplus(-z) + (1 - y) softplus(z)."""
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(target.shape)}")
    return (target * F.softplus(-logits) + (1.0 - target) * F.softplus(logits)).mean()


def compound_loss(logits: torch.Tensor, target: torch.Tensor, cfg: TrainConfig = TrainConfig()) -> torch.Tensor:
    loss = logits.new_zeros(())
    if cfg.w_dice:
        loss = loss + cfg.w_dice * soft_dice_loss(torch.sigmoid(logits), target, cfg.dice_smooth)
    if cfg.w_ce:
        loss = loss + cfg.w_ce * ce_loss(logits, target)
    return loss


@dataclass
class TrainState:
    model: VesselSegmenter
    optimizer: torch.optim.Optimizer
    step: int = 0


def new_state(model: VesselSegmenter, cfg: TrainConfig) -> TrainState:
    opt = torch.optim.Adam(model.trainable_parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)
    return TrainState(model, opt)


def train_step(state: TrainState, batch: tuple[torch.Tensor, torch.Tensor], cfg: TrainConfig) -> tuple[TrainState, float]:
    """One Adam update of the trainable partition; returns the loss before the update."""
    x, y = batch
    state.model.train()
    logits = state.model(x)
    loss = compound_loss(logits, y, cfg)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise NonFiniteLossError(state.step, value)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return state, value


@dataclass
class Case:
    name: str
    intensity: np.ndarray  # (D, H, W) normalized
    mask: np.ndarray  # (D, H, W) uint8
    spacing: tuple[float, float, float]


def load_cases(manifest: str | Path, resize_hw=None) -> list[Case]:
    _, items = read_manifest(manifest)
    cases = []
    for it in items:
        vol = load_volume(it["volume"])
        if not isinstance(vol, Volume):
            raise ValueError(f"{it['volume']} is not an intensity volume")
        mask = load_mask(it["mask"])
        if mask.dims != vol.dims:
            raise ValueError(f"{it['mask']}: dims {mask.dims} != volume dims {vol.dims}")
        vol = normalize_intensity(vol)
        if resize_hw is not None:
            vol = resize_spatial(vol, *resize_hw)
            mask = resize_mask(mask, *resize_hw)
        cases.append(Case(Path(it["volume"]).stem, vol.data[0], mask.data, vol.spacing))
    return cases


def sample_batch(cases: list[Case], cfg: TrainConfig, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    xs, ys = [], []
    for _ in range(cfg.batch_size):
        case = cases[int(rng.integers(0, len(cases)))]
        depth = case.intensity.shape[0]
        length = min(cfg.crop_depth, depth)
        start = int(rng.integers(0, depth - length + 1))
        v, m = crop_depth(Volume(case.intensity[None], case.spacing), Mask(case.mask, case.spacing), start, length)
        if cfg.augment:
            v, m = augment(v, m, rng)
        xs.append(v.data)
        ys.append(m.data[None].astype(np.float32))
    return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys))


def window_starts(depth: int, crop: int) -> list[int]:
    """Depth windows with 50% overlap; the last window is flush with the end."""
    if depth <= crop:
        return [0]
    stride = max(1, crop // 2)
    starts = list(range(0, depth - crop + 1, stride))
    if starts[-1] != depth - crop:
        starts.append(depth - crop)
    return starts


@torch.no_grad()
def predict_probs(model: VesselSegmenter, intensity: np.ndarray, crop: int) -> np.ndarray:
    """Sliding-window probabilities for a (D, H, W) normalized volume."""
    model.eval()
    depth = intensity.shape[0]
    dtype = next(model.parameters()).dtype
    acc = np.zeros(intensity.shape, dtype=np.float64)
    hits = np.zeros((depth, 1, 1), dtype=np.float64)
    for s in window_starts(depth, crop):
        e = min(depth, s + crop)
        x = torch.as_tensor(np.ascontiguousarray(intensity[s:e]), dtype=dtype)[None, None]
        acc[s:e] += torch.sigmoid(model(x))[0, 0].double().numpy()
        hits[s:e] += 1
    return acc / hits


def predict_case(model: VesselSegmenter, intensity: np.ndarray, crop: int, threshold: float = 0.5) -> np.ndarray:
    probs = predict_probs(model, intensity, crop)
    return (probs > threshold).astype(np.uint8)


def mean_dice(model: VesselSegmenter, cases: list[Case], crop: int) -> float:
    return float(np.mean([dice(predict_case(model, c.intensity, crop), c.mask) for c in cases]))


def save_checkpoint(
    path: str | Path,
    state: TrainState,
    cfg: TrainConfig,
    flags: AblationFlags,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    model = state.model
    save_tensors(path / "weights.wts", dict(model.state_dict()))
    moments = {}
    for name, prm in model.trainable_named_parameters():
        st = state.optimizer.state.get(prm)
        if st:
            moments[f"exp_avg.{name}"] = st["exp_avg"]
            moments[f"exp_avg_sq.{name}"] = st["exp_avg_sq"]
    save_tensors(path / "optim.wts", moments)
    meta = {
        "model": model.cfg.to_dict(),
        "flags": flags.to_dict(),
        "train": cfg.to_dict(),
        "step": state.step,
        "seed": cfg.seed,
        "frozen_params": model.frozen_count(),
        "trainable_params": model.trainable_count(),
        "backbone_checksum": model.backbone.checksum(),
    }
    (path / "state.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> tuple[VesselSegmenter, TrainConfig, AblationFlags]:
    path = Path(path)
    meta_path = path / "state.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    meta = json.loads(meta_path.read_text())
    flags = AblationFlags(**meta["flags"])
    cfg = TrainConfig.from_dict(meta["train"])
    model = VesselSegmenter(ModelConfig.from_dict(meta["model"]), flags)
    tensors = load_tensors(path / "weights.wts")
    model.load_state_dict(tensors)
    model.backbone.freeze()
    return model, cfg, flags


@dataclass
class FitResult:
    model: VesselSegmenter
    checkpoint: Path
    log_path: Path
    history: list[dict] = field(default_factory=list)


def fit(
    manifest: str | Path,
    cfg: TrainConfig,
    flags: AblationFlags = AblationFlags(),
    out_dir: str | Path = "run",
    model_cfg: ModelConfig = ModelConfig(),
    val_manifest: str | Path | None = None,
) -> FitResult:
    """Train on a phantom manifest; writes checkpoints and a JSON-lines metrics log under ``out_dir``."""
    cases = load_cases(manifest, cfg.resize_hw)
    if not cases:
        raise ValueError(f"{manifest}: empty dataset")
    val_cases = load_cases(val_manifest, cfg.resize_hw) if val_manifest else []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    model = VesselSegmenter(replace(model_cfg, seed=cfg.seed), flags)
    log.info(
        "trainable params %d, frozen params %d, flags %s",
        model.trainable_count(), model.frozen_count(), flags,
    )
    state = new_state(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    log_path = out_dir / "metrics.jsonl"
    history = []
    with open(log_path, "w") as fh:
        for step in range(1, cfg.steps + 1):
            batch = sample_batch(cases, cfg, rng)
            state, loss = train_step(state, batch, cfg)
            rec = {"step": step, "loss": loss, "val_dice": None, "seed": cfg.seed}
            if step % cfg.eval_every == 0 or step == cfg.steps:
                rec["train_dice"] = mean_dice(model, cases, cfg.crop_depth)
                if val_cases:
                    rec["val_dice"] = mean_dice(model, val_cases, cfg.crop_depth)
                log.info("step %d loss %.4f train_dice %.4f val_dice %s",
                         step, loss, rec["train_dice"], rec["val_dice"])
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            history.append(rec)
            if step % cfg.checkpoint_every == 0 and step != cfg.steps:
                save_checkpoint(out_dir / "checkpoints" / f"step_{step:06d}", state, cfg, flags)
    ckpt = save_checkpoint(out_dir / "checkpoint", state, cfg, flags)
    return FitResult(model, ckpt, log_path, history)
