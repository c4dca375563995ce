"""Synthetic vessel-tree phantoms: Bezier centerlines, tube rasterization, intensity model."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .volume_io import Mask, Volume, save_volume

OOD_SEED_OFFSET = 1_000_003


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 0.5, 0.5)
    branches: int = 3
    r_min: float = 1.0
    r_max: float = 2.5
    contrast: float = 0.6
    background: float = 0.2
    noise: float = 0.03
    gamma: float = 1.0
    bias: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        problems = []
        if len(self.dims) != 3 or min(self.dims) < 1:
            problems.append(f"dims {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            problems.append(f"spacing {self.spacing}")
        if self.branches < 1:
            problems.append("branches must be >= 1")
        if not 0.5 <= self.r_min <= self.r_max:
            problems.append("need 0.5 <= r_min <= r_max")
        if len(self.dims) == 3 and self.r_max >= min(self.dims[1:]) / 4:
            problems.append("r_max must be < min(H, W) / 4")
        if not 0 < self.contrast <= 1:
            problems.append("contrast must be in (0, 1]")
        if not 0 <= self.background < 1:
            problems.append("background must be in [0, 1)")
        if self.background + self.contrast > 1.2:
            problems.append("background + contrast must be <= 1.2")
        if self.noise < 0 or self.gamma <= 0 or self.bias < 0:
            problems.append("noise >= 0, gamma > 0, bias >= 0 required")
        if problems:
            raise ValueError("invalid PhantomSpec: " + "; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"], d["spacing"] = list(self.dims), list(self.spacing)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Centerline:
    points: np.ndarray  # (n, 3) continuous (z, y, x) voxel coordinates
    radii: np.ndarray  # (n,)

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "radii": self.radii.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Centerline":
        return cls(np.asarray(d["points"], dtype=float).reshape(-1, 3), np.asarray(d["radii"], dtype=float))


def bezier(p0, p1, p2, t: np.ndarray) -> np.ndarray:
    t = t[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _sample_curve(p0, p1, p2, max_gap: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    # control-polygon length bounds the arc length
    n = int(np.ceil((np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p1)) / max_gap)) + 2
    while True:
        t = np.linspace(0.0, 1.0, n)
        pts = bezier(p0, p1, p2, t)
        if np.linalg.norm(np.diff(pts, axis=0), axis=1).max(initial=0.0) <= max_gap:
            return t, pts
        n *= 2


def _clip(t, pts, dims) -> int:
    """Length of the leading run of points inside the volume."""
    upper = np.asarray(dims, dtype=float) - 1
    inside = np.all((pts >= 0) & (pts <= upper), axis=1)
    if not inside[0]:
        return 0
    return len(inside) if inside.all() else int(np.argmin(inside))


def _unit(v):
    return v / np.linalg.norm(v)


def _face_point(rng, dims, axis, side):
    p = np.array([rng.uniform(0.25, 0.75) * (d - 1) for d in dims])
    p[axis] = 0.0 if side == 0 else dims[axis] - 1.0
    return p


def generate_tree(spec: PhantomSpec) -> list[Centerline]:
    """Trunk crossing the volume between opposite faces plus ``branches - 1`` children."""
    rng = np.random.default_rng(spec.seed)
    dims = np.asarray(spec.dims, dtype=float)
    axis = int(rng.integers(0, 3))
    side = int(rng.integers(0, 2))
    p0 = _face_point(rng, spec.dims, axis, side)
    p2 = _face_point(rng, spec.dims, axis, 1 - side)
    p1 = np.array([rng.uniform(0.2, 0.8) * (d - 1) for d in spec.dims])
    t, pts = _sample_curve(p0, p1, p2)
    radii = spec.r_max + (spec.r_min - spec.r_max) * t
    lines = [Centerline(pts, radii)]
    extent = float(min(dims))
    for _ in range(spec.branches - 1):
        parent = lines[int(rng.integers(0, len(lines)))]
        n = len(parent.points)
        lo, hi = int(0.15 * (n - 1)), int(0.85 * (n - 1))
        idx = int(rng.integers(lo, max(lo, hi) + 1))
        start, r0 = parent.points[idx], parent.radii[idx]
        tangent = _unit(parent.points[min(idx + 1, n - 1)] - parent.points[max(idx - 1, 0)])
        # random direction at a fixed angle to the parent tangent
        helper = np.eye(3)[int(np.argmin(np.abs(tangent)))]
        e1 = _unit(np.cross(tangent, helper))
        e2 = np.cross(tangent, e1)
        angle = np.deg2rad(rng.uniform(20.0, 70.0))
        phi = rng.uniform(0.0, 2 * np.pi)
        direction = np.cos(angle) * tangent + np.sin(angle) * (np.cos(phi) * e1 + np.sin(phi) * e2)
        length = rng.uniform(0.4, 0.8) * extent
        bend = rng.normal(0.0, 0.15 * length, size=3)
        c1 = start + 0.5 * length * direction
        c2 = start + length * direction + bend
        tb, bpts = _sample_curve(start, c1, c2)
        keep = max(_clip(tb, bpts, spec.dims), 1)
        tb, bpts = tb[:keep], bpts[:keep]
        span = tb[-1] if tb[-1] > 0 else 1.0
        bradii = r0 + (spec.r_min - r0) * (tb / span)
        lines.append(Centerline(bpts, np.clip(bradii, spec.r_min, spec.r_max)))
    return lines


def rasterize(lines: list[Centerline], dims, spacing=(1.0, 1.0, 1.0)) -> Mask:
    """Voxel is foreground iff its centre is within r(p) of a centerline point p (voxel units)."""
    dims = tuple(int(d) for d in dims)
    out = np.zeros(dims, dtype=bool)
    for line in lines:
        for p, r in zip(line.points, line.radii):
            lo = np.maximum(np.floor(p - r).astype(int), 0)
            hi = np.minimum(np.ceil(p + r).astype(int), np.asarray(dims) - 1)
            if np.any(hi < lo):
                continue
            zz, yy, xx = np.ogrid[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
            d2 = (zz - p[0]) ** 2 + (yy - p[1]) ** 2 + (xx - p[2]) ** 2
            out[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] |= d2 <= r * r
    return Mask(out.astype(np.uint8), spacing)


def bias_field(dims, rng: np.random.Generator) -> np.ndarray:
    """Random quadratic polynomial in normalized [-1, 1] coordinates with |P| <= 1."""
    axes = [np.linspace(-1.0, 1.0, d) if d > 1 else np.zeros(1) for d in dims]
    z, y, x = np.meshgrid(*axes, indexing="ij")
    terms = [np.ones_like(z), z, y, x, z * z, y * y, x * x, z * y, z * x, y * x]
    coef = rng.uniform(-1.0, 1.0, size=len(terms))
    coef /= np.abs(coef).sum()
    return sum(c * t for c, t in zip(coef, terms))


def make_intensity(mask: Mask, spec: PhantomSpec, rng: np.random.Generator) -> Volume:
    """clamp01((b + c_v * mask + beta * P)^gamma + noise)."""
    if mask.dims != spec.dims:
        raise ValueError(f"mask dims {mask.dims} != spec dims {spec.dims}")
    field = bias_field(spec.dims, rng)
    base = spec.background + spec.contrast * mask.data.astype(np.float64) + spec.bias * field
    img = np.maximum(base, 0.0) ** spec.gamma
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return Volume(np.clip(img, 0.0, 1.0).astype(np.float32)[None], spec.spacing)


def make_case(spec: PhantomSpec) -> tuple[Volume, Mask, list[Centerline]]:
    lines = generate_tree(spec)
    mask = rasterize(lines, spec.dims, spec.spacing)
    vol = make_intensity(mask, spec, np.random.default_rng((spec.seed, 1)))
    return vol, mask, lines


def gen_dataset(spec: PhantomSpec, n: int, out_dir: str | Path) -> Path:
    """Write ``n`` (volume, mask, centerline) triples and ``manifest.json``; item i uses seed + i."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = []
    for i in range(n):
        vol, mask, lines = make_case(replace(spec, seed=spec.seed + i))
        stem = f"case_{i:03d}"
        save_volume(vol, out_dir / f"{stem}.vol")
        save_volume(mask, out_dir / f"{stem}.msk")
        (out_dir / f"{stem}.json").write_text(json.dumps([c.to_dict() for c in lines]))
        items.append({"volume": f"{stem}.vol", "mask": f"{stem}.msk", "centerline": f"{stem}.json"})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"spec": spec.to_dict(), "seed": spec.seed, "items": items}, indent=1))
    return manifest


def read_manifest(path: str | Path) -> tuple[dict, list[dict]]:
    """Manifest JSON and its items with paths resolved against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    if "items" not in doc:
        raise ValueError(f"{path}: manifest has no 'items'")
    items = [{k: str(path.parent / v) for k, v in it.items()} for it in doc["items"]]
    return doc, items


def load_centerlines(path: str | Path) -> list[Centerline]:
    return [Centerline.from_dict(d) for d in json.loads(Path(path).read_text())]


def make_ood_spec(spec: PhantomSpec) -> PhantomSpec:
    """Same geometry distribution, shifted imaging physics, fresh seed stream."""
    return replace(
        spec,
        gamma=spec.gamma * 1.5,
        noise=spec.noise * 2.0,
        bias=spec.bias + 0.15,
        contrast=spec.contrast * 0.7,
        seed=spec.seed + OOD_SEED_OFFSET,
    )
