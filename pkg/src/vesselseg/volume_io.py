"""Volumes, masks, their on-disk format, and the preprocessing / augmentation ops.

File layout (``.vol`` for f32 volumes, ``.msk`` for u8 masks): one JSON header
line terminated by ``\\n``, then the raw little-endian payload in (c, d, h, w)
row-major order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import numerics as nx

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be three finite positive values, got {spacing}")
    return spacing


@dataclass
class Volume:
    data: np.ndarray  # (C, D, H, W)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be (C, D, H, W) with positive extents, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume data contains NaN or Inf")
        self.spacing = _check_spacing(self.spacing)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


@dataclass
class Mask:
    data: np.ndarray  # (D, H, W) of {0, 1}
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask data must be (D, H, W), got {data.shape}")
        if data.size and not np.isin(data, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        self.data = data.astype(np.uint8)
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    channels: int
    spacing: tuple[float, float, float]
    dtype: str = "f32"
    byte_order: str = "little"

    def payload_bytes(self) -> int:
        return int(np.prod(self.dims)) * self.channels * _DTYPES[self.dtype].itemsize

    def to_json(self) -> str:
        return json.dumps(
            {
                "dims": list(self.dims),
                "channels": self.channels,
                "spacing": list(self.spacing),
                "dtype": self.dtype,
                "byte_order": self.byte_order,
            },
            sort_keys=True,
        )


def save_volume(v: Volume | Mask, path: str | Path) -> None:
    """Write a Volume (f32) or Mask (u8) as header line + payload."""
    path = Path(path)
    if isinstance(v, Mask):
        header = VolumeHeader(v.dims, 1, v.spacing, "u8")
        payload = np.ascontiguousarray(v.data, dtype=_DTYPES["u8"])
    else:
        if not np.isfinite(v.data).all():
            raise ValueError(f"refusing to save non-finite volume to {path}")
        header = VolumeHeader(v.dims, v.channels, v.spacing, "f32")
        payload = np.ascontiguousarray(v.data, dtype=_DTYPES["f32"])
    try:
        with open(path, "wb") as fh:
            fh.write(header.to_json().encode() + b"\n")
            fh.write(payload.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write volume file {path}: {exc}") from exc


def read_header(raw: bytes, path) -> tuple[VolumeHeader, memoryview]:
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing header line")
    try:
        h = json.loads(raw[:nl])
        header = VolumeHeader(
            tuple(int(x) for x in h["dims"]),
            int(h["channels"]),
            _check_spacing(h["spacing"]),
            h["dtype"],
            h.get("byte_order", "little"),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed header ({exc})") from exc
    if header.dtype not in _DTYPES or header.byte_order != "little" or len(header.dims) != 3:
        raise ValueError(f"{path}: unsupported header {h}")
    return header, memoryview(raw)[nl + 1:]


def load_volume(path: str | Path) -> Volume | Mask:
    """Read a ``.vol``/``.msk`` file; u8 payloads come back as a :class:`Mask`."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read volume file {path}: {exc}") from exc
    header, payload = read_header(raw, path)
    if len(payload) != header.payload_bytes():
        raise ValueError(
            f"{path}: payload length mismatch ({len(payload)} bytes, header implies {header.payload_bytes()})"
        )
    arr = np.frombuffer(payload, dtype=_DTYPES[header.dtype]).reshape(header.channels, *header.dims)
    if header.dtype == "u8":
        if header.channels != 1:
            raise ValueError(f"{path}: mask files must have one channel")
        return Mask(arr[0].copy(), header.spacing)
    if not np.isfinite(arr).all():
        raise ValueError(f"{path}: payload contains NaN or Inf")
    return Volume(arr.astype(np.float32), header.spacing)


def load_mask(path: str | Path) -> Mask:
    m = load_volume(path)
    if not isinstance(m, Mask):
        raise ValueError(f"{path}: expected a u8 mask file")
    return m


def normalize_intensity(v: Volume) -> Volume:
    """Per-volume min-max scaling into [0, 1]; a constant volume maps to zeros."""
    if v.channels != 1:
        raise ValueError(f"normalize_intensity expects one channel, got {v.channels}")
    x = v.data.astype(np.float64)
    lo, hi = x.min(), x.max()
    out = np.zeros_like(x) if hi <= lo else (x - lo) / (hi - lo)
    return Volume(out.astype(v.data.dtype), v.spacing)


def crop_depth(v: Volume, m: Mask | None, start: int, length: int) -> tuple[Volume, Mask | None]:
    depth = v.dims[0]
    if length < 1 or start < 0 or start + length > depth:
        raise ValueError(f"crop [{start}, {start + length}) outside depth {depth}")
    if m is not None and m.dims != v.dims:
        raise ValueError(f"mask dims {m.dims} != volume dims {v.dims}")
    vc = Volume(v.data[:, start:start + length].copy(), v.spacing)
    mc = None if m is None else Mask(m.data[start:start + length].copy(), m.spacing)
    return vc, mc


def resize_spatial(v: Volume, height: int, width: int) -> Volume:
    """Align-corners linear resize of H and W; depth is untouched."""
    if height < 1 or width < 1:
        raise ValueError(f"target size must be positive, got {(height, width)}")
    t = torch.from_numpy(np.ascontiguousarray(v.data, dtype=np.float64))[None]
    out = nx.upsample_trilinear(t, (v.dims[0], height, width))[0].numpy()
    return Volume(out.astype(v.data.dtype), v.spacing)


def resize_mask(m: Mask, height: int, width: int) -> Mask:
    """Nearest-neighbour resize of H and W on the align-corners grid."""

    def index(n_out, n_in):
        if n_out == 1:
            return np.zeros(1, dtype=int)
        return np.rint(np.arange(n_out) * (n_in - 1) / (n_out - 1)).astype(int)

    d, h, w = m.dims
    return Mask(m.data[:, index(height, h)][:, :, index(width, w)], m.spacing)


def augment(v: Volume, m: Mask, rng: np.random.Generator, p: float = 0.5) -> tuple[Volume, Mask]:
    """Random in-plane rot90 / flips / isotropic scale / intensity shift, each gated with prob ``p``.

    All random draws happen in a fixed order regardless of which gates fire,
    so a given generator state always yields the same transform.
    """
    if v.dims != m.dims:
        raise ValueError(f"volume dims {v.dims} != mask dims {m.dims}")
    u = rng.random(5)
    k = int(rng.integers(1, 4))
    scale = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-0.1, 0.1)
    x, y = v.data, m.data
    h, w = v.dims[1:]
    if u[0] < p:
        if h != w and k % 2:
            k = 2
        x, y = np.rot90(x, k, axes=(2, 3)), np.rot90(y, k, axes=(1, 2))
    if u[1] < p:
        x, y = x[:, :, ::-1], y[:, ::-1]
    if u[2] < p:
        x, y = x[:, :, :, ::-1], y[:, :, ::-1]
    x, y = np.ascontiguousarray(x), np.ascontiguousarray(y)
    if u[3] < p:
        centre = np.array([0.0, (h - 1) / 2.0, (w - 1) / 2.0])
        matrix = np.diag([1.0, 1.0 / scale, 1.0 / scale])
        offset = centre - matrix @ centre
        x = np.stack([
            ndimage.affine_transform(c, matrix, offset, order=1, mode="nearest") for c in x
        ]).astype(v.data.dtype)
        y = ndimage.affine_transform(y, matrix, offset, order=0, mode="constant", cval=0)
    if u[4] < p:
        x = np.clip(x + shift, 0.0, 1.0).astype(v.data.dtype)
    return Volume(x, v.spacing), Mask(y, m.spacing)
