"""Named-tensor weight file: one JSON header line, then little-endian f32 payload.

Header: {"format": "vesselseg-weights", "dtype": "f32", "byte_order": "little",
"tensors": [{"name": ..., "shape": [...]}, ...]}. Tensors are stored in
header order, each row-major.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

_DT = np.dtype("<f4")


def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor]) -> None:
    names = sorted(tensors)
    header = {
        "format": "vesselseg-weights",
        "dtype": "f32",
        "byte_order": "little",
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for n in names:
            arr = tensors[n].detach().cpu().numpy().astype(_DT, copy=False)
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_tensors(path: str | Path) -> dict[str, torch.Tensor]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weight file not found: {path}")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl])
        entries = header["tensors"]
    except (ValueError, KeyError) as exc:
        raise ValueError(f"{path}: malformed header ({exc})") from exc
    if header.get("dtype") != "f32" or header.get("byte_order") != "little":
        raise ValueError(f"{path}: unsupported dtype/byte order")
    payload = memoryview(raw)[nl + 1:]
    need = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in entries) * _DT.itemsize
    if need != len(payload):
        raise ValueError(f"{path}: payload has {len(payload)} bytes, header implies {need}")
    out, offset = {}, 0
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=_DT, count=n, offset=offset).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.copy())
        offset += n * _DT.itemsize
    return out
