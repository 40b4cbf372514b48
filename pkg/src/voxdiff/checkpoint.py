"""Denoiser checkpoint container.

Layout (little-endian)::

    b"VXCK" | u32 format version | u64 header length | header JSON (UTF-8)
    | tensor payloads, concatenated in header order | u32 CRC32 of all preceding bytes

The header records, per tensor, its name, shape, dtype and byte offset into the payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

from .diffusion import ChannelSchedules, Normalizer
from .nn import UNetConfig, build_model

MAGIC = b"VXCK"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint64": "<u8"}


class CheckpointError(ValueError):
    pass


@dataclass
class DenoiserCheckpoint:
    unet: UNetConfig
    params: Dict[str, np.ndarray]
    schedules: ChannelSchedules
    normalizer: Normalizer = field(default_factory=Normalizer)
    step: int = 0
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    def build(self) -> torch.nn.Module:
        model = build_model(self.unet)
        state = {k: torch.from_numpy(np.array(v)) for k, v in self.params.items()}
        model.load_state_dict(state, strict=True)
        return model

    @classmethod
    def from_model(cls, model: torch.nn.Module, schedules: ChannelSchedules, **kw) -> "DenoiserCheckpoint":
        params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.cfg, params, schedules, **kw)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o)}")


def save_checkpoint(ckpt: DenoiserCheckpoint, path) -> None:
    tensors = [("param/" + k, v) for k, v in ckpt.params.items()]
    tensors += [("optim/" + k, v) for k, v in ckpt.optimizer.items()]
    names = [n for n, _ in tensors]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")
    entries, blobs, offset = [], [], 0
    for name, arr in tensors:
        arr = np.asarray(arr)
        dt = str(arr.dtype)
        if dt not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dt} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "unet": ckpt.unet.to_json(),
        "schedules": ckpt.schedules.to_json(),
        "normalizer": ckpt.normalizer.to_json(),
        "step": int(ckpt.step),
        "dtype": ckpt.unet.dtype,
        "tensors": entries,
        "extra": ckpt.extra,
    }
    hbytes = json.dumps(header, sort_keys=True, default=_json_default).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> DenoiserCheckpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 20:
        raise CheckpointError(f"{path}: truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: CRC32 mismatch")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(blob[16:16 + hlen])
    base = 16 + hlen
    params, optim = {}, {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(body):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past the end of the file")
        arr = np.frombuffer(body, dtype=_DTYPES[e["dtype"]], count=int(np.prod(e["shape"], dtype=np.int64)), offset=start)
        arr = arr.reshape(e["shape"]).astype(e["dtype"])
        kind, name = e["name"].split("/", 1)
        (params if kind == "param" else optim)[name] = arr
    return DenoiserCheckpoint(
        unet=UNetConfig(**header["unet"]),
        params=params,
        schedules=ChannelSchedules.from_json(header["schedules"]),
        normalizer=Normalizer(**header["normalizer"]),
        step=header["step"],
        optimizer=optim,
        extra=header["extra"],
    )
