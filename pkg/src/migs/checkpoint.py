"""Versioned binary checkpoint archive.

Layout (all integers little-endian)::

    b"MIGSCKPT" | u32 format_version | u32 header_len | header (UTF-8 JSON)
    u32 tensor_count
    per tensor: u16 name_len | name | u8 ndim | u32 dims[ndim] | float32 payload

The header carries format_version, config_hash, outer_iteration and rng_state plus anything
the caller adds. Tensors whose dtype is not float32 are listed under header["dtypes"] and cast
back on load.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

MAGIC = b"MIGSCKPT"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)


class CheckpointVersionError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


def config_hash(config: Mapping) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def rng_state(rng: Optional[np.random.Generator]) -> Optional[dict]:
    return None if rng is None else rng.bit_generator.state


def restore_rng(state: Optional[dict]) -> Optional[np.random.Generator]:
    if state is None:
        return None
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def save_checkpoint(path: Path, tensors: Mapping[str, torch.Tensor], header: dict) -> None:
    path = Path(path)
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header.setdefault("config_hash", None)
    header.setdefault("outer_iteration", 0)
    header.setdefault("rng_state", None)
    header["dtypes"] = {k: str(v.dtype).replace("torch.", "") for k, v in tensors.items() if v.dtype != torch.float32}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        arr = t.to(torch.float32).numpy().astype("<f4", copy=False)
        key = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(key)) + key)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path: Path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    try:
        return _parse(data, path)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, (CheckpointVersionError, CheckpointFormatError)):
            raise
        raise CheckpointFormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc


def _parse(data: bytes, path) -> tuple[dict, dict[str, torch.Tensor]]:
    if data[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    version, head_len = struct.unpack_from("<II", data, 8)
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint format version {version}")
    pos = 16
    header = json.loads(data[pos : pos + head_len].decode("utf-8"))
    pos += head_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    dtypes = header.get("dtypes", {})
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
        t = torch.from_numpy(arr.copy())
        if name in dtypes:
            t = t.to(getattr(torch, dtypes[name]))
        tensors[name] = t
    if pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return header, tensors


def split_prefixed(tensors: Mapping[str, torch.Tensor], prefix: str):
    """Separate ``prefix``-named tensors (prefix stripped) from the rest."""
    inner = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    rest = {k: v for k, v in tensors.items() if not k.startswith(prefix)}
    return inner, rest


def flatten_optimizer_state(states: Mapping[str, dict]) -> dict[str, torch.Tensor]:
    """Optimizer state dicts (per group) -> named tensors ``optimizer.<group>.<param>.<field>``."""
    out = {}
    for group, sd in states.items():
        for idx, fields in sd["state"].items():
            for field, value in fields.items():
                t = value if torch.is_tensor(value) else torch.tensor(float(value))
                out[f"optimizer.{group}.{idx}.{field}"] = t
    return out


def unflatten_optimizer_state(tensors: Mapping[str, torch.Tensor], template: Mapping[str, dict]) -> dict:
    """Inverse of :func:`flatten_optimizer_state` using fresh optimizers' state dicts as templates."""
    out = {}
    for group, sd in template.items():
        state: dict = {}
        prefix = f"optimizer.{group}."
        for name, t in tensors.items():
            if not name.startswith(prefix):
                continue
            idx, field = name[len(prefix):].split(".", 1)
            state.setdefault(int(idx), {})[field] = t.clone()
        out[group] = {"state": state, "param_groups": sd["param_groups"]}
    return out
