"""
Binary checkpoint container.

Layout (all integers u32 little endian):

    b"MSKA1" | version | len(config) | config (canonical JSON, UTF-8)
    | tensor count | per tensor: len(name) | name | rank | dims... | float32 LE data
    | sha256 of every preceding byte (32 raw bytes)

Model parameters and buffers, Adam moments and step counters are all stored
as named float32 tensors, so `load(save(x))` is bit-exact.
"""
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch
from torch import nn

from latentwave.config import canonical_json
from latentwave.errors import CheckpointError, ConfigError, MissingDependencyError

logger = logging.getLogger("latentwave.checkpoint")

MAGIC = b"MSKA1"
VERSION = 1
_DIGEST_SIZE = hashlib.sha256().digest_size

Pathlike = Union[str, Path]


@dataclass
class Checkpoint:
    config: dict
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION
    digest: Optional[str] = None

    def tensor(self, name: str) -> torch.Tensor:
        if name not in self.tensors:
            raise CheckpointError(f"Checkpoint has no tensor {name!r}")
        return torch.from_numpy(self.tensors[name].copy())

    def subset(self, prefix: str) -> Dict[str, torch.Tensor]:
        return {k[len(prefix):]: self.tensor(k) for k in self.tensors if k.startswith(prefix)}

    def require_hash(self, key: str, expected: str, what: str):
        """Refuse to continue from an artifact built with a different config."""
        found = self.config.get(key)
        if found != expected:
            raise ConfigError(
                f"{what} was built with {key}={str(found)[:12]}, current config has {expected[:12]}"
            )


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, _u32(ckpt.version)]
    blob = canonical_json(ckpt.config).encode("utf-8")
    parts += [_u32(len(blob)), blob, _u32(len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(arr.ndim)]
        parts += [_u32(d) for d in arr.shape]
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("Truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + _DIGEST_SIZE or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("Not a checkpoint (bad magic)")
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("Checkpoint content hash mismatch")

    reader = _Reader(body)
    reader.take(len(MAGIC))
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    try:
        config = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt config blob: {e}") from e

    tensors = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if reader.pos != len(body):
        raise CheckpointError("Trailing bytes after tensor table")
    return Checkpoint(config, tensors, version, digest.hex())


def save(path: Pathlike, ckpt: Checkpoint) -> str:
    """Write atomically; returns the content hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(ckpt)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    ckpt.digest = data[-_DIGEST_SIZE:].hex()
    logger.info(f"Saved checkpoint {path} ({len(ckpt.tensors)} tensors, {len(data)} bytes)")
    return ckpt.digest


def load(path: Pathlike, stage: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingDependencyError(path, stage)
    with open(path, "rb") as f:
        return decode(f.read())


def module_tensors(prefix: str, module: nn.Module) -> Dict[str, np.ndarray]:
    return {f"{prefix}{k}": v.detach().cpu().to(torch.float32).numpy() for k, v in module.state_dict().items()}


def load_module(module: nn.Module, ckpt: Checkpoint, prefix: str):
    state = ckpt.subset(prefix)
    expected = set(module.state_dict())
    if set(state) != expected:
        missing = sorted(expected - set(state))[:3]
        raise CheckpointError(f"Checkpoint tensors under {prefix!r} do not match the model (missing {missing})")
    module.load_state_dict(state)


def optimizer_tensors(prefix: str, optimizer: torch.optim.Optimizer) -> Dict[str, np.ndarray]:
    """Adam moments and step counters, keyed by parameter index."""
    out = {}
    params = [p for group in optimizer.param_groups for p in group["params"]]
    for i, p in enumerate(params):
        state = optimizer.state.get(p)
        if not state:
            continue
        out[f"{prefix}{i}.exp_avg"] = state["exp_avg"].detach().cpu().numpy()
        out[f"{prefix}{i}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
        out[f"{prefix}{i}.step"] = np.array([float(state["step"])], dtype=np.float32)
    return out


def load_optimizer(optimizer: torch.optim.Optimizer, ckpt: Checkpoint, prefix: str):
    params = [p for group in optimizer.param_groups for p in group["params"]]
    for i, p in enumerate(params):
        key = f"{prefix}{i}"
        if f"{key}.step" not in ckpt.tensors:
            continue
        exp_avg = ckpt.tensor(f"{key}.exp_avg")
        if exp_avg.shape != p.shape:
            raise CheckpointError(f"Optimizer state {key} has shape {tuple(exp_avg.shape)}, parameter {tuple(p.shape)}")
        optimizer.state[p] = {
            "step": ckpt.tensor(f"{key}.step").reshape(()),
            "exp_avg": exp_avg,
            "exp_avg_sq": ckpt.tensor(f"{key}.exp_avg_sq"),
        }
