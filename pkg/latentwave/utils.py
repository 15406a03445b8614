import hashlib
import logging
import sys
from pathlib import Path
from typing import Dict, Iterable, Optional

import coloredlogs
import numpy as np
import torch

from latentwave import settings
from latentwave.errors import NumericalError

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logging(level: Optional[str] = None):
    """Configure root logging once for CLI runs."""
    level = (level or settings.LOG_LEVEL).upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)
    coloredlogs.install(level=level, fmt=LOG_FORMAT, stream=sys.stderr)


def configure_torch(deterministic: bool = False, num_threads: Optional[int] = None):
    """Apply thread count and determinism switches before any model runs."""
    threads = num_threads if num_threads is not None else settings.NUM_THREADS
    if deterministic:
        threads = 1
    if threads and threads > 0:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(deterministic)


def check_finite(tensor: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NumericalError(f"Non-finite values in {name}")
    return tensor


def tensor_hash(tensors: Dict[str, torch.Tensor]) -> str:
    """sha256 over name-sorted tensors (float32, little endian)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode("utf-8"))
        data = tensors[name].detach().cpu().to(torch.float32).contiguous().numpy()
        h.update(data.astype("<f4", copy=False).tobytes())
    return h.hexdigest()


def module_hash(*modules: torch.nn.Module) -> str:
    """Parameter/buffer hash of one or more modules. Used for frozen-weight contracts."""
    state = {}
    for i, module in enumerate(modules):
        for k, v in module.state_dict().items():
            state[f"{i}.{k}"] = v
    return tensor_hash(state)


def array_hash(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return h.hexdigest()


def freeze(*modules: torch.nn.Module):
    for module in modules:
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)


def write_loss_rows(path, rows: Iterable[tuple], append: bool = True):
    """Append `step,loss_name,value` rows to a CSV loss curve."""
    mode = "a" if append else "w"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode, encoding="utf-8") as f:
        if f.tell() == 0:
            f.write("step,loss_name,value\n")
        for step, name, value in rows:
            f.write(f"{step},{name},{float(value):.8g}\n")


class LossHistory:
    """In-memory loss curves that are flushed to a `step,loss_name,value` CSV."""

    def __init__(self, path=None):
        self.path = path
        self.curves: Dict[str, list] = {}
        self._pending = []

    def add(self, step: int, **values):
        for name, value in values.items():
            value = float(value)
            self.curves.setdefault(name, []).append((step, value))
            self._pending.append((step, name, value))

    def values(self, name: str) -> list:
        return [v for _, v in self.curves.get(name, [])]

    def last(self, name: str) -> float:
        return self.curves[name][-1][1]

    def flush(self):
        if self.path is not None and self._pending:
            write_loss_rows(self.path, self._pending)
        self._pending = []


class CollapseDetector:
    """Aborts training once |D(real) - D(fake)| stays above `gap` for `patience` consecutive steps."""

    def __init__(self, gap: float = settings.COLLAPSE_GAP, patience: int = settings.COLLAPSE_STEPS):
        self.gap = gap
        self.patience = patience
        self.count = 0

    def update(self, d_real: float, d_fake: float):
        if abs(d_real - d_fake) > self.gap:
            self.count += 1
        else:
            self.count = 0
        if self.count >= self.patience:
            raise NumericalError(
                f"Discriminator collapse: |D(real) - D(fake)| > {self.gap} for {self.count} consecutive steps"
            )


def step_seed(seed: int, step: int) -> int:
    """Per-step seed for data sampling; stable across resumes."""
    return seed * 1_000_003 + step
