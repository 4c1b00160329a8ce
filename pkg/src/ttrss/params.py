"""Named parameter store, binary checkpoints, and the training-protocol helpers
(plateau halving, early stopping)."""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np
import torch

CHECKPOINT_MAGIC = b"TTRC"
CHECKPOINT_VERSION = 1
DTYPE = torch.float64


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered named tensors with gradient slots and per-name frozen flags.

    Frozen tensors still take part in the forward graph (gradients flow
    through them to upstream inputs) but never receive gradients or updates.
    """

    def __init__(self):
        self._params: OrderedDict[str, torch.Tensor] = OrderedDict()
        self._frozen: set[str] = set()

    def add(self, name: str, value) -> torch.Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = torch.as_tensor(value, dtype=DTYPE).clone().requires_grad_(True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._params.items()}

    def numel(self) -> int:
        return sum(v.numel() for v in self._params.values())

    def freeze(self, prefix: str = "") -> None:
        for name, t in self._params.items():
            if name.startswith(prefix):
                self._frozen.add(name)
                t.requires_grad_(False)
                t.grad = None

    def unfreeze(self, prefix: str = "") -> None:
        for name, t in self._params.items():
            if name.startswith(prefix):
                self._frozen.discard(name)
                t.requires_grad_(True)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable(self) -> list[torch.Tensor]:
        return [t for name, t in self._params.items() if name not in self._frozen]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, Optional[torch.Tensor]]:
        return {k: v.grad for k, v in self._params.items()}

    def state(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict((k, v.detach().clone()) for k, v in self._params.items())

    def load_state(self, state) -> None:
        for name, value in state.items():
            if name not in self._params:
                raise CheckpointError(f"unexpected parameter {name!r}")
            if tuple(value.shape) != tuple(self._params[name].shape):
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(value.shape)} vs model {tuple(self._params[name].shape)}"
                )
        missing = set(self._params) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
        with torch.no_grad():
            for name, value in state.items():
                self._params[name].copy_(torch.as_tensor(value, dtype=DTYPE))

    def flat(self) -> torch.Tensor:
        return torch.cat([v.detach().reshape(-1) for v in self._params.values()])


def encode_checkpoint(store: ParamStore, module: str, extra: Optional[dict] = None) -> bytes:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "module": module,
        "tensors": [[name, list(t.shape)] for name, t in store.items()],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    values = b"".join(t.detach().to(torch.float64).numpy().astype("<f8").tobytes(order="C") for _, t in store.items())
    return CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + values


def save_checkpoint(path, store: ParamStore, module: str, extra: Optional[dict] = None) -> None:
    Path(path).write_bytes(encode_checkpoint(store, module, extra))


def read_checkpoint(path) -> tuple[dict, "OrderedDict[str, torch.Tensor]"]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + n])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    values = np.frombuffer(blob[8 + n:], dtype="<f8")
    state = OrderedDict()
    pos = 0
    for name, shape in header["tensors"]:
        size = int(np.prod(shape)) if shape else 1
        if pos + size > values.size:
            raise CheckpointError(f"{path}: truncated tensor data at {name!r}")
        state[name] = torch.from_numpy(values[pos:pos + size].reshape(shape).copy())
        pos += size
    if pos != values.size:
        raise CheckpointError(f"{path}: {values.size - pos} trailing values")
    return header, state


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class PlateauHalver:
    """Halve the learning rate once validation loss has not improved for
    ``patience`` consecutive epochs; the counter restarts after each halving."""

    def __init__(self, optimizer: torch.optim.Optimizer, patience: int, factor: float = 0.5):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.bad_epochs = 0
            return True
        return False


class EarlyStopping:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def step(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; True if it is a new best."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def clip_grad_norm(params: Iterable[torch.Tensor], max_norm: Optional[float]) -> None:
    if max_norm:
        torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], max_norm)
