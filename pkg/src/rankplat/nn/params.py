"""Named trainable parameters, Adam, initializers and RKF1 checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = b"RKF1"


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}; step rejected")
        self.name = name


@dataclass
class _Slot:
    tensor: Tensor
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    trainable: bool = True


class ParameterStore:
    """Maps parameter names to (value, gradient, Adam moments, step)."""

    def __init__(self):
        self._slots: dict[str, _Slot] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._slots:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        t = Tensor(arr, requires_grad=trainable)
        self._slots[name] = _Slot(t, np.zeros_like(arr), np.zeros_like(arr), 0, trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._slots[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __len__(self) -> int:
        return len(self._slots)

    def names(self) -> list[str]:
        return list(self._slots)

    def items(self):
        return ((n, s.tensor) for n, s in self._slots.items())

    def trainable(self) -> list[Tensor]:
        return [s.tensor for s in self._slots.values() if s.trainable]

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for name, slot in self._slots.items():
            if name.startswith(prefix):
                slot.trainable = flag
                slot.tensor.requires_grad = flag

    def is_trainable(self, name: str) -> bool:
        return self._slots[name].trainable

    def moments(self, name: str) -> tuple[np.ndarray, np.ndarray, int]:
        s = self._slots[name]
        return s.m, s.v, s.step

    def zero_grad(self) -> None:
        for s in self._slots.values():
            s.tensor.grad = None

    def num_values(self) -> int:
        return sum(s.tensor.size for s in self._slots.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: s.tensor.data.copy() for n, s in self._slots.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, arr in state.items():
            if name not in self._slots:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            slot = self._slots[name]
            if slot.tensor.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {slot.tensor.shape}")
            slot.tensor.data = np.array(arr, dtype=np.float64)
        if strict:
            missing = set(self._slots) - set(state)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)}")

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path, strict: bool = True) -> None:
        self.load_state_dict(load_checkpoint(path), strict=strict)


def adam_step(store: ParameterStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam on every trainable parameter that received a gradient."""
    live = [(n, s) for n, s in store._slots.items() if s.trainable and s.tensor.grad is not None]
    for name, s in live:
        if not np.all(np.isfinite(s.tensor.grad)):
            raise NonFiniteGradientError(name)
    for _, s in live:
        g = s.tensor.grad
        s.step += 1
        s.m *= beta1
        s.m += (1.0 - beta1) * g
        s.v *= beta2
        s.v += (1.0 - beta2) * g * g
        m_hat = s.m / (1.0 - beta1 ** s.step)
        v_hat = s.v / (1.0 - beta2 ** s.step)
        s.tensor.data = s.tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        s.tensor.grad = None


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) redrawn outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an RKF1 checkpoint")
    out: dict[str, np.ndarray] = {}
    pos = 4
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        out[name] = arr.astype(np.float64)
    return out
