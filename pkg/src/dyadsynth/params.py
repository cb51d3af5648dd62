"""Trainable parameter collections, the Adam optimizer, and checkpointing.

Checkpoint layout: magic ``CKPT``, version u16, manifest length u64, a JSON
manifest (per-parameter name/shape/dtype/byte-offset plus the store seed,
a step counter, and optional metadata), then one raw little-endian float
payload. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, IoError
from .tensor import Tensor

_MAGIC = b"CKPT"
_VERSION = 1


class ParameterStore:
    """Ordered, uniquely named collection of trainable tensors."""

    def __init__(self, rng_seed: int):
        self.rng_seed = int(rng_seed)
        self.entries: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.entries:
            raise ContractError(f"parameter name already registered: {name}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def named(self):
        return self.entries.items()

    def zero_grads(self):
        for t in self.entries.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.size for t in self.entries.values())

    def clone_values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.entries.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        for k, t in self.entries.items():
            if k not in values:
                raise ContractError(f"missing value for parameter {k}")
            v = np.asarray(values[k], dtype=t.data.dtype)
            if v.shape != t.shape:
                raise ContractError(f"value shape {v.shape} does not match parameter {k} {t.shape}")
            t.data = v.copy()


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParameterStore, state: AdamState, lr: float):
    """One bias-corrected Adam update over every parameter in the store.

    Gradients must be populated; they are left untouched (caller resets).
    """
    for name, p in store.named():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in store.named():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def noam_lr(step: int, base_lr: float, warmup: int, model_dim: int) -> float:
    """Inverse-sqrt schedule with linear warmup.

    base_lr * model_dim**-0.5 * min(step**-0.5, step * warmup**-1.5).
    """
    if step < 1:
        raise ContractError(f"noam_lr: step must be >= 1, got {step}")
    return base_lr * model_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def save_checkpoint(store: ParameterStore, path, step: int = 0, meta: dict | None = None):
    """Write the store to `path`; see module docstring for the layout."""
    params = []
    offset = 0
    blobs = []
    for name, t in store.named():
        arr = np.ascontiguousarray(t.data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        params.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "seed": store.rng_seed,
        "step": int(step),
        "params": params,
        "meta": meta or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<H", _VERSION))
            f.write(struct.pack("<Q", len(mbytes)))
            f.write(mbytes)
            for blob in blobs:
                f.write(blob)
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int, int, dict]:
    """Read a checkpoint; returns (values, seed, step, meta)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 14 or raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic at byte 0)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<Q", raw, 6)
    header_end = 14 + mlen
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated manifest (need {header_end} bytes, have {len(raw)})")
    try:
        manifest = json.loads(raw[14:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: malformed manifest at byte 14: {e}") from e
    values: dict[str, np.ndarray] = {}
    for rec in manifest["params"]:
        lo = header_end + rec["offset"]
        hi = lo + rec["nbytes"]
        if hi > len(raw):
            raise FormatError(f"{path}: truncated payload for {rec['name']} at byte {lo}")
        dt = np.dtype(rec["dtype"]).newbyteorder("<")
        arr = np.frombuffer(raw[lo:hi], dtype=dt).reshape(rec["shape"])
        values[rec["name"]] = arr.astype(np.dtype(rec["dtype"]))
    return values, manifest["seed"], manifest["step"], manifest.get("meta", {})


def restore_store(store: ParameterStore, path) -> tuple[int, dict]:
    """Load checkpoint values into an already-constructed store."""
    values, seed, step, meta = load_checkpoint(path)
    store.rng_seed = seed
    store.load_values(values)
    return step, meta
