"""Fully-connected stacks and the binary checkpoint format."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import check_header
from .optim import SeededRng

ACTIVATIONS = {0: "identity", 1: "swish", 2: "tanh", 3: "sigmoid"}
ACT_IDS = {v: k for k, v in ACTIVATIONS.items()}

CHECKPOINT_MAGIC = b"DIVC"
CHECKPOINT_VERSION = 1


def _activate(name: str, x: T.Tensor) -> T.Tensor:
    if name == "identity":
        return x
    return T.forward_op(name, x)


class MLP:
    """Stack of affine layers; ``acts[i]`` is applied after layer ``i``."""

    def __init__(self, sizes: list[int], acts: list[str], rng: SeededRng | None = None):
        if len(acts) != len(sizes) - 1:
            raise ValueError(f"{len(sizes) - 1} layers need {len(sizes) - 1} activations, got {len(acts)}")
        unknown = set(acts) - set(ACT_IDS)
        if unknown:
            raise ValueError(f"unknown activations {sorted(unknown)}")
        self.sizes = list(sizes)
        self.acts = list(acts)
        self.weights: list[T.Tensor] = []
        self.biases: list[T.Tensor] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = rng.normal((fan_in, fan_out), scale=1.0 / np.sqrt(fan_in)) if rng else np.zeros((fan_in, fan_out))
            self.weights.append(T.Tensor(w, requires_grad=True))
            self.biases.append(T.Tensor(np.zeros(fan_out), requires_grad=True))

    @property
    def params(self) -> list[T.Tensor]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def freeze(self) -> "MLP":
        for p in self.params:
            p.requires_grad = False
            p.grad = None
        return self

    def __call__(self, x) -> T.Tensor:
        h = T.as_tensor(x)
        for w, b, act in zip(self.weights, self.biases, self.acts):
            h = _activate(act, T.affine(h, w, b))
        return h


class Model:
    """Named MLP stacks plus free-form metadata; base of VAE/Classifier/Oracle."""

    kind = "model"

    def __init__(self, stacks: dict[str, MLP], meta: dict | None = None):
        self.stacks = stacks
        self.meta = dict(meta or {})

    @property
    def params(self) -> list[T.Tensor]:
        return [p for name in sorted(self.stacks) for p in self.stacks[name].params]

    def freeze(self):
        for s in self.stacks.values():
            s.freeze()
        return self

    def round_to_f32(self):
        for p in self.params:
            p.data[...] = p.data.astype(np.float32)
        return self

    def to_bytes(self) -> bytes:
        out = bytearray(CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION))
        kind = self.kind.encode()
        out += struct.pack("<B", len(kind)) + kind
        meta = json.dumps(self.meta, sort_keys=True).encode()
        out += struct.pack("<I", len(meta)) + meta
        out += struct.pack("<H", len(self.stacks))
        for name in sorted(self.stacks):
            mlp = self.stacks[name]
            nb = name.encode()
            out += struct.pack("<B", len(nb)) + nb
            out += struct.pack("<H", len(mlp.acts))
            out += struct.pack(f"<{len(mlp.sizes)}I", *mlp.sizes)
            out += bytes(ACT_IDS[a] for a in mlp.acts)
        params = self.params
        out += struct.pack("<I", len(params))
        for p in params:
            out += struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape)
            out += p.data.astype("<f4").tobytes()
        return bytes(out)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())


def load_checkpoint(path_or_bytes) -> Model:
    from .models import MODEL_KINDS  # cyclic: model classes live in models.py

    blob = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else Path(path_or_bytes).read_bytes()
    where = "checkpoint" if isinstance(path_or_bytes, (bytes, bytearray)) else str(path_or_bytes)
    check_header(blob, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, where)
    off = 6
    (n,) = struct.unpack_from("<B", blob, off)
    kind = blob[off + 1: off + 1 + n].decode()
    off += 1 + n
    (n,) = struct.unpack_from("<I", blob, off)
    meta = json.loads(blob[off + 4: off + 4 + n].decode())
    off += 4 + n
    (n_stacks,) = struct.unpack_from("<H", blob, off)
    off += 2
    stacks: dict[str, MLP] = {}
    for _ in range(n_stacks):
        (n,) = struct.unpack_from("<B", blob, off)
        name = blob[off + 1: off + 1 + n].decode()
        off += 1 + n
        (n_layers,) = struct.unpack_from("<H", blob, off)
        off += 2
        sizes = list(struct.unpack_from(f"<{n_layers + 1}I", blob, off))
        off += 4 * (n_layers + 1)
        acts = [ACTIVATIONS[b] for b in blob[off: off + n_layers]]
        off += n_layers
        stacks[name] = MLP(sizes, acts)
    (n_params,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = [p for name in sorted(stacks) for p in stacks[name].params]
    if n_params != len(params):
        raise ValueError(f"{where}: descriptor implies {len(params)} tensors, file holds {n_params}")
    for p in params:
        (nd,) = struct.unpack_from("<B", blob, off)
        shape = struct.unpack_from(f"<{nd}I", blob, off + 1)
        off += 1 + 4 * nd
        if tuple(shape) != p.shape:
            raise ValueError(f"{where}: tensor shape {shape} does not match descriptor {p.shape}")
        count = int(np.prod(shape))
        p.data = np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 4 * count
    cls = MODEL_KINDS.get(kind)
    if cls is None:
        raise ValueError(f"{where}: unknown model kind {kind!r}")
    return cls(stacks, meta)
