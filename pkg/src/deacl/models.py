"""Encoder / projector / classifier networks and checkpoint serialization.

The desk-scale encoder is four conv blocks (3x3 conv, batch-stat
normalize, relu; stride 2 on every other block), a global average pool
and a linear map to the representation dimension. All parameters live in
ordered name->Tensor maps so hashing and serialization are stable.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"DACL"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class EncoderConfig:
    in_shape: tuple = (1, 16, 16)  # (C, H, W)
    widths: tuple = (16, 32, 64, 64)
    rep_dim: int = 64

    def __post_init__(self):
        self.in_shape = tuple(self.in_shape)  # JSON configs arrive as lists
        self.widths = tuple(self.widths)
        if self.rep_dim < 2:
            raise ValueError("representation dimension must be >= 2")
        if any(w < 1 for w in self.widths):
            raise ValueError("channel widths must be >= 1")


@dataclass
class ProjectorConfig:
    hidden: int = 128
    out_dim: int = 64
    enabled: bool = True


@dataclass
class BNState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


def _init_weight(rng, shape, fan_in):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(T.default_dtype())


class Module:
    """Tiny base holding ordered trainable params and non-trainable buffers."""

    def __init__(self):
        self.params = {}     # name -> Tensor
        self.bn_states = {}  # name -> BNState

    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        out = {}
        for k in sorted(self.params):
            out[k] = self.params[k].data.copy()
        for k in sorted(self.bn_states):
            st = self.bn_states[k]
            out[f"{k}.running_mean"] = st.running_mean.copy()
            out[f"{k}.running_var"] = st.running_var.copy()
        return out

    def load_state_dict(self, state):
        expected = set(self.state_dict())
        got = set(state)
        if got != expected:
            unknown = sorted(got - expected)
            missing = sorted(expected - got)
            raise CheckpointError(f"state mismatch: unknown={unknown} missing={missing}")
        for k in sorted(self.params):
            arr = np.asarray(state[k], dtype=T.default_dtype())
            if arr.shape != self.params[k].data.shape:
                raise CheckpointError(f"shape mismatch for {k}")
            self.params[k].data = arr.copy()
        for k in sorted(self.bn_states):
            self.bn_states[k].running_mean = np.asarray(state[f"{k}.running_mean"], dtype=np.float64).copy()
            self.bn_states[k].running_var = np.asarray(state[f"{k}.running_var"], dtype=np.float64).copy()

    def param_hash(self):
        """SHA-256 over all parameters and buffers; detects any mutation."""
        h = hashlib.sha256()
        for k, arr in self.state_dict().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()

    def param_count(self):
        return sum(p.data.size for p in self.params.values())


@contextmanager
def params_frozen(*modules):
    """Temporarily stop gradient tracking for the given modules' parameters."""
    saved = []
    for m in modules:
        for p in m.params.values():
            saved.append((p, p.requires_grad))
            p.requires_grad = False
    try:
        yield
    finally:
        for p, rg in saved:
            p.requires_grad = rg


class Encoder(Module):
    def __init__(self, config: EncoderConfig, rng):
        super().__init__()
        self.config = config
        c_in = config.in_shape[0]
        self.strides = tuple(1 if i % 2 == 0 else 2 for i in range(len(config.widths)))
        for i, c_out in enumerate(config.widths):
            self.params[f"block{i}.conv.w"] = Tensor(
                _init_weight(rng, (c_out, c_in, 3, 3), fan_in=c_in * 9), requires_grad=True)
            self.params[f"block{i}.bn.gamma"] = Tensor(np.ones(c_out, dtype=T.default_dtype()), requires_grad=True)
            self.params[f"block{i}.bn.beta"] = Tensor(np.zeros(c_out, dtype=T.default_dtype()), requires_grad=True)
            self.bn_states[f"block{i}.bn"] = BNState(
                running_mean=np.zeros(c_out, dtype=np.float64),
                running_var=np.ones(c_out, dtype=np.float64))
            c_in = c_out
        self.params["head.w"] = Tensor(
            _init_weight(rng, (c_in, config.rep_dim), fan_in=c_in), requires_grad=True)
        self.params["head.b"] = Tensor(np.zeros(config.rep_dim, dtype=T.default_dtype()), requires_grad=True)

    def forward(self, x, mode="eval"):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim != 4 or x.data.shape[1:] != self.config.in_shape:
            raise T.ShapeError(f"encoder expects [B,{self.config.in_shape}], got {x.data.shape}")
        h = x
        for i in range(len(self.config.widths)):
            h = T.conv2d(h, self.params[f"block{i}.conv.w"], stride=self.strides[i], pad=1)
            h = T.batch_normalize(h, self.params[f"block{i}.bn.gamma"],
                                  self.params[f"block{i}.bn.beta"],
                                  self.bn_states[f"block{i}.bn"], mode)
            h = T.relu(h)
        h = T.global_avg_pool(h)
        return T.matmul(h, self.params["head.w"]) + self.params["head.b"]


class Projector(Module):
    """One-hidden-layer MLP with relu, used on top of the encoder output."""

    def __init__(self, config: ProjectorConfig, in_dim, rng):
        super().__init__()
        self.config = config
        self.in_dim = in_dim
        self.params["fc1.w"] = Tensor(_init_weight(rng, (in_dim, config.hidden), fan_in=in_dim), requires_grad=True)
        self.params["fc1.b"] = Tensor(np.zeros(config.hidden, dtype=T.default_dtype()), requires_grad=True)
        self.params["fc2.w"] = Tensor(_init_weight(rng, (config.hidden, config.out_dim), fan_in=config.hidden), requires_grad=True)
        self.params["fc2.b"] = Tensor(np.zeros(config.out_dim, dtype=T.default_dtype()), requires_grad=True)

    def forward(self, reps):
        if not self.config.enabled:
            raise ValueError("projector is disabled")
        if not isinstance(reps, Tensor):
            reps = Tensor(reps)
        h = T.relu(T.matmul(reps, self.params["fc1.w"]) + self.params["fc1.b"])
        return T.matmul(h, self.params["fc2.w"]) + self.params["fc2.b"]


class LinearClassifier(Module):
    def __init__(self, in_dim, num_classes, rng):
        super().__init__()
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.params["w"] = Tensor(_init_weight(rng, (in_dim, num_classes), fan_in=in_dim), requires_grad=True)
        self.params["b"] = Tensor(np.zeros(num_classes, dtype=T.default_dtype()), requires_grad=True)

    def forward(self, reps):
        if not isinstance(reps, Tensor):
            reps = Tensor(reps)
        return T.matmul(reps, self.params["w"]) + self.params["b"]


def clone_module(module):
    """Deep copy of parameters and buffers into a structurally equal module."""
    import copy
    out = copy.copy(module)
    out.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in module.params.items()}
    out.bn_states = {
        k: BNState(st.running_mean.copy(), st.running_var.copy(), st.momentum, st.eps)
        for k, st in module.bn_states.items()
    }
    return out


# -- checkpoint format ----------------------------------------------------
# magic "DACL" | u32 version | u32 meta_len | meta JSON (utf-8)
# | u32 n_records | records: u32 name_len, name, u32 rank, u32 dims..., f32 LE payload


def save_checkpoint(path, named_arrays, metadata=None):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    names = sorted(named_arrays)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(named_arrays[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)

    def need(n):
        b = buf.read(n)
        if len(b) != n:
            raise CheckpointError("truncated checkpoint file")
        return b

    if need(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes")
    (version,) = struct.unpack("<I", need(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", need(4))
    metadata = json.loads(need(meta_len).decode("utf-8"))
    (n_records,) = struct.unpack("<I", need(4))
    arrays = {}
    for _ in range(n_records):
        (name_len,) = struct.unpack("<I", need(4))
        name = need(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", need(4))
        dims = tuple(struct.unpack("<I", need(4))[0] for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        payload = need(4 * count)
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if buf.read(1):
        raise CheckpointError("trailing bytes after last record")
    return arrays, metadata


def save_model_checkpoint(path, modules, metadata=None):
    """Serialize several modules under name prefixes, e.g. {"encoder": enc}."""
    arrays = {}
    for prefix, mod in modules.items():
        for k, v in mod.state_dict().items():
            arrays[f"{prefix}.{k}"] = v
    save_checkpoint(path, arrays, metadata)


def load_model_checkpoint(path, modules):
    """Load a checkpoint produced by save_model_checkpoint into live modules."""
    arrays, metadata = load_checkpoint(path)
    used = set()
    for prefix, mod in modules.items():
        sub = {}
        for k in arrays:
            if k.startswith(prefix + "."):
                sub[k[len(prefix) + 1:]] = arrays[k]
                used.add(k)
        mod.load_state_dict(sub)
    unknown = sorted(set(arrays) - used)
    if unknown:
        raise CheckpointError(f"checkpoint holds unknown parameters: {unknown}")
    return metadata
