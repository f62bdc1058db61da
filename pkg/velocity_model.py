"""
Velocity Model Module
Small MLP velocity field v(x_t, t, c) with sinusoidal time features and
learned null embeddings for dropped conditions, plus checkpoint persistence

The network input is the concatenation [x, time_embed(t), class_emb, prompt_emb].
label=None selects the dedicated null row K of the class table; prompt=None
selects a learned null-prompt vector. The same network therefore serves both
the conditional and the unconditional field.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

import autodiff as ad
from errors import (CheckpointArchError, CheckpointCorruptError, CheckpointVersionError,
                    NonFiniteError, ShapeError)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GFFM"
CHECKPOINT_VERSION = 1
MAX_TIME_FREQUENCY = 10.0

_ACTIVATION_CODES = {"gelu": 0, "tanh": 1}
_HEADER = struct.Struct("<4sI8I")
_TRAILER = struct.Struct("<Q")


@dataclass(frozen=True, eq=False)
class Condition:
    """
    Conditioning input; either part may be dropped independently

    Attributes:
        label: class index in [0, K), None for the null class
        prompt: prompt vector of length prompt_dim, None when dropped
    """
    label: Optional[int] = None
    prompt: Optional[np.ndarray] = None

    @classmethod
    def null(cls) -> "Condition":
        return cls()

    @property
    def is_null(self) -> bool:
        return self.label is None and self.prompt is None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Condition):
            return NotImplemented
        if self.label != other.label:
            return False
        if self.prompt is None or other.prompt is None:
            return self.prompt is None and other.prompt is None
        return np.array_equal(self.prompt, other.prompt)

    def __hash__(self):
        return hash((self.label, None if self.prompt is None else self.prompt.tobytes()))


@dataclass(frozen=True)
class ModelArch:
    data_dim: int
    num_classes: int
    hidden: int = 256
    depth: int = 4
    prompt_dim: int = 0
    time_dim: int = 16
    class_dim: int = 16
    activation: str = "gelu"

    def __post_init__(self):
        if self.time_dim % 2:
            raise ValueError(f"time_dim must be even, got {self.time_dim}")
        if self.activation not in _ACTIVATION_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.data_dim, self.num_classes, self.hidden, self.depth) < 1:
            raise ValueError(f"data_dim, num_classes, hidden and depth must be >= 1: {self}")

    @property
    def input_dim(self) -> int:
        return self.data_dim + self.time_dim + self.class_dim + self.prompt_dim

    def as_ints(self) -> List[int]:
        return [self.data_dim, self.num_classes, self.hidden, self.depth,
                self.prompt_dim, self.time_dim, self.class_dim, _ACTIVATION_CODES[self.activation]]

    @classmethod
    def from_ints(cls, values: Sequence[int]) -> "ModelArch":
        codes = {v: k for k, v in _ACTIVATION_CODES.items()}
        d, k, h, l, p, td, cd, act = values
        if act not in codes:
            raise CheckpointCorruptError(f"unknown activation code {act}")
        return cls(d, k, h, l, p, td, cd, codes[act])

    def param_shapes(self) -> Dict[str, tuple]:
        """Parameter shapes in declaration order (also the checkpoint order)"""
        shapes = {
            "class_table": (self.num_classes + 1, self.class_dim),
            "null_prompt": (self.prompt_dim,),
        }
        fan_in = self.input_dim
        for i in range(self.depth):
            shapes[f"W{i}"] = (self.hidden, fan_in)
            shapes[f"b{i}"] = (self.hidden,)
            fan_in = self.hidden
        shapes["W_out"] = (self.data_dim, self.hidden)
        shapes["b_out"] = (self.data_dim,)
        return shapes


@dataclass
class VelocityModel:
    arch: ModelArch
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "VelocityModel":
        return VelocityModel(self.arch, {k: v.copy() for k, v in self.params.items()})

    @property
    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def equals(self, other: "VelocityModel") -> bool:
        """Bitwise equality of architecture and every parameter array"""
        if self.arch != other.arch or list(self.params) != list(other.params):
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params)


@dataclass
class ConditionBatch:
    """
    Array form of a list of Conditions

    labels uses K for the null class; prompts is zero wherever the prompt is
    dropped, and prompt_present is the 0/1 selector between prompt and the
    learned null prompt.
    """
    labels: np.ndarray
    prompts: np.ndarray
    prompt_present: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def null_like(self, num_classes: int) -> "ConditionBatch":
        n = len(self)
        return ConditionBatch(np.full(n, num_classes, dtype=np.int64),
                              np.zeros_like(self.prompts), np.zeros(n))


def encode_conditions(conds: Sequence[Condition], arch: ModelArch) -> ConditionBatch:
    n = len(conds)
    labels = np.full(n, arch.num_classes, dtype=np.int64)
    prompts = np.zeros((n, arch.prompt_dim))
    present = np.zeros(n)
    for i, c in enumerate(conds):
        if c.label is not None:
            if not 0 <= c.label < arch.num_classes:
                raise ValueError(f"label {c.label} outside [0, {arch.num_classes})")
            labels[i] = c.label
        if c.prompt is not None:
            p = np.asarray(c.prompt, dtype=np.float64)
            if p.shape != (arch.prompt_dim,):
                raise ShapeError("prompt", p.shape, (arch.prompt_dim,))
            prompts[i] = p
            present[i] = 1.0
    return ConditionBatch(labels, prompts, present)


# ===== TIME FEATURES =====

def time_embed(t: float, dim: int) -> np.ndarray:
    """
    Sinusoidal features [sin(2πf t)..., cos(2πf t)...] with f geometrically
    spaced from 1 to 10
    """
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return time_embed_batch(np.array([t]), dim)[0]


def time_embed_batch(ts: np.ndarray, dim: int) -> np.ndarray:
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    freqs = np.geomspace(1.0, MAX_TIME_FREQUENCY, dim // 2) if dim else np.zeros(0)
    angles = 2.0 * np.pi * np.outer(np.asarray(ts, dtype=np.float64), freqs)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


# ===== PARAMETERS =====

def init_params(seed: int, arch: ModelArch) -> VelocityModel:
    """
    Deterministic initialisation

    Hidden weights are N(0, 1/fan_in), biases zero, embeddings N(0, 1) and the
    output layer is all zeros so the initial field is the zero field.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name in ("class_table", "null_prompt"):
            params[name] = rng.standard_normal(shape)
        elif name in ("W_out", "b_out") or name.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[1])
    return VelocityModel(arch, params)


# ===== FORWARD =====

def velocity_on_tape(arch: ModelArch, params: Mapping[str, ad.DiffNode], tape: ad.Tape,
                     x: np.ndarray, t: np.ndarray, conds: ConditionBatch) -> ad.DiffNode:
    """
    Batched forward pass recorded on a tape

    Args:
        x: states, shape (n, D)
        t: times, shape (n,)
        conds: encoded conditions for the n rows

    Returns:
        Node of shape (n, D)
    """
    n = x.shape[0]
    if x.shape != (n, arch.data_dim):
        raise ShapeError("velocity_forward", x.shape, (n, arch.data_dim))
    parts = [
        tape.constant(x),
        tape.constant(time_embed_batch(t, arch.time_dim)),
        ad.take_rows(params["class_table"], conds.labels),
    ]
    if arch.prompt_dim:
        present = conds.prompt_present[:, None]
        given = tape.constant(conds.prompts * present)
        dropped = ad.mul(ad.tile_rows(params["null_prompt"], n), tape.constant(np.repeat(1.0 - present, arch.prompt_dim, axis=1)))
        parts.append(ad.add(given, dropped))
    h = ad.concat(parts)

    act = ad.ACTIVATIONS[arch.activation]
    for i in range(arch.depth):
        h = act(ad.add(ad.matmul(h, ad.transpose(params[f"W{i}"])), params[f"b{i}"]))
    return ad.add(ad.matmul(h, ad.transpose(params["W_out"])), params["b_out"])


def velocity_batch(model: VelocityModel, x: np.ndarray, t: Union[float, np.ndarray],
                   conds: ConditionBatch) -> np.ndarray:
    """Inference-mode forward for n rows (nothing recorded)"""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite state passed to velocity_forward")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    tape = ad.Tape(record=False)
    params = {k: tape.constant(v) for k, v in model.params.items()}
    return np.array(velocity_on_tape(model.arch, params, tape, x, t, conds).value)


def velocity_forward(model: VelocityModel, x: np.ndarray, t: float, cond: Condition) -> np.ndarray:
    """Velocity at a single state x (shape (D,)) for one condition"""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)) or not np.isfinite(t):
        raise NonFiniteError("non-finite input passed to velocity_forward")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    batch = encode_conditions([cond], model.arch)
    return velocity_batch(model, x[None, :], np.array([t]), batch)[0]


# ===== CHECKPOINTS =====

def save_checkpoint(model: VelocityModel, path: Union[str, Path]) -> Path:
    """
    Write a little-endian checkpoint

    Layout: magic "GFFM", u32 version, 8 u32 arch integers, the float64
    parameter arrays in declaration order, u64 count of payload floats.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    shapes = model.arch.param_shapes()
    payload = [np.asarray(model.params[name], dtype="<f8").reshape(-1) for name in shapes]
    flat = np.concatenate(payload) if payload else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, *model.arch.as_ints()))
        fh.write(flat.astype("<f8").tobytes())
        fh.write(_TRAILER.pack(flat.size))
    logger.info(f"Saved checkpoint with {flat.size} parameters to {path}")
    return path


def load_checkpoint(path: Union[str, Path], expected_arch: Optional[ModelArch] = None) -> VelocityModel:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + _TRAILER.size:
        raise CheckpointCorruptError(f"{path}: file too short ({len(raw)} bytes)")
    magic, version, *arch_ints = _HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    try:
        arch = ModelArch.from_ints(arch_ints)
    except ValueError as e:
        raise CheckpointCorruptError(f"{path}: invalid architecture header: {e}") from e

    shapes = arch.param_shapes()
    expected = int(sum(np.prod(s, dtype=np.int64) for s in shapes.values()))
    body = len(raw) - _HEADER.size - _TRAILER.size
    if body != 8 * expected:
        raise CheckpointCorruptError(f"{path}: payload holds {body} bytes, architecture needs {8 * expected}")
    (count,) = _TRAILER.unpack_from(raw, len(raw) - _TRAILER.size)
    if count != expected:
        raise CheckpointCorruptError(f"{path}: trailer count {count} != {expected}")
    if expected_arch is not None and expected_arch != arch:
        raise CheckpointArchError(f"{path}: checkpoint arch {arch} does not match {expected_arch}")

    flat = np.frombuffer(raw, dtype="<f8", count=expected, offset=_HEADER.size).astype(np.float64)
    params, offset = {}, 0
    for name, shape in shapes.items():
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = flat[offset:offset + size].reshape(shape).copy()
        offset += size
    return VelocityModel(arch, params)
