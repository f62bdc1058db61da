"""
Sampler Module
Explicit-Euler integration of velocity fields from noise (t=0) to data (t=1)

Supports plain conditional sampling and classifier-free guidance (CFG),
uniform and sway timestep grids, and exact forward-pass accounting: with
CFG every step costs two field evaluations per sample, without CFG one.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from analytic_oracle import GaussianMixtureSpec, analytic_cond_velocity, analytic_marginal_velocity
from errors import NonFiniteError
from velocity_model import Condition, ConditionBatch, VelocityModel, encode_conditions, velocity_batch

logger = logging.getLogger(__name__)

SCHEDULES = ("uniform", "sway")
SWAY_MIN = -1.0
SWAY_MAX = 2.0 / (np.pi - 2.0)


@dataclass
class SamplerConfig:
    nfe: int = 32
    cfg_enabled: bool = False
    guidance_scale: float = 2.0
    schedule: str = "uniform"
    sway_s: float = -1.0
    seed: int = 0

    def __post_init__(self):
        if self.nfe < 1:
            raise ValueError(f"nfe must be >= 1, got {self.nfe}")
        if self.guidance_scale < 0:
            raise ValueError(f"guidance_scale must be >= 0, got {self.guidance_scale}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.schedule == "sway":
            _check_sway(self.sway_s)

    def times(self) -> np.ndarray:
        if self.schedule == "sway":
            return sway_schedule(self.nfe, self.sway_s)
        return uniform_schedule(self.nfe)


@dataclass
class EvalCounters:
    model_forward_count: int = 0
    wall_clock_seconds: float = 0.0

    def __add__(self, other: "EvalCounters") -> "EvalCounters":
        return EvalCounters(self.model_forward_count + other.model_forward_count,
                            self.wall_clock_seconds + other.wall_clock_seconds)


# ===== SCHEDULES =====

def uniform_schedule(nfe: int) -> np.ndarray:
    if nfe < 1:
        raise ValueError(f"nfe must be >= 1, got {nfe}")
    return np.linspace(0.0, 1.0, nfe + 1)


def _check_sway(s: float):
    if not SWAY_MIN <= s <= SWAY_MAX:
        raise ValueError(f"sway coefficient {s} outside [{SWAY_MIN}, {SWAY_MAX:.4f}]")


def sway_schedule(nfe: int, s: float) -> np.ndarray:
    """f(u) = u + s (cos(pi u / 2) - 1 + u) applied to the uniform grid"""
    _check_sway(s)
    u = uniform_schedule(nfe)
    times = u + s * (np.cos(0.5 * np.pi * u) - 1.0 + u)
    # pin the endpoints against rounding
    times[0], times[-1] = 0.0, 1.0
    return times


# ===== FIELDS =====

class ModelField:
    """Learned field; evaluates the network on a batch of rows"""

    def __init__(self, model: VelocityModel):
        self.model = model
        self.num_classes = model.arch.num_classes

    def __call__(self, x: np.ndarray, t: float, conds: ConditionBatch) -> np.ndarray:
        return velocity_batch(self.model, x, t, conds)


class AnalyticField:
    """Oracle field: conditional velocity for labelled rows, marginal for null rows"""

    def __init__(self, spec: GaussianMixtureSpec):
        self.spec = spec
        self.num_classes = spec.num_components

    def __call__(self, x: np.ndarray, t: float, conds: ConditionBatch) -> np.ndarray:
        out = np.empty_like(x)
        null = conds.labels == self.num_classes
        if np.any(null):
            out[null] = analytic_marginal_velocity(self.spec, x[null], t)
        if np.any(~null):
            out[~null] = analytic_cond_velocity(self.spec, conds.labels[~null], x[~null], t)
        return out


def label_batch(labels: Sequence[int], num_classes: int, prompt_dim: int = 0) -> ConditionBatch:
    """Conditions carrying labels only (None or num_classes means null)"""
    labels = np.array([num_classes if l is None else l for l in labels], dtype=np.int64)
    n = labels.shape[0]
    return ConditionBatch(labels, np.zeros((n, prompt_dim)), np.zeros(n))


def cfg_velocity(field, x: np.ndarray, t: float, cond: ConditionBatch, w: float,
                 counters: Optional[EvalCounters] = None) -> np.ndarray:
    """
    Guided velocity u(x) + w (u(x|y) - u(x)), evaluated as (1-w) u(x) + w u(x|y)
    so that w=0 and w=1 return the unconditional and conditional evaluations
    exactly

    Each row costs two field evaluations, added to counters when given.
    """
    if w < 0:
        raise ValueError(f"guidance scale must be >= 0, got {w}")
    u_cond = field(x, t, cond)
    u_uncond = field(x, t, cond.null_like(field.num_classes))
    if counters is not None:
        counters.model_forward_count += 2 * x.shape[0]
    return (1.0 - w) * u_uncond + w * u_cond


def integrate(field, z0: np.ndarray, cfg: SamplerConfig, cond: ConditionBatch) -> Tuple[np.ndarray, EvalCounters]:
    """
    Euler steps x <- x + (t_{k+1} - t_k) v(x, t_k) from t=0 to t=1

    The field is never evaluated at t=1. z0 may be one state (D,) or a
    batch (n, D) with one condition row per state.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    single = z0.ndim == 1
    x = np.atleast_2d(z0).copy()
    if len(cond) != x.shape[0]:
        raise ValueError(f"{len(cond)} conditions for {x.shape[0]} states")
    counters = EvalCounters()
    times = cfg.times()
    start = time.perf_counter()
    for k in range(cfg.nfe):
        t, dt = times[k], times[k + 1] - times[k]
        # left endpoint only, so t=1 is never evaluated
        if cfg.cfg_enabled:
            v = cfg_velocity(field, x, t, cond, cfg.guidance_scale, counters)
        else:
            v = field(x, t, cond)
            counters.model_forward_count += x.shape[0]
        x = x + dt * v
        # stop at the first blown-up step
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("non-finite state during integration", step=k)
    counters.wall_clock_seconds = time.perf_counter() - start
    return (x[0] if single else x), counters


def sample_field_batch(field, conds: ConditionBatch, dim: int, cfg: SamplerConfig) -> Tuple[np.ndarray, EvalCounters]:
    """Draw z0 from the config seed and integrate one sample per condition row"""
    if len(conds) == 0:
        raise ValueError("sampling needs at least one condition")
    rng = np.random.default_rng(cfg.seed)
    z0 = rng.standard_normal((len(conds), dim))
    return integrate(field, z0, cfg, conds)


def sample_batch(model: VelocityModel, conds: Union[Sequence[Condition], ConditionBatch],
                 cfg: SamplerConfig) -> Tuple[np.ndarray, EvalCounters]:
    """
    One sample per requested condition from a learned model

    Returns:
        (samples of shape (n, D), aggregated counters)
    """
    if not isinstance(conds, ConditionBatch):
        if len(conds) == 0:
            raise ValueError("sampling needs at least one condition")
        conds = encode_conditions(list(conds), model.arch)
    samples, counters = sample_field_batch(ModelField(model), conds, model.arch.data_dim, cfg)
    logger.debug(f"Sampled {len(conds)} items with nfe={cfg.nfe}, cfg={cfg.cfg_enabled}: "
                 f"{counters.model_forward_count} forward passes")
    return samples, counters


# ===== DUMPS =====

def _mask_descriptor(prompt: np.ndarray, present: float) -> str:
    if not present or prompt.size == 0:
        return "none"
    flags = prompt[prompt.size // 2:]
    masked = np.flatnonzero(flags > 0.5)
    if masked.size == 0:
        return "0:0"
    return f"{masked[0]}:{masked.size}"


def samples_frame(samples: np.ndarray, conds: ConditionBatch, num_classes: int) -> pd.DataFrame:
    """One row per sample: label, prompt-mask descriptor (start:count), coordinates"""
    frame = pd.DataFrame({
        "label": ["null" if l == num_classes else str(int(l)) for l in conds.labels],
        "prompt_mask": [_mask_descriptor(p, a) for p, a in zip(conds.prompts, conds.prompt_present)],
    })
    for j in range(samples.shape[1]):
        frame[f"x{j}"] = samples[:, j]
    return frame


def write_samples_csv(samples: np.ndarray, conds: ConditionBatch, num_classes: int, path: Union[str, Path]) -> Path:
    path = Path(path)
    samples_frame(samples, conds, num_classes).to_csv(path, index=False)
    return path
