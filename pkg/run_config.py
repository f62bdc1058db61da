"""
Run Config Module
Parses, validates and fingerprints experiment config files

File format: INI-like sections with key = value lines and '#' comments.
Keys before the first section header are global (seed, output_dir).

    seed = 0
    [dataset]
    kind = mixture
    [train]
    w = 0.7

Every section is a pydantic model that rejects unknown keys; validation
failures are reported as ConfigError naming section.key and the source line.
"""

import hashlib
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator

from analytic_oracle import GaussianMixtureSpec
from datasets import DatasetSpec
from errors import ConfigError
from eval_bench import EvalSettings
from flow_train import TrainConfig
from sampler import SWAY_MAX, SWAY_MIN, SamplerConfig
from velocity_model import ModelArch

logger = logging.getLogger(__name__)

SECTIONS = ("dataset", "model", "train", "sampler", "eval")
GLOBAL = "global"


def _split(value, sep: str = ","):
    if isinstance(value, str):
        return [p.strip() for p in value.split(sep) if p.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Section):
    kind: Literal["mixture", "infill"] = "mixture"
    n_components: int = Field(8, ge=1)
    dim: int = Field(2, ge=1)
    radius: float = Field(4.0, gt=0)
    variance: float = Field(0.09, gt=0)
    weights: Optional[List[float]] = None
    means: Optional[List[List[float]]] = None
    n_items: int = Field(4096, ge=0)
    mask_lo: float = Field(0.7, ge=0, le=1)
    mask_hi: float = Field(1.0, ge=0, le=1)

    @field_validator("weights", mode="before")
    @classmethod
    def _weights_list(cls, v):
        return _split(v)

    @field_validator("means", mode="before")
    @classmethod
    def _means_rows(cls, v):
        if isinstance(v, str):
            return [_split(row) for row in _split(v, ";")]
        return v

    @field_validator("weights")
    @classmethod
    def _weights_match(cls, v, info: ValidationInfo):
        if v is None:
            return v
        if len(v) != info.data.get("n_components", len(v)):
            raise ValueError(f"expected {info.data.get('n_components')} weights, got {len(v)}")
        if any(x <= 0 for x in v):
            raise ValueError("weights must be positive")
        return v

    @field_validator("means")
    @classmethod
    def _means_match(cls, v, info: ValidationInfo):
        if v is None:
            return v
        k, d = info.data.get("n_components"), info.data.get("dim")
        if len(v) != k or any(len(row) != d for row in v):
            raise ValueError(f"expected {k} rows of {d} coordinates")
        return v

    @field_validator("mask_hi")
    @classmethod
    def _mask_order(cls, v, info: ValidationInfo):
        lo = info.data.get("mask_lo")
        if lo is not None and v < lo:
            raise ValueError(f"mask_hi {v} is below mask_lo {lo}")
        return v


class ModelSection(_Section):
    hidden: int = Field(256, ge=1)
    depth: int = Field(4, ge=1)
    time_dim: int = Field(16, ge=2)
    class_dim: int = Field(16, ge=1)
    activation: Literal["gelu", "tanh"] = "gelu"

    @field_validator("time_dim")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("time_dim must be even")
        return v


class TrainSection(_Section):
    loss_kind: Literal["cfm", "mg_cfm"] = "mg_cfm"
    w: float = Field(0.7, ge=0)
    p_uncond: float = Field(0.2, ge=0, le=1)
    p_prompt_drop: float = Field(0.3, ge=0, le=1)
    sg: bool = True
    lr: float = Field(1e-3, gt=0)
    total_steps: int = Field(2000, ge=0)
    warmup_steps: Optional[int] = Field(None, ge=0)
    grad_clip: float = Field(1.0, gt=0)
    batch_size: int = Field(256, ge=1)
    weight_decay: float = Field(0.0, ge=0)
    mg_target: Literal["subtract", "add"] = "subtract"
    log_every: int = Field(100, ge=0)

    @field_validator("warmup_steps")
    @classmethod
    def _warmup_fits(cls, v, info: ValidationInfo):
        total = info.data.get("total_steps")
        if v is not None and total is not None and v > total:
            raise ValueError(f"warmup_steps {v} exceeds total_steps {total}")
        return v


class SamplerSection(_Section):
    nfe: int = Field(32, ge=1)
    cfg: bool = False
    guidance_scale: float = Field(2.0, ge=0)
    schedule: Literal["uniform", "sway"] = "uniform"
    sway_s: float = Field(-1.0, ge=SWAY_MIN, le=SWAY_MAX)


class EvalSection(_Section):
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    nfe_list: List[int] = Field(default_factory=lambda: [32, 16, 7])
    w_list: List[float] = Field(default_factory=lambda: [0.0, 0.3, 0.5, 0.7, 1.0, 2.0])
    samples_per_label: int = Field(500, ge=1)
    n_proj: int = Field(128, ge=1)
    eval_every: int = Field(200, ge=1)
    workers: Optional[int] = Field(None, ge=1)

    @field_validator("seeds", "nfe_list", "w_list", mode="before")
    @classmethod
    def _lists(cls, v):
        return _split(v)

    @field_validator("seeds", "nfe_list", "w_list")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("list must not be empty")
        return v

    @field_validator("nfe_list")
    @classmethod
    def _positive_nfe(cls, v):
        if any(n < 1 for n in v):
            raise ValueError("every nfe must be >= 1")
        return v

    @field_validator("w_list")
    @classmethod
    def _non_negative_w(cls, v):
        if any(w < 0 for w in v):
            raise ValueError("every w must be >= 0")
        return v


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    output_dir: Optional[str] = None
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    sampler: SamplerSection = Field(default_factory=SamplerSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        """Copy with the global seed replaced (None keeps it)"""
        if seed is None:
            return self
        return self.model_copy(update={"seed": int(seed)})


# ===== PARSING =====

def _read_lines(text: str) -> Tuple[Dict[str, Dict[str, str]], Dict[Tuple[str, str], int]]:
    """Raw string values per section plus the source line of every key"""
    raw: Dict[str, Dict[str, str]] = {GLOBAL: {}}
    lines: Dict[Tuple[str, str], int] = {}
    section = GLOBAL
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(line, None, "malformed section header", number)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(section, None, f"unknown section (expected one of {', '.join(SECTIONS)})", number)
            raw.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(section, line, "expected key = value", number)
        key, value = (part.strip() for part in line.split("=", 1))
        if key in raw[section]:
            raise ConfigError(section, key, f"duplicate key (first set on line {lines[(section, key)]})", number)
        raw[section][key] = value
        lines[(section, key)] = number
    return raw, lines


def _coerce_empty(values: Dict[str, str]) -> Dict[str, Optional[str]]:
    return {k: (None if v == "" else v) for k, v in values.items()}


def parse_config_text(text: str) -> RunConfig:
    """
    Parse config text into a validated RunConfig with defaults filled

    Raises:
        ConfigError: unknown section or key, type error or range violation
    """
    raw, lines = _read_lines(text)
    payload: Dict[str, object] = _coerce_empty(raw.pop(GLOBAL))
    for section, values in raw.items():
        payload[section] = _coerce_empty(values)
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as e:
        err = e.errors()[0]
        loc = [str(p) for p in err["loc"]]
        if loc and loc[0] in SECTIONS:
            section, key = loc[0], (loc[1] if len(loc) > 1 else None)
        else:
            section, key = GLOBAL, (loc[0] if loc else None)
        reason = err["msg"]
        if err["type"] == "extra_forbidden":
            reason = "unknown key"
        raise ConfigError(section, key, reason, lines.get((section, key))) from e


def parse_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(GLOBAL, None, f"cannot read config file {path}: {e.strerror}") from e
    cfg = parse_config_text(text)
    logger.info(f"Loaded run config {path} (fingerprint {fingerprint(cfg)})")
    return cfg


# ===== SERIALIZATION =====

def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        if value and isinstance(value[0], list):
            return ";".join(_format_value(row) for row in value)
        return ",".join(_format_value(v) for v in value)
    return str(value)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text: every key in declaration order, defaults included"""
    out = [f"seed = {cfg.seed}", f"output_dir = {_format_value(cfg.output_dir)}"]
    for section in SECTIONS:
        out.append("")
        out.append(f"[{section}]")
        for key, value in getattr(cfg, section).model_dump().items():
            out.append(f"{key} = {_format_value(value)}")
    return "\n".join(out) + "\n"


def fingerprint(cfg: RunConfig, length: int = 12) -> str:
    """Short sha256 of the canonical config; output_dir does not contribute"""
    canonical = serialize_config(cfg.model_copy(update={"output_dir": None}))
    return hashlib.sha256(canonical.encode()).hexdigest()[:length]


# ===== BUILDERS =====

def mixture_spec(cfg: RunConfig) -> GaussianMixtureSpec:
    ds = cfg.dataset
    weights = None
    if ds.weights is not None:
        weights = np.asarray(ds.weights, dtype=np.float64)
        weights = weights / weights.sum()
    if ds.means is None:
        return GaussianMixtureSpec.ring(ds.n_components, ds.dim, ds.radius, ds.variance, weights)
    if weights is None:
        weights = np.full(ds.n_components, 1.0 / ds.n_components)
    return GaussianMixtureSpec(weights, np.asarray(ds.means, dtype=np.float64),
                               np.full(ds.n_components, ds.variance))


def dataset_spec(cfg: RunConfig) -> DatasetSpec:
    ds = cfg.dataset
    return DatasetSpec(ds.kind, mixture_spec(cfg), ds.n_items, seed=cfg.seed,
                       mask_lo=ds.mask_lo, mask_hi=ds.mask_hi)


def model_arch(cfg: RunConfig) -> ModelArch:
    m = cfg.model
    prompt_dim = 2 * cfg.dataset.dim if cfg.dataset.kind == "infill" else 0
    return ModelArch(cfg.dataset.dim, cfg.dataset.n_components, m.hidden, m.depth,
                     prompt_dim, m.time_dim, m.class_dim, m.activation)


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        loss_kind=t.loss_kind,
        w=t.w,
        p_uncond=t.p_uncond,
        p_prompt_drop=t.p_prompt_drop,
        use_stop_gradient=t.sg,
        peak_lr=t.lr,
        warmup_steps=t.warmup_steps,
        total_steps=t.total_steps,
        grad_clip_norm=t.grad_clip,
        batch_size=t.batch_size,
        seed=cfg.seed,
        weight_decay=t.weight_decay,
        mg_target=t.mg_target,
        log_every=t.log_every,
    )


def sampler_config(cfg: RunConfig) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(nfe=s.nfe, cfg_enabled=s.cfg, guidance_scale=s.guidance_scale,
                         schedule=s.schedule, sway_s=s.sway_s, seed=cfg.seed)


def eval_settings(cfg: RunConfig) -> EvalSettings:
    return EvalSettings(cfg.eval.samples_per_label, cfg.eval.n_proj, cfg.seed)
