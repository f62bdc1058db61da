"""
Flow Training Module
Conditional flow matching (CFM) and model-guidance flow matching (MG-CFM)

CFM regresses v(x_t, t, c') on x1 - z with conditional dropout c' of c.
MG-CFM adds the guidance difference dv = sg(v(x_t, t, c') - v(x_t, t, null))
inside the residual:

    loss = mean || v(x_t, t, c') + w * dv - (x1 - z) ||^2

i.e. the regression target becomes u - w * dv with u = x1 - z. With sg the
conditional output settles at v_u + (u - v_u) / (1 + w), a guidance scale
below one; the "add" target u + w * dv settles at
v_u + (u - v_u) / (1 - w) instead.

Optimisation is AdamW with linear warmup, linear decay and global grad-norm
clipping.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd

import autodiff as ad
from datasets import ConditionalDataset
from errors import NonFiniteError, TrainingDivergedError
from velocity_model import (Condition, ConditionBatch, ModelArch, VelocityModel,
                            init_params, velocity_on_tape)

logger = logging.getLogger(__name__)

VelocityFn = Callable[[Mapping[str, ad.DiffNode], ad.Tape, np.ndarray, np.ndarray, ConditionBatch], ad.DiffNode]

LOSS_KINDS = ("cfm", "mg_cfm")
MG_TARGETS = ("subtract", "add")


@dataclass
class TrainConfig:
    """
    Training hyperparameters

    warmup_steps=None resolves to 5% of total_steps. mg_target="subtract"
    uses the target (x1 - z) - w * dv; "add" flips the sign of the guidance
    term.
    """
    loss_kind: str = "mg_cfm"
    w: float = 0.7
    p_uncond: float = 0.2
    p_prompt_drop: float = 0.3
    use_stop_gradient: bool = True
    peak_lr: float = 1e-3
    warmup_steps: Optional[int] = None
    total_steps: int = 2000
    grad_clip_norm: float = 1.0
    batch_size: int = 256
    seed: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    mg_target: str = "subtract"
    divergence_factor: float = 10.0
    divergence_window: int = 100
    log_every: int = 100

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.mg_target not in MG_TARGETS:
            raise ValueError(f"mg_target must be one of {MG_TARGETS}, got {self.mg_target!r}")
        if not 0.0 <= self.p_uncond <= 1.0 or not 0.0 <= self.p_prompt_drop <= 1.0:
            raise ValueError(f"dropout probabilities must lie in [0, 1]: {self.p_uncond}, {self.p_prompt_drop}")
        if self.w < 0:
            raise ValueError(f"w must be >= 0, got {self.w}")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ValueError("total_steps must be >= 0 and batch_size >= 1")
        if self.grad_clip_norm <= 0:
            raise ValueError(f"grad_clip_norm must be positive, got {self.grad_clip_norm}")
        if self.warmup_steps is None:
            self.warmup_steps = int(round(0.05 * self.total_steps))
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"need 0 <= warmup_steps <= total_steps, got {self.warmup_steps}, {self.total_steps}")

    @property
    def forward_passes_per_item(self) -> int:
        return 2 if self.loss_kind == "mg_cfm" else 1


@dataclass
class TrainRecord:
    step: List[int] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    grad_norm: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    diverged: List[bool] = field(default_factory=list)
    forward_passes: List[int] = field(default_factory=list)

    def append(self, step: int, loss: float, grad_norm: float, lr: float, diverged: bool, forward_passes: int):
        self.step.append(step)
        self.loss.append(loss)
        self.grad_norm.append(grad_norm)
        self.lr.append(lr)
        self.diverged.append(diverged)
        self.forward_passes.append(forward_passes)

    def __len__(self) -> int:
        return len(self.step)

    @property
    def any_diverged(self) -> bool:
        return any(self.diverged)

    @property
    def total_forward_passes(self) -> int:
        return int(sum(self.forward_passes))

    @property
    def last_finite_step(self) -> int:
        for s, l in zip(reversed(self.step), reversed(self.loss)):
            if np.isfinite(l):
                return s
        return 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "step": self.step,
            "loss": self.loss,
            "grad_norm": self.grad_norm,
            "lr": self.lr,
            "diverged": [int(d) for d in self.diverged],
        })

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False)
        return path


@dataclass
class TrainBatch:
    x: np.ndarray
    conds: ConditionBatch

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    count: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


# ===== PATH AND CONDITIONS =====

def sample_path(x1: np.ndarray, z: np.ndarray, t) -> Tuple[np.ndarray, np.ndarray]:
    """
    OT interpolation x_t = (1 - t) z + t x1 and its constant target x1 - z

    t may be a scalar or one time per row of a 2-D batch.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1 and x1.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * z + t * x1, x1 - z


def dropout_condition(cond: Condition, rng: np.random.Generator, p_uncond: float,
                      p_prompt_drop: float) -> Condition:
    """
    With probability p_uncond drop everything; independently, with
    probability p_prompt_drop drop the prompt alone
    """
    u_all, u_prompt = rng.random(2)
    if u_all < p_uncond:
        return Condition.null()
    if u_prompt < p_prompt_drop:
        return Condition(cond.label, None)
    return cond


def dropout_batch(conds: ConditionBatch, rng: np.random.Generator, p_uncond: float,
                  p_prompt_drop: float, num_classes: int) -> ConditionBatch:
    """Vectorised dropout_condition, same two uniform draws per row"""
    n = len(conds)
    u = rng.random((n, 2))
    drop_all = u[:, 0] < p_uncond
    drop_prompt = drop_all | (u[:, 1] < p_prompt_drop)
    labels = np.where(drop_all, num_classes, conds.labels)
    present = np.where(drop_prompt, 0.0, conds.prompt_present)
    prompts = conds.prompts * present[:, None]
    return ConditionBatch(labels.astype(np.int64), prompts, present)


def _draw(batch: TrainBatch, rng: np.random.Generator, p_uncond: float, p_prompt_drop: float,
          num_classes: int):
    n = len(batch)
    t = rng.random(n)
    z = rng.standard_normal(batch.x.shape)
    conds = dropout_batch(batch.conds, rng, p_uncond, p_prompt_drop, num_classes)
    x_t, target = sample_path(batch.x, z, t)
    return x_t, t, target, conds


def _bind(model: VelocityModel, params: Optional[Mapping[str, ad.DiffNode]],
          velocity_fn: Optional[VelocityFn]):
    if params is None:
        tape = ad.Tape()
        params = ad.leaves_for(tape, model.params)
    else:
        tape = next(iter(params.values())).tape
    if velocity_fn is None:
        def velocity_fn(p, tp, x, t, c):
            return velocity_on_tape(model.arch, p, tp, x, t, c)
    return tape, params, velocity_fn


def _finish(tape: ad.Tape, resid: ad.DiffNode, n: int, step: Optional[int]) -> ad.DiffNode:
    loss = ad.mul(ad.sq_l2(resid), 1.0 / n)
    if not np.isfinite(loss.value):
        raise NonFiniteError("non-finite loss", step=step)
    return loss


# ===== LOSSES =====

def cfm_loss(model: VelocityModel, batch: TrainBatch, rng: np.random.Generator,
             p_uncond: float = 0.2, p_prompt_drop: float = 0.3,
             params: Optional[Mapping[str, ad.DiffNode]] = None,
             velocity_fn: Optional[VelocityFn] = None, step: Optional[int] = None) -> ad.DiffNode:
    """
    Conditional flow-matching loss on one batch

    Args:
        params: parameter leaves to build on (a fresh tape is made when None)
        velocity_fn: replacement for the network, used by tests

    Returns:
        Scalar node mean_i ||v(x_t, t, c'_i) - (x1_i - z_i)||^2
    """
    if len(batch) == 0:
        raise ValueError("cfm_loss needs a non-empty batch")
    tape, params, velocity_fn = _bind(model, params, velocity_fn)
    x_t, t, target, conds = _draw(batch, rng, p_uncond, p_prompt_drop, model.arch.num_classes)
    v_c = velocity_fn(params, tape, x_t, t, conds)
    return _finish(tape, ad.sub(v_c, target), len(batch), step)


def mg_cfm_loss(model: VelocityModel, batch: TrainBatch, w: float, use_stop_gradient: bool,
                rng: np.random.Generator, p_uncond: float = 0.2, p_prompt_drop: float = 0.3,
                mg_target: str = "subtract",
                params: Optional[Mapping[str, ad.DiffNode]] = None,
                velocity_fn: Optional[VelocityFn] = None, step: Optional[int] = None) -> ad.DiffNode:
    """
    Model-guidance loss on one batch

    Draws t, z and the dropout exactly as cfm_loss does, then evaluates the
    network twice: on the (possibly dropped) condition and on the fully null
    condition. Rows whose condition was dropped entirely get dv = 0.
    """
    if w < 0:
        raise ValueError(f"w must be >= 0, got {w}")
    if len(batch) == 0:
        raise ValueError("mg_cfm_loss needs a non-empty batch")
    tape, params, velocity_fn = _bind(model, params, velocity_fn)
    num_classes = model.arch.num_classes
    x_t, t, target, conds = _draw(batch, rng, p_uncond, p_prompt_drop, num_classes)

    # Conditional and fully null passes share x_t and t
    v_c = velocity_fn(params, tape, x_t, t, conds)
    v_u = velocity_fn(params, tape, x_t, t, conds.null_like(num_classes))
    delta = ad.sub(v_c, v_u)
    if use_stop_gradient:
        delta = ad.stop_gradient(delta)
    # residual v_c + scale * dv - u; "add" regresses v_c on u + w * dv
    scale = w if mg_target == "subtract" else -w
    resid = ad.sub(ad.add(v_c, ad.mul(delta, scale)), target)
    return _finish(tape, resid, len(batch), step)


def param_grads(loss: ad.DiffNode) -> Dict[str, np.ndarray]:
    """Run backward on a loss and return gradients keyed by parameter name"""
    names = dict(loss.tape.leaf_names)
    grads = ad.backward(loss)
    return {names[i]: g for i, g in grads.items()}


# ===== OPTIMISER =====

def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr, then linear decay to 0 at total_steps"""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    remaining = cfg.total_steps - cfg.warmup_steps
    if remaining == 0:
        return 0.0 if step >= cfg.total_steps else cfg.peak_lr
    return cfg.peak_lr * (cfg.total_steps - step) / remaining


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float = 1.0) -> Tuple[Dict[str, np.ndarray], float]:
    """
    Scale every gradient by max_norm / norm when the global L2 norm exceeds max_norm

    Returns:
        (clipped gradients, pre-clip global norm)
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    if not ad.all_finite(grads.values()):
        raise NonFiniteError("non-finite gradient")
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return {k: g.copy() for k, g in grads.items()}, norm


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
               lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """Adam with decoupled weight decay and bias correction"""
    b1, b2 = betas
    count = state.count + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** count)
        v_hat = v / (1.0 - b2 ** count)
        decayed = p * (1.0 - lr * weight_decay)
        new_params[name] = decayed - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, count)


# ===== TRAINING LOOP =====

def _batch_loss(model: VelocityModel, cfg: TrainConfig, batch: TrainBatch,
                rng: np.random.Generator, step: int) -> ad.DiffNode:
    if cfg.loss_kind == "cfm":
        return cfm_loss(model, batch, rng, cfg.p_uncond, cfg.p_prompt_drop, step=step)
    return mg_cfm_loss(model, batch, cfg.w, cfg.use_stop_gradient, rng, cfg.p_uncond,
                       cfg.p_prompt_drop, cfg.mg_target, step=step)


def train(cfg: TrainConfig, dataset: ConditionalDataset, arch: ModelArch,
          on_checkpoint: Optional[Callable[[int, VelocityModel], None]] = None,
          checkpoint_every: int = 0) -> Tuple[VelocityModel, TrainRecord]:
    """
    Optimise a freshly initialised model

    Every step draws its minibatch, times, noise and dropout from a stream
    seeded by (cfg.seed, step), so the run is a pure function of its inputs.

    Args:
        cfg: training configuration
        dataset: training items
        arch: model architecture (its prompt_dim must match the dataset)
        on_checkpoint: called with (step, model copy) every checkpoint_every steps

    Returns:
        (trained model, per-step record)

    Raises:
        TrainingDivergedError: a loss or gradient became non-finite
    """
    if arch.prompt_dim != dataset.prompt_dim:
        raise ValueError(f"model prompt_dim {arch.prompt_dim} != dataset prompt_dim {dataset.prompt_dim}")
    model = init_params(cfg.seed, arch)
    record = TrainRecord()
    # Zero steps returns the initial parameters untouched
    if cfg.total_steps == 0:
        return model, record
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")

    logger.info(f"Training {cfg.loss_kind} (w={cfg.w}, sg={cfg.use_stop_gradient}) for {cfg.total_steps} steps, "
                f"{model.num_parameters} parameters")
    state = AdamState.zeros_like(model.params)
    start_time = time.time()
    per_step_passes = cfg.batch_size * cfg.forward_passes_per_item

    for step in range(1, cfg.total_steps + 1):
        # Minibatch, times, noise and dropout all come from this step's stream
        rng = np.random.default_rng([cfg.seed, step])
        index = rng.integers(0, len(dataset), size=cfg.batch_size)
        batch = TrainBatch(dataset.x[index], dataset.condition_batch(index))
        lr = lr_schedule(step, cfg)
        try:
            loss = _batch_loss(model, cfg, batch, rng, step)
            loss_value = float(loss.value)
            grads, norm = clip_grad_norm(param_grads(loss), cfg.grad_clip_norm)
        except NonFiniteError as e:
            # Record the failing step, then hand the partial record to the caller
            logger.error(f"Training aborted at step {step}: {e}")
            record.append(step, float("nan"), float("nan"), lr, True, per_step_passes)
            raise TrainingDivergedError(record.last_finite_step, record, e) from e

        # Spike: loss above divergence_factor x the mean of the last window losses
        window = record.loss[-cfg.divergence_window:]
        spiked = len(window) == cfg.divergence_window and loss_value > cfg.divergence_factor * float(np.mean(window))
        if spiked:
            logger.warning(f"Loss spike at step {step}: {loss_value:.4g} vs moving average {np.mean(window):.4g}")

        # Fresh arrays every step; params are never updated in place
        params, state = adamw_step(model.params, grads, state, lr, cfg.betas, cfg.eps, cfg.weight_decay)
        model = VelocityModel(arch, params)
        record.append(step, loss_value, norm, lr, spiked, per_step_passes)

        if cfg.log_every and step % cfg.log_every == 0:
            logger.info(f"step {step}/{cfg.total_steps} loss {loss_value:.4f} grad_norm {norm:.3f} lr {lr:.2e}")
        if on_checkpoint is not None and checkpoint_every and step % checkpoint_every == 0:
            on_checkpoint(step, model.copy())

    logger.info(f"Training finished in {time.time() - start_time:.1f}s, final loss {record.loss[-1]:.4f}, "
                f"{record.total_forward_passes} training forward passes")
    return model, record
