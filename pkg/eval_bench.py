"""
Evaluation Bench Module
Metrics and ablation harnesses for CFM vs model-guidance training

Quality is measured by the sliced 2-Wasserstein distance between generated
and exact class-conditional samples, condition fidelity by the Bayes
classifier of the target mixture (reported as a misclassification rate, lower
is better), and cost by exact model forward-pass counts plus wall clock.

Harnesses:
    run_grid          - training variant x CFG-at-inference x NFE, several seeds
    w_sweep           - model-guidance weight sweep, sampled without CFG
    sg_ablation       - stop-gradient on/off pair
    convergence_curve - metrics at intermediate training steps

Failed training runs and evaluations that blow up are recorded in the
outputs as diverged rows rather than aborting a harness.
"""

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from analytic_oracle import (GaussianMixtureSpec, analytic_cond_velocity, analytic_marginal_velocity,
                             bayes_classify, exact_sample)
from datasets import ConditionalDataset, DatasetSpec, infill_prompts
from errors import GFFMError, TrainingDivergedError
from flow_train import TrainConfig, TrainRecord, sample_path, train
from sampler import ModelField, SamplerConfig, label_batch, sample_field_batch
from velocity_model import ConditionBatch, ModelArch, VelocityModel, velocity_batch

logger = logging.getLogger(__name__)

GRID_COLUMNS = ["training", "cfg_infer", "nfe", "seed", "sw2", "misclass_rate",
                "forward_count", "wall_clock", "diverged"]
TRAINING_LABELS = {"cfm": "FM w/ CFG (CFM)", "mg_cfm": "FM w/o CFG (MG-CFM)"}


@dataclass
class EvalSettings:
    samples_per_label: int = 500
    n_proj: int = 128
    seed: int = 0


@dataclass
class MetricsReport:
    """
    Metrics of one (model, sampler) evaluation

    sliced_w2 is the mean of the per-label values; fidelity is the fraction
    of samples the Bayes classifier assigns to their requested label.
    """
    sliced_w2: float
    fidelity: float
    model_forward_count: int
    wall_clock_seconds: float
    fingerprint: str = ""
    per_label: Dict[int, Dict[str, float]] = field(default_factory=dict)
    training: str = ""
    cfg_infer: bool = False
    nfe: int = 0
    seed: int = 0
    diverged: bool = False

    @property
    def misclass_rate(self) -> float:
        return 1.0 - self.fidelity

    def as_row(self) -> Dict[str, object]:
        return {
            "training": self.training,
            "cfg_infer": int(self.cfg_infer),
            "nfe": self.nfe,
            "seed": self.seed,
            "sw2": self.sliced_w2,
            "misclass_rate": self.misclass_rate,
            "forward_count": self.model_forward_count,
            "wall_clock": self.wall_clock_seconds,
            "diverged": int(self.diverged),
        }


def fingerprint_of(*parts) -> str:
    """Stable sha256 over JSON-serialisable parts (wall clock must not be among them)"""
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


# ===== METRICS =====

def sliced_wasserstein(a: np.ndarray, b: np.ndarray, n_proj: int, rng: np.random.Generator) -> float:
    """
    Sliced 2-Wasserstein distance: sqrt of the mean, over n_proj random unit
    directions, of the squared 1-D W2 between the projected sample sets

    Equal-size sets use the sorted match; otherwise both sides are compared
    at common quantile levels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("sliced_wasserstein needs non-empty sample sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    # Random unit directions, shared by both sample sets
    directions = rng.standard_normal((n_proj, a.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    pa = np.sort(a @ directions.T, axis=0)
    pb = np.sort(b @ directions.T, axis=0)
    # Unequal sizes: compare at m common quantile levels
    if pa.shape[0] != pb.shape[0]:
        m = max(pa.shape[0], pb.shape[0])
        levels = (np.arange(m) + 0.5) / m
        pa = np.quantile(pa, levels, axis=0)
        pb = np.quantile(pb, levels, axis=0)
    w2_sq = np.mean((pa - pb) ** 2, axis=0)
    return float(np.sqrt(np.mean(w2_sq)))


def condition_fidelity(samples: np.ndarray, requested_labels: Sequence[int],
                       spec: GaussianMixtureSpec) -> Tuple[float, Dict[int, float]]:
    """
    Fraction of samples whose Bayes label equals the requested label

    Returns:
        (overall fidelity, per-label fidelity)
    """
    requested = np.asarray(requested_labels)
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if requested.size == 0:
        raise ValueError("condition_fidelity needs at least one sample")
    if samples.shape[0] != requested.shape[0]:
        raise ValueError(f"{samples.shape[0]} samples for {requested.shape[0]} labels")
    hits = bayes_classify(spec, samples) == requested
    per_label = {int(k): float(np.mean(hits[requested == k])) for k in np.unique(requested)}
    return float(np.mean(hits)), per_label


def eval_set(dataset_spec: DatasetSpec, settings: EvalSettings) -> Tuple[ConditionBatch, np.ndarray, np.ndarray]:
    """
    Balanced evaluation conditions and exact reference samples

    For infill datasets the prompts are masked copies of the reference
    samples themselves, so they never overlap the training items.

    Returns:
        (conditions, requested labels, reference samples)
    """
    mixture = dataset_spec.mixture
    # Own stream, independent of the sampler and training seeds
    rng = np.random.default_rng([settings.seed, 7919])
    labels = np.repeat(np.arange(mixture.num_components), settings.samples_per_label)
    reference = exact_sample(mixture, labels, rng)
    if dataset_spec.kind == "infill":
        prompts, _ = infill_prompts(reference, rng, dataset_spec.mask_lo, dataset_spec.mask_hi)
        conds = ConditionBatch(labels.astype(np.int64), prompts, np.ones(len(labels)))
    else:
        conds = label_batch(labels, mixture.num_components)
    return conds, labels, reference


def evaluate_field(field_fn, dataset_spec: DatasetSpec, sampler_cfg: SamplerConfig,
                   settings: EvalSettings, fingerprint: str = "") -> MetricsReport:
    """Sample one batch from any field and score it against exact samples"""
    conds, labels, reference = eval_set(dataset_spec, settings)
    samples, counters = sample_field_batch(field_fn, conds, dataset_spec.dim, sampler_cfg)
    fidelity, per_label_fid = condition_fidelity(samples, labels, dataset_spec.mixture)

    per_label = {}
    for k in np.unique(labels):
        # Per-label projection stream keeps labels comparable across runs
        rng = np.random.default_rng([settings.seed, int(k)])
        sw2 = sliced_wasserstein(samples[labels == k], reference[labels == k], settings.n_proj, rng)
        per_label[int(k)] = {"sw2": sw2, "fidelity": per_label_fid[int(k)]}
    return MetricsReport(
        sliced_w2=float(np.mean([v["sw2"] for v in per_label.values()])),
        fidelity=fidelity,
        model_forward_count=counters.model_forward_count,
        wall_clock_seconds=counters.wall_clock_seconds,
        fingerprint=fingerprint,
        per_label=per_label,
        cfg_infer=sampler_cfg.cfg_enabled,
        nfe=sampler_cfg.nfe,
        seed=sampler_cfg.seed,
    )


def evaluate_model(model: VelocityModel, dataset_spec: DatasetSpec, sampler_cfg: SamplerConfig,
                   settings: EvalSettings, fingerprint: str = "") -> MetricsReport:
    return evaluate_field(ModelField(model), dataset_spec, sampler_cfg, settings, fingerprint)


def field_mse(model: VelocityModel, mixture: GaussianMixtureSpec, rng: np.random.Generator,
              n_per_time: int = 256, n_times: int = 10, t_max: float = 0.95) -> Dict[str, float]:
    """
    Mean squared error of the learned field against the analytic fields on
    path samples at n_times evenly spaced times in [0, t_max]

    Labelled rows are compared with the conditional field, the same points
    under the null condition with the marginal field.
    """
    k, prompt_dim = model.arch.num_classes, model.arch.prompt_dim
    cond_err, marg_err = [], []
    # t_max < 1 stays clear of the singular endpoint of the analytic field
    for t in np.linspace(0.0, t_max, n_times):
        labels = rng.choice(mixture.num_components, size=n_per_time, p=mixture.weights)
        x1 = exact_sample(mixture, labels, rng)
        x_t, _ = sample_path(x1, rng.standard_normal(x1.shape), t)
        v_c = velocity_batch(model, x_t, t, label_batch(labels, k, prompt_dim))
        v_u = velocity_batch(model, x_t, t, label_batch([None] * n_per_time, k, prompt_dim))
        cond_err.append(np.sum((v_c - analytic_cond_velocity(mixture, labels, x_t, t)) ** 2, axis=1))
        marg_err.append(np.sum((v_u - analytic_marginal_velocity(mixture, x_t, t)) ** 2, axis=1))
    return {"conditional": float(np.mean(cond_err)), "marginal": float(np.mean(marg_err))}


# ===== HARNESSES =====

def _train_guarded(cfg: TrainConfig, dataset: ConditionalDataset, arch: ModelArch, **kwargs):
    """Train, turning divergence into a (None, record, error) outcome"""
    try:
        model, record = train(cfg, dataset, arch, **kwargs)
        return model, record, None
    except TrainingDivergedError as e:
        logger.error(f"Training {cfg.loss_kind} w={cfg.w} seed={cfg.seed} diverged: {e}")
        return None, e.record, e


def _evaluate_guarded(model: VelocityModel, dataset_spec: DatasetSpec, sampler_cfg: SamplerConfig,
                      settings: EvalSettings, fingerprint: str = "") -> Optional[MetricsReport]:
    """Evaluate, turning a blown-up integration into None"""
    try:
        return evaluate_model(model, dataset_spec, sampler_cfg, settings, fingerprint)
    except GFFMError as e:
        logger.error(f"Evaluation at nfe={sampler_cfg.nfe} cfg={sampler_cfg.cfg_enabled} failed: {e}")
        return None


def _diverged_report(training: str, cfg_infer: bool, nfe: int, seed: int, fingerprint: str) -> MetricsReport:
    return MetricsReport(float("nan"), float("nan"), 0, 0.0, fingerprint, {}, training, cfg_infer, nfe, seed, True)


@dataclass
class GridResult:
    reports: List[MetricsReport]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.as_row() for r in self.reports], columns=GRID_COLUMNS)

    def summary(self) -> pd.DataFrame:
        """Seed-averaged metrics per (training, cfg_infer, nfe) cell"""
        frame = self.to_frame()
    # std is NaN for single-seed cells
        grouped = frame.groupby(["training", "cfg_infer", "nfe"], sort=False)
        summary = grouped.agg(
            sw2=("sw2", "mean"),
            sw2_std=("sw2", "std"),
            misclass_rate=("misclass_rate", "mean"),
            misclass_std=("misclass_rate", "std"),
            forward_count=("forward_count", "mean"),
            wall_clock=("wall_clock", "mean"),
            diverged=("diverged", "max"),
            seeds=("seed", "count"),
        ).reset_index()
        return summary

    def format_table(self) -> str:
        """Text table grouped like the reference comparison: training, then NFE, CFG on/off"""
        summary = self.summary()
        header = f"{'Training':<22} {'CFG in infer':<13} {'NFE':>4} {'SW2 ↓':>9} {'Misclass(%) ↓':>14} {'Fwd passes ↓':>13} {'Wall(s) ↓':>10}"
        lines = [header, "-" * len(header)]
        for training, block in summary.groupby("training", sort=False):
            label = TRAINING_LABELS.get(training, training)
            block = block.sort_values(["nfe", "cfg_infer"], ascending=[False, False])
            for _, row in block.iterrows():
                mark = "yes" if row["cfg_infer"] else "no"
                flag = " (diverged)" if row["diverged"] else ""
                lines.append(f"{label:<22} {mark:<13} {int(row['nfe']):>4} {row['sw2']:>9.4f} "
                             f"{100 * row['misclass_rate']:>14.2f} {int(row['forward_count']):>13} "
                             f"{row['wall_clock']:>10.3f}{flag}")
                label = ""
            lines.append("-" * len(header))
        return "\n".join(lines)


def run_grid(train_variants: Mapping[str, TrainConfig], infer_variants: Sequence[bool],
             nfe_list: Sequence[int], dataset: ConditionalDataset, dataset_spec: DatasetSpec,
             arch: ModelArch, seeds: Sequence[int], sampler_template: SamplerConfig,
             settings: EvalSettings, workers: int = 1, base_fingerprint: str = "") -> GridResult:
    """
    Training variant x CFG-at-inference x NFE grid

    Each (variant, seed) job trains once with cfg.seed = seed and then
    evaluates every inference cell with a sampler seeded by the same seed.
    Jobs run on a bounded thread pool; report order is fixed by the inputs.
    """
    for cfg in train_variants.values():
        if cfg.total_steps < 0:
            raise ValueError("invalid training config")
    jobs = [(name, seed) for name in train_variants for seed in seeds]
    logger.info(f"Grid: {len(train_variants)} training variants x {len(infer_variants)} inference modes x "
                f"{len(nfe_list)} NFE values x {len(seeds)} seeds")

    def run_job(job):
        name, seed = job
        started = time.time()
        cfg = replace(train_variants[name], seed=seed)
        model, record, error = _train_guarded(cfg, dataset, arch)
        reports = []
        for nfe in nfe_list:
            for cfg_on in infer_variants:
                fp = fingerprint_of(base_fingerprint, name, bool(cfg_on), int(nfe), int(seed))
                # an aborted run still fills its cells so the grid keeps its shape
                if model is None:
                    reports.append(_diverged_report(name, cfg_on, nfe, seed, fp))
                    continue
                sampler_cfg = replace(sampler_template, nfe=nfe, cfg_enabled=bool(cfg_on), seed=seed)
                report = _evaluate_guarded(model, dataset_spec, sampler_cfg, settings, fp)
                if report is None:
                    reports.append(_diverged_report(name, cfg_on, nfe, seed, fp))
                    continue
                report.training, report.diverged = name, record.any_diverged
                reports.append(report)
        logger.info(f"Grid job {name} seed {seed} completed in {time.time() - started:.1f}s")
        return reports

    # pool.map keeps job order, so rows do not depend on the worker count
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run_job, jobs))
    return GridResult([r for job_reports in results for r in job_reports])


@dataclass
class SweepResult:
    rows: List[Dict[str, object]]
    records: Dict[float, TrainRecord]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)


def _training_summary(record: Optional[TrainRecord], error, eval_failed: bool = False) -> Dict[str, object]:
    record = record or TrainRecord()
    finite = [l for l in record.loss if np.isfinite(l)]
    return {
        "aborted": int(error is not None),
        "diverged": int(error is not None or eval_failed or record.any_diverged),
        "last_finite_step": record.last_finite_step,
        "final_loss": finite[-1] if finite else float("nan"),
        "max_grad_norm": float(np.nanmax(record.grad_norm)) if record.grad_norm else float("nan"),
        "train_forward_passes": record.total_forward_passes,
    }


def _metric_columns(report: Optional[MetricsReport]) -> Dict[str, object]:
    if report is None:
        return {"sw2": float("nan"), "misclass_rate": float("nan"), "forward_count": 0, "wall_clock": 0.0}
    return {"sw2": report.sliced_w2, "misclass_rate": report.misclass_rate,
            "forward_count": report.model_forward_count, "wall_clock": report.wall_clock_seconds}


def w_sweep(w_list: Sequence[float], train_template: TrainConfig, dataset: ConditionalDataset,
            dataset_spec: DatasetSpec, arch: ModelArch, sampler_cfg: SamplerConfig,
            settings: EvalSettings, workers: int = 1, base_fingerprint: str = "") -> SweepResult:
    """
    Train one model-guidance model per w and evaluate it without CFG

    Divergence is captured per w; the sweep always returns len(w_list) rows.
    """
    if not w_list:
        raise ValueError("w_sweep needs at least one w")
    sampler_cfg = replace(sampler_cfg, cfg_enabled=False)

    def run_one(w):
        cfg = replace(train_template, loss_kind="mg_cfm", w=float(w))
        model, record, error = _train_guarded(cfg, dataset, arch)
        report = None
        if model is not None:
            report = _evaluate_guarded(model, dataset_spec, sampler_cfg, settings,
                                       fingerprint_of(base_fingerprint, "w_sweep", float(w)))
        row = {"w": float(w), **_training_summary(record, error, model is not None and report is None),
               **_metric_columns(report)}
        logger.info(f"w={w}: {row}")
        return row, record

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run_one, w_list))
    return SweepResult([r for r, _ in results], {float(w): rec for w, (_, rec) in zip(w_list, results)})


def sg_ablation(train_cfg: TrainConfig, dataset: ConditionalDataset, dataset_spec: DatasetSpec,
                arch: ModelArch, sampler_cfg: SamplerConfig, settings: EvalSettings,
                base_fingerprint: str = "") -> pd.DataFrame:
    """
    Train the same model-guidance config with and without stop-gradient

    Both variants are sampled without CFG. Quality of the sg=false run is
    recorded, not judged.
    """
    if train_cfg.loss_kind != "mg_cfm":
        raise ValueError(f"sg_ablation needs loss_kind=mg_cfm, got {train_cfg.loss_kind}")
    sampler_cfg = replace(sampler_cfg, cfg_enabled=False)
    rows = []
    for use_sg in (True, False):
        # Same seed and data for both arms
        cfg = replace(train_cfg, use_stop_gradient=use_sg)
        model, record, error = _train_guarded(cfg, dataset, arch)
        report = None
        if model is not None:
            report = _evaluate_guarded(model, dataset_spec, sampler_cfg, settings,
                                       fingerprint_of(base_fingerprint, "sg_ablation", use_sg))
        rows.append({"sg": str(use_sg).lower(), "w": cfg.w,
                     **_training_summary(record, error, model is not None and report is None),
                     **_metric_columns(report)})
    return pd.DataFrame(rows)


def convergence_curve(variants: Mapping[str, Tuple[TrainConfig, SamplerConfig]], dataset: ConditionalDataset,
                      dataset_spec: DatasetSpec, arch: ModelArch, settings: EvalSettings,
                      eval_every: int) -> pd.DataFrame:
    """
    Metrics at every eval_every training steps for each variant

    Each variant pairs a training config with the sampler used to judge it,
    e.g. CFM sampled with CFG against MG-CFM sampled without.
    """
    if eval_every < 1:
        raise ValueError(f"eval_every must be >= 1, got {eval_every}")
    rows = []
    for name, (train_cfg, sampler_cfg) in variants.items():
        def on_checkpoint(step, model, name=name, sampler_cfg=sampler_cfg):
            report = _evaluate_guarded(model, dataset_spec, sampler_cfg, settings)
            rows.append({"variant": name, "step": step, **_metric_columns(report)})
        _train_guarded(train_cfg, dataset, arch, on_checkpoint=on_checkpoint, checkpoint_every=eval_every)
    return pd.DataFrame(rows, columns=["variant", "step", "sw2", "misclass_rate", "forward_count"])


def write_plot_data(path: Union[str, Path], x: Sequence[float], y: Sequence[float], header: str) -> Path:
    """Two-column whitespace-separated text file for external plotting tools"""
    path = Path(path)
    np.savetxt(path, np.column_stack([np.asarray(x, dtype=float), np.asarray(y, dtype=float)]),
               header=header, fmt="%.10g")
    return path
