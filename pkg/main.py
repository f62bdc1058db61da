"""
Main Script for the Flow-Matching Guidance Lab
Command-line interface for training, sampling and benchmarking

Subcommands:
1. train   - train one model from a run config, write checkpoint and loss curve
2. sample  - draw samples from a checkpoint
3. eval    - score a checkpoint against the analytic mixture
4. grid    - training variant x CFG-at-inference x NFE comparison table
5. sweep   - model-guidance weight sweep
6. ablate  - stop-gradient on/off pair
7. curve   - metrics against training steps for CFM and MG-CFM

Every artifact file name embeds the run-config fingerprint. On failure the
command prints a single `error: <reason>` line to stderr and exits non-zero.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from config import GFFM_OUTPUT_DIR, GFFM_SEED, GFFM_WORKERS, LOG_FILE, LOG_LEVEL
from datasets import make_dataset
from errors import GFFMError, TrainingDivergedError
from eval_bench import (convergence_curve, eval_set, evaluate_model, fingerprint_of, run_grid, sg_ablation,
                        w_sweep, write_plot_data)
from flow_train import train
from results_store import ResultsStore
from run_config import (RunConfig, dataset_spec, eval_settings, fingerprint, model_arch, parse_config,
                        sampler_config, serialize_config, train_config)
from sampler import sample_batch, write_samples_csv
from velocity_model import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


class CommandError(GFFMError):
    """A precondition of a subcommand does not hold"""


def configure_logging():
    """Dual logging setup: file for later inspection, console for live runs"""
    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(LOG_FILE),
            logging.StreamHandler()
        ]
    )


def build_parser() -> argparse.ArgumentParser:
    # Main parser with a usage epilog
    parser = argparse.ArgumentParser(
        description="Flow-matching guidance lab - CFM vs model-guidance training on toy mixtures",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Train the configured model and write checkpoint + loss curve
  python main.py train --config run.cfg --out runs

  # Evaluate a checkpoint
  python main.py eval --config run.cfg --ckpt runs/model-<fp>.ckpt --out runs

  # Table-style comparison and w sweep
  python main.py grid --config run.cfg --out runs
  python main.py sweep --config run.cfg --w 0,0.3,0.5,0.7,1.0,2.0 --out runs
        """
    )
    # One subparser per command; all take --config and --out
    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    def add(name: str, help_text: str, ckpt: bool = False, store: bool = False) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument('--config', required=True, help='Run config file')
        sub.add_argument('--out', default=None, help='Output directory (default: config output_dir or GFFM_OUTPUT_DIR)')
        if ckpt:
            sub.add_argument('--ckpt', required=True, help='Checkpoint file')
        if store:
            sub.add_argument('--store', action='store_true', help='Also record results in GFFM_RESULTS_DB')
        return sub

    # ===== TRAINING AND SAMPLING =====
    add('train', 'Train a model')
    sample_parser = add('sample', 'Sample from a checkpoint', ckpt=True)
    sample_parser.add_argument('--per-label', type=int, default=None,
                               help='Samples per label (default: eval.samples_per_label)')

    # ===== EVALUATION AND HARNESSES =====
    add('eval', 'Evaluate a checkpoint', ckpt=True, store=True)
    add('grid', 'Training x inference x NFE grid', store=True)
    sweep_parser = add('sweep', 'Model-guidance weight sweep', store=True)
    sweep_parser.add_argument('--w', default=None, help='Comma-separated w values (default: eval.w_list)')
    add('ablate', 'Stop-gradient ablation', store=True)
    add('curve', 'Metrics against training steps')
    return parser


# ===== HELPERS =====

def load_run_config(args) -> RunConfig:
    """Parse the config and apply the GFFM_SEED override"""
    return parse_config(args.config).with_seed(GFFM_SEED)


def output_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output_dir or GFFM_OUTPUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def workers(cfg: RunConfig) -> int:
    return cfg.eval.workers or GFFM_WORKERS


def store_results(cfg: RunConfig, command: str, frame: pd.DataFrame):
    store = ResultsStore()
    # The ledger is optional; close it even when recording fails
    try:
        fp = fingerprint(cfg)
        if store.record_run(fp, command, serialize_config(cfg)):
            store.record_metrics(fp, frame)
    finally:
        store.close()


def train_config_for(cfg: RunConfig, loss_kind: str):
    """Training config of the run with the loss kind swapped"""
    return train_config(cfg.model_copy(update={'train': cfg.train.model_copy(update={'loss_kind': loss_kind})}))


def load_model(args, cfg: RunConfig):
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise CommandError("checkpoint not found")
    return load_checkpoint(ckpt, expected_arch=model_arch(cfg))


def _parse_w_list(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise CommandError(f"invalid --w list {text!r}")
    if not values or any(v < 0 for v in values):
        raise CommandError(f"--w needs non-negative values, got {text!r}")
    return values


# ===== COMMANDS =====

def cmd_train(args) -> Dict[str, Path]:
    cfg = load_run_config(args)
    out, fp = output_dir(args, cfg), fingerprint(cfg)
    spec = dataset_spec(cfg)
    dataset = make_dataset(spec)
    try:
        model, record = train(train_config(cfg), dataset, model_arch(cfg))
    except TrainingDivergedError as e:
        # Keep the partial loss record next to where the checkpoint would go
        if e.record is not None:
            e.record.to_csv(out / f"train-{fp}.csv")
        raise
    artifacts = {
        'checkpoint': save_checkpoint(model, out / f"model-{fp}.ckpt"),
        'train_csv': record.to_csv(out / f"train-{fp}.csv"),
        'loss_curve': write_plot_data(out / f"loss_curve-{fp}.dat", record.step, record.loss, "step loss"),
    }
    return artifacts


def cmd_sample(args) -> Dict[str, Path]:
    cfg = load_run_config(args)
    out, fp = output_dir(args, cfg), fingerprint(cfg)
    model = load_model(args, cfg)
    settings = eval_settings(cfg)
    # --per-label overrides the eval setting for this call only
    if args.per_label is not None:
        if args.per_label < 1:
            raise CommandError("--per-label must be >= 1")
        settings.samples_per_label = args.per_label
    # Sample the same balanced conditions the evaluation uses
    conds, _, _ = eval_set(dataset_spec(cfg), settings)
    samples, counters = sample_batch(model, conds, sampler_config(cfg))
    logger.info(f"Drew {len(samples)} samples with {counters.model_forward_count} forward passes")
    return {'samples': write_samples_csv(samples, conds, model.arch.num_classes, out / f"samples-{fp}.csv")}


def cmd_eval(args) -> Dict[str, Path]:
    cfg = load_run_config(args)
    out, fp = output_dir(args, cfg), fingerprint(cfg)
    model = load_model(args, cfg)
    report = evaluate_model(model, dataset_spec(cfg), sampler_config(cfg), eval_settings(cfg),
                            fingerprint_of(fp, 'eval'))
    report.training = cfg.train.loss_kind
    frame = pd.DataFrame([report.as_row()])
    per_label = pd.DataFrame([{'label': k, **v} for k, v in report.per_label.items()])
    # Headline row plus one row per label
    artifacts = {
        'metrics': out / f"metrics-{fp}.csv",
        'metrics_per_label': out / f"metrics_per_label-{fp}.csv",
    }
    frame.to_csv(artifacts['metrics'], index=False)
    per_label.to_csv(artifacts['metrics_per_label'], index=False)
    print(f"sw2={report.sliced_w2:.4f} misclass={100 * report.misclass_rate:.2f}% "
          f"forward_passes={report.model_forward_count}")
    if args.store:
        store_results(cfg, 'eval', frame)
    return artifacts


def cmd_grid(args) -> Dict[str, Path]:
    cfg = load_run_config(args)
    out, fp = output_dir(args, cfg), fingerprint(cfg)
    spec = dataset_spec(cfg)
    dataset = make_dataset(spec)
    # Both training variants share the run config apart from the loss kind
    variants = {kind: train_config_for(cfg, kind) for kind in ('cfm', 'mg_cfm')}
    result = run_grid(variants, [True, False], cfg.eval.nfe_list, dataset, spec, model_arch(cfg),
                      cfg.eval.seeds, sampler_config(cfg), eval_settings(cfg), workers(cfg), fp)
    frame = result.to_frame()
    artifacts = {
        'grid': out / f"grid-{fp}.csv",
        'grid_summary': out / f"grid_summary-{fp}.csv",
        'grid_table': out / f"grid_table-{fp}.txt",
    }
    frame.to_csv(artifacts['grid'], index=False)
    result.summary().to_csv(artifacts['grid_summary'], index=False)
    # The text table is printed as well as written
    table = result.format_table()
    artifacts['grid_table'].write_text(table + "\n")
    print(table)
    if args.store:
        store_results(cfg, 'grid', frame)
    return artifacts


def cmd_sweep(args) -> Dict[str, Path]:
    cfg = load_run_config(args)
    out, fp = output_dir(args, cfg), fingerprint(cfg)
    # --w replaces eval.w_list
    w_list = _parse_w_list(args.w) if args.w else cfg.eval.w_list
    spec = dataset_spec(cfg)
    result = w_sweep(w_list, train_config(cfg), make_dataset(spec), spec, model_arch(cfg),
                     sampler_config(cfg), eval_settings(cfg), workers(cfg), fp)
    frame = result.to_frame()
    artifacts = {
        'sweep': out / f"sweep-{fp}.csv",
        'w_sweep_sw2': write_plot_data(out / f"w_sweep_sw2-{fp}.dat", frame['w'], frame['sw2'], "w sw2"),
        'w_sweep_misclass': write_plot_data(out / f"w_sweep_misclass-{fp}.dat", frame['w'],
                                            frame['misclass_rate'], "w misclass_rate"),
    }
    frame.to_csv(artifacts['sweep'], index=False)
    # Sweep rows carry no training or cfg columns of their own
    if args.store:
        store_results(cfg, 'sweep', frame.assign(training='mg_cfm', cfg_infer=False))
    return artifacts


def cmd_ablate(args) -> Dict[str, Path]:
    cfg = load_run_config(args)
    out, fp = output_dir(args, cfg), fingerprint(cfg)
    spec = dataset_spec(cfg)
    frame = sg_ablation(train_config(cfg), make_dataset(spec), spec, model_arch(cfg),
                        sampler_config(cfg), eval_settings(cfg), fp)
    path = out / f"sg_ablation-{fp}.csv"
    frame.to_csv(path, index=False)
    if args.store:
        store_results(cfg, 'ablate', frame.assign(training='mg_cfm', cfg_infer=False))
    return {'sg_ablation': path}


def cmd_curve(args) -> Dict[str, Path]:
    cfg = load_run_config(args)
    out, fp = output_dir(args, cfg), fingerprint(cfg)
    spec = dataset_spec(cfg)
    sampler = sampler_config(cfg)
    # CFM is judged with CFG, model guidance without
    variants = {
        'cfm': (train_config_for(cfg, 'cfm'), replace(sampler, cfg_enabled=True)),
        'mg_cfm': (train_config_for(cfg, 'mg_cfm'), replace(sampler, cfg_enabled=False)),
    }
    frame = convergence_curve(variants, make_dataset(spec), spec, model_arch(cfg), eval_settings(cfg),
                              cfg.eval.eval_every)
    artifacts = {'curve': out / f"curve-{fp}.csv"}
    frame.to_csv(artifacts['curve'], index=False)
    # One plot file per variant
    for name in variants:
        rows = frame[frame['variant'] == name]
        artifacts[f'curve_{name}'] = write_plot_data(out / f"curve_{name}-{fp}.dat", rows['step'],
                                                     rows['misclass_rate'], "step misclass_rate")
    return artifacts


COMMANDS = {
    'train': cmd_train,
    'sample': cmd_sample,
    'eval': cmd_eval,
    'grid': cmd_grid,
    'sweep': cmd_sweep,
    'ablate': cmd_ablate,
    'curve': cmd_curve,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, run one subcommand and map failures to an exit status

    Returns:
        0 when every artifact was written, 1 on a handled failure, 2 on usage errors
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 2

    # Dispatch to the command handler
    try:
        artifacts = COMMANDS[args.command](args)
    except KeyboardInterrupt:
        # Graceful shutdown on Ctrl+C
        logger.info("Operation cancelled by user")
        print("error: cancelled", file=sys.stderr)
        return 130
    except (GFFMError, ValueError, OSError) as e:
        # Expected failures become one error line and exit status 1
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1

    # Every artifact a command reports must exist on disk
    missing = [str(p) for p in artifacts.values() if not Path(p).is_file()]
    if missing:
        print(f"error: artifacts not written: {', '.join(missing)}", file=sys.stderr)
        return 1
    for name, path in artifacts.items():
        logger.info(f"Wrote {name}: {path}")
    return 0


# Entry point: only run main() if this script is executed directly
if __name__ == "__main__":
    configure_logging()
    sys.exit(main())
