#!/usr/bin/env python3
"""
MedPatch experiment runner.

Chains the pipeline stages (data -> unimodal pretraining -> confidence heads
-> calibration -> fusion -> evaluation -> reports) over one output directory.
Usage:
    python medpatch.py gen-data --config cfg.json --out runs/a
    python medpatch.py run-all --out runs/a --seed 3 --progress
    python medpatch.py evaluate --out runs/a --replicates 2000

Every command prints one JSON line on stdout: {"success": true, ...} or
{"success": false, "error": ...}. Exit code 0 on success, 1 on invalid
input or configuration, 2 when a prerequisite stage has not been run.
"""

import json
import logging
import sys
from pathlib import Path

import click
from pydantic import ValidationError

from src._heartbeat import set_epoch_heartbeat
from src.config import apply_overrides, load_config, load_generator_config
from src.errors import ConfigError, PrerequisiteError
from src.pipeline import PIPELINE, run_all, run_stage

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

EXIT_INVALID = 1
EXIT_PREREQUISITE = 2


def _heartbeat_sink(stage: str, done: int, total: int) -> None:
    sys.stderr.write(f"HEARTBEAT:{stage}:{done}/{total}\n")
    sys.stderr.flush()


def _fail(message: str, code: int) -> None:
    logger.error(message)
    click.echo(json.dumps({"success": False, "error": message}))
    sys.exit(code)


def pipeline_options(func):
    """Options shared by every stage command."""
    options = [
        click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                     help='Experiment config (JSON)'),
        click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None,
                     help='Output directory (overrides config out_dir)'),
        click.option('--seed', type=int, default=None, help='Experiment seed'),
        click.option('--data', 'data_path', type=click.Path(dir_okay=False), default=None,
                     help='Embedding ingestion file (wins over --synth)'),
        click.option('--synth', 'synth_path', type=click.Path(dir_okay=False), default=None,
                     help='Synthetic generator config (JSON)'),
        click.option('--task', type=click.Choice(['mortality', 'conditions']), default=None),
        click.option('--ablation', type=click.IntRange(0, 4), default=None,
                     help='Ablation setting 1-4 (0 = full model)'),
        click.option('--theta', type=float, default=None, help='Confidence threshold θ'),
        click.option('--patching', type=click.Choice(['confidence', 'entropy']), default=None),
        click.option('--theta-entropy', 'theta_entropy', type=float, default=None,
                     help='Entropy threshold in bits (default: entropy at θ)'),
        click.option('--ece-bins', 'ece_bins', type=int, default=None),
        click.option('--replicates', type=int, default=None, help='Bootstrap replicates'),
        click.option('--metric-seed', 'metric_seed', type=int, default=None),
        click.option('--progress', is_flag=True, help='Print HEARTBEAT lines to stderr'),
        click.option('--verbose', '-v', is_flag=True, help='Debug logging'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _execute(action, config_path, out_dir, synth_path, progress, verbose, **overrides):
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        config = load_config(Path(config_path) if config_path else None)
        synth = load_generator_config(Path(synth_path)) if synth_path else None
        config = apply_overrides(config, synth=synth, out_dir=out_dir, **overrides)
        if not config.out_dir:
            raise ConfigError("no output directory: pass --out or set out_dir in the config")
        if progress:
            set_epoch_heartbeat(_heartbeat_sink)
        result = action(config, Path(config.out_dir))
    except PrerequisiteError as e:
        _fail(str(e), EXIT_PREREQUISITE)
    except (ValidationError, ValueError, KeyError, OSError, ArithmeticError, RuntimeError) as e:
        _fail(f"{type(e).__name__}: {e}", EXIT_INVALID)
    finally:
        set_epoch_heartbeat(None)
    click.echo(json.dumps({"success": True, **result}, default=str))


class JsonErrorGroup(click.Group):
    """Reports bad command lines as a JSON failure line with exit code 1."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            _fail(f"ConfigError: {e.format_message()}", EXIT_INVALID)


@click.group(cls=JsonErrorGroup)
def cli():
    """MedPatch multimodal fusion experiments"""
    pass


def _stage_command(stage: str, help_text: str):
    @pipeline_options
    def command(**kwargs):
        _execute(lambda config, out: run_stage(stage, config, out), **kwargs)

    command.__doc__ = help_text
    cli.command(name=stage)(command)


_stage_command('gen-data', 'Generate (or ingest) the dataset and its train/validation/test split.')
_stage_command('pretrain', 'Train the unimodal heads, one learning-rate sweep per modality.')
_stage_command('train-confidence', 'Train the token-level confidence heads.')
_stage_command('calibrate', 'Fit per-class temperatures on validation tokens.')
_stage_command('train-fusion', 'Train the fusion stage (and the early/joint baselines).')
_stage_command('evaluate', 'Score every predictor on the test split with bootstrap CIs.')
_stage_command('ablate', 'Train and score ablation settings 0-4.')
_stage_command('report-weights', 'Write the per-class fusion weights and the loss weights.')


@cli.command(name='run-all')
@pipeline_options
def run_all_command(**kwargs):
    """Run every pipeline stage in order (ablations excluded)."""
    def action(config, out):
        results = run_all(config, out)
        return {"stages": [r["stage"] for r in results], "results": results}
    _execute(action, **kwargs)


@cli.command(name='stages')
def list_stages():
    """List pipeline stages in run order."""
    click.echo(json.dumps({"success": True, "stages": list(PIPELINE) + ["ablate"]}))


if __name__ == '__main__':
    cli()
