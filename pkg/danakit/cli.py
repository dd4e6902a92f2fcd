"""Command-line entry point: dana gen-data | train | sweep | eval | gradcheck.
"""
__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import functools
import logging
import sys

import click

from danakit import experiments
from danakit import layers
from danakit import model_parser
from danakit import render
from danakit import signals
from danakit import storage
from danakit import synthgen
from danakit import tensor
from danakit import training


# Errors reported as a one-line message instead of a traceback.
USER_ERRORS = (experiments.ConfigError, training.ConfigurationError,
               synthgen.ConfigurationError, signals.ConfigurationError,
               signals.SelectionError, signals.TooShortError, storage.FormatError,
               layers.SpecError, model_parser.ParseError, tensor.DimensionError,
               FileExistsError, FileNotFoundError)


def reported(func):
    """Turn user errors raised by a command into click errors."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except USER_ERRORS as exc:
            raise click.ClickException(str(exc)) from exc
    return wrapper


def load_config(filename, seed, out):
    config = experiments.ExperimentConfig.load(filename)
    if seed is not None:
        config = config.with_seed(seed)
    if out is not None:
        config = config._replace(output=out)
    return config


def config_options(func):
    func = click.option('--out', '-o', type=click.Path(file_okay=False),
                        help="Output directory; overrides the config.")(func)
    func = click.option('--seed', '-s', type=click.IntRange(min=0),
                        help="Seed of the data, the model and training.")(func)
    func = click.option('--config', '-c', 'config_file', required=True,
                        type=click.Path(exists=True, dir_okay=False),
                        help="Experiment config (JSON).")(func)
    return func


@click.group()
@click.option('--verbose', '-v', is_flag=True, help="Log progress.")
@click.version_option()
def main(verbose):
    """Dimension-adaptive neural networks for wearable sensor data."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format='%(levelname)-8s: %(message)s', force=True)


@main.command('gen-data')
@config_options
@click.option('--overwrite', is_flag=True, help="Write into a non-empty directory.")
@reported
def gen_data(config_file, seed, out, overwrite):
    """Generate the synthetic dataset of an experiment."""
    config = load_config(config_file, seed, out)
    manifest = experiments.cmd_gen_data(config, overwrite)
    pearson = manifest['generator']['pearson']
    click.echo(f"Wrote {manifest['splits']} to {config.output}")
    if pearson is not None:
        click.echo(f"Mean |Pearson| between sensors: {pearson['mean']:.3f} "
                   f"+/- {pearson['std']:.3f}")


@main.command()
@config_options
@reported
def train(config_file, seed, out):
    """Train the model of an experiment and write a checkpoint."""
    config = load_config(config_file, seed, out)
    outcome = experiments.cmd_train(config)
    click.echo(f"Test accuracy {outcome.evaluation.accuracy:.4f} "
               f"(best epoch {outcome.report.best_epoch}); wrote {config.output}")


@main.command()
@config_options
@click.option('--checkpoint', required=True, type=click.Path(exists=True, file_okay=False),
              help="Checkpoint directory written by train.")
@reported
def sweep(config_file, seed, out, checkpoint):
    """Evaluate a checkpoint over a grid of rates and sensor subsets."""
    config = load_config(config_file, seed, out)
    rows = experiments.cmd_sweep(config, checkpoint)
    render.render_text(experiments.RESULT_COLUMNS, [row[:7] for row in rows], sys.stdout)
    failures = [row for row in rows if row.error is not None]
    for row in failures:
        logging.warning("%s Hz %s: %s", row.rate_hz, '+'.join(row.sensors), row.error)


@main.command('eval')
@config_options
@click.option('--checkpoint', required=True, type=click.Path(exists=True, file_okay=False),
              help="Checkpoint directory written by train.")
@click.option('--rate', type=click.FloatRange(min=0, min_open=True),
              help="Sampling rate in Hz; the native rate if omitted.")
@click.option('--sensors', help="Comma-separated sensor names; all sensors if omitted.")
@reported
def eval_(config_file, seed, out, checkpoint, rate, sensors):
    """Evaluate a checkpoint at a single rate and sensor subset.

    A fixed-dimension model is fed through the pipeline named by the
    config's sweep.baseline.
    """
    config = load_config(config_file, seed, out)
    names = [name.strip() for name in sensors.split(',')] if sensors else None
    row = experiments.cmd_eval(config, checkpoint, rate, names)
    if row.error is not None:
        raise click.ClickException(row.error)
    render.render_text(experiments.RESULT_COLUMNS, [row[:7]], sys.stdout)


@main.command()
@click.option('--seed', '-s', type=click.IntRange(min=0), default=0, show_default=True)
def gradcheck(seed):
    """Verify the backward pass against finite differences."""
    results = experiments.cmd_gradcheck(seed)
    columns = [('suite', str), ('check', str), ('probes', int), ('max_error', float),
               ('tolerance', float), ('result', str)]
    rows = [(result.suite, result.name, result.probes, result.max_error, result.tolerance,
             'ok' if result.passed else 'FAIL') for result in results]
    render.render_text(columns, rows, sys.stdout)
    failed = [result.name for result in results if not result.passed]
    if failed:
        raise click.ClickException(f"Gradient checks failed: {', '.join(failed)}")
