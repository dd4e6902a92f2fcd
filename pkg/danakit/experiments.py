"""Experiment drivers: dataset generation, training, sweeps and evaluation.

An experiment is described by a JSON document (see README.md) parsed into an
ExperimentConfig. The drivers here glue the library together and write the
artifacts of each step into an output directory:

  gen-data   dataset directory (see storage)
  train      checkpoint/, report.json, timings.csv
  sweep      sweep.csv, sweep_summary.json
"""
__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import concurrent.futures
import contextlib
import json
import logging
import time
import typing
from os import path

import numpy as np

from danakit import baselines
from danakit import gradcheck
from danakit import layers
from danakit import model_parser
from danakit import render
from danakit import signals
from danakit import storage
from danakit import synthgen
from danakit import tensor
from danakit import training


class ConfigError(Exception):
    """An invalid experiment configuration."""


@contextlib.contextmanager
def log_time(label, log_func):
    """Log the wall time spent in a block."""
    start = time.perf_counter()
    yield
    log_func("Operation: {:48} Time: {:6.0f} ms".format(
        "'{}'".format(label), (time.perf_counter() - start) * 1000))


class ExperimentConfig(typing.NamedTuple):
    """An experiment.

    Attributes:
      synthetic: A SyntheticConfig to generate the data from, or None.
      directory: A dataset directory to read the data from, or None.
      model: A preset name or a model in layer notation.
      train: A TrainConfig; its seed is replaced by the experiment seed.
      sweep_rates: Rates of the sweep grid, in Hz.
      sweep_sensors: Sensor subsets of the sweep grid; None for the full set
        followed by every non-empty proper subset.
      baseline: Imputation mode of the pipeline in front of a fixed-dimension
        model during sweeps ('mean', 'copy', 'none'), or None for no pipeline.
      augment: Train on the copy-imputed augmented training set.
      normalize: Standardize windows with the training statistics.
      workers: Sweep cells evaluated concurrently.
      output: Output directory.
      seed: Seed of the model initialization and of training.
    """
    synthetic: typing.Optional[synthgen.SyntheticConfig] = None
    directory: typing.Optional[str] = None
    model: str = 'toy_dana'
    train: training.TrainConfig = training.TrainConfig()
    sweep_rates: tuple = (10.0, 20.0, 30.0, 40.0, 50.0)
    sweep_sensors: typing.Optional[tuple] = None
    baseline: typing.Optional[str] = None
    augment: bool = False
    normalize: bool = False
    workers: int = 1
    output: str = 'out'
    seed: int = 0

    def validate(self):
        """Raise ConfigError on inconsistent fields; return self."""
        if (self.synthetic is None) == (self.directory is None):
            raise ConfigError("Exactly one of data.synthetic and data.directory must be set")
        if not self.sweep_rates or min(self.sweep_rates) <= 0:
            raise ConfigError(f"Invalid sweep rates {self.sweep_rates}")
        if self.baseline is not None and self.baseline not in baselines.IMPUTATIONS:
            raise ConfigError(f"Unknown baseline '{self.baseline}'; "
                              f"choose from {baselines.IMPUTATIONS}")
        if self.workers < 1 or self.seed < 0:
            raise ConfigError("workers must be positive and seed not negative")
        if self.sweep_sensors is not None and not all(self.sweep_sensors):
            raise ConfigError("Sweep sensor subsets must not be empty")
        if self.model not in layers.PRESETS:
            try:
                layers.compile_spec(self.model)
            except (layers.SpecError, model_parser.ParseError) as exc:
                raise ConfigError(f"Invalid model '{self.model}': {exc}") from None
        return self

    def with_seed(self, seed):
        """Replace the seed of the experiment and of the synthetic data."""
        synthetic = None if self.synthetic is None else self.synthetic._replace(seed=seed)
        return self._replace(seed=seed, synthetic=synthetic)

    @property
    def train_config(self):
        return self.train._replace(seed=self.seed)

    @classmethod
    def from_json(cls, json):
        """Build a config from a parsed JSON document.

        Raises:
          ConfigError: On unknown keys or invalid values.
        """
        known = {'data', 'model', 'train', 'sweep', 'augment', 'normalize', 'output', 'seed'}
        unknown = set(json).difference(known)
        if unknown:
            raise ConfigError(f"Unknown experiment keys {sorted(unknown)}")
        fields = {key: json[key] for key in ('model', 'augment', 'normalize', 'output', 'seed')
                  if key in json}
        data = json.get('data', {})
        if set(data).difference({'synthetic', 'directory'}):
            raise ConfigError(f"Unknown data keys {sorted(data)}")
        try:
            if 'synthetic' in data:
                fields['synthetic'] = synthgen.SyntheticConfig.from_json(data['synthetic'])
            fields['train'] = training.TrainConfig.from_json(json.get('train', {}))
        except (synthgen.ConfigurationError, training.ConfigurationError) as exc:
            raise ConfigError(str(exc)) from None
        fields['directory'] = data.get('directory')
        sweep = json.get('sweep', {})
        if set(sweep).difference({'rates', 'sensors', 'baseline', 'workers'}):
            raise ConfigError(f"Unknown sweep keys {sorted(sweep)}")
        if 'rates' in sweep:
            fields['sweep_rates'] = tuple(float(rate) for rate in sweep['rates'])
        if sweep.get('sensors') is not None:
            fields['sweep_sensors'] = tuple(tuple(subset) for subset in sweep['sensors'])
        fields['baseline'] = sweep.get('baseline')
        fields['workers'] = sweep.get('workers', 1)
        return cls(**fields).validate()

    @classmethod
    def load(cls, filename):
        try:
            with open(filename, encoding='utf-8') as infile:
                document = json.load(infile)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Invalid JSON in {filename}: {exc}") from None
        return cls.from_json(document)


def load_data(config):
    """Return the (train, test) datasets of an experiment."""
    if config.synthetic is not None:
        with log_time('synthgen.generate_dataset', logging.info):
            return synthgen.generate_dataset(config.synthetic)
    return (storage.read_dataset(config.directory, 'train'),
            storage.read_dataset(config.directory, 'test'))


def cmd_gen_data(config, overwrite=False):
    """Generate the synthetic dataset of an experiment into its output directory.

    Returns:
      The written manifest.
    Raises:
      ConfigError: If the experiment does not describe synthetic data.
      FileExistsError: If the output directory is not empty and overwrite is false.
    """
    if config.synthetic is None:
        raise ConfigError("gen-data needs a synthetic data section")
    storage.prepare_directory(config.output, overwrite)
    train, test = load_data(config)
    manifest = storage.write_dataset(config.output, [train, test], overwrite=True)
    for dataset in (train, test):
        pearson = dataset.manifest['pearson']
        if pearson is not None:
            logging.info("%s: mean |Pearson| %.3f +/- %.3f", dataset.split,
                         pearson['mean'], pearson['std'])
    return manifest


def _normalized(dataset, stats):
    return dataset._replace(data=(dataset.data - stats.mean) / stats.std)


def prepare_data(config, train, test):
    """Apply normalization; return (train, test, stats, norm).

    The statistics `stats` are those of the training split as it is fed to
    the model, and serve mean imputation; constant streams are allowed in
    them. `norm` holds the statistics the splits were standardized with, or
    None without normalization, and must have positive std everywhere.
    """
    norm = None
    if config.normalize:
        norm = signals.NormStats.from_windows(train.data)
        train, test = _normalized(train, norm), _normalized(test, norm)
    stats = signals.NormStats.from_windows(train.data, require_spread=False)
    return train, test, stats, norm


class TrainOutcome(typing.NamedTuple):
    spec: layers.ModelSpec
    params: layers.ParameterSet
    report: training.TrainingReport
    evaluation: training.Evaluation


def check_training_dimensions(spec, train_config, dataset):
    if spec.adaptive:
        return
    native = (dataset.rate_hz,)
    if tuple(train_config.rates) != native or train_config.sensor_policy != 'all':
        raise ConfigError(
            f"A model without DAP trains at its native dimensions only; set train.rates to "
            f"{list(native)} and train.sensor_policy to 'all'")


def train_model(config, train, test):
    """Build and fit the model of an experiment on prepared datasets."""
    spec = layers.resolve(config.model, len(train.classes))
    train_config = config.train_config
    check_training_dimensions(spec, train_config, train)
    if train_config.trainer == 'standard' and train_config.batches_per_round != 1:
        logging.warning("batches_per_round=%d is ignored by the standard trainer",
                        train_config.batches_per_round)
    if config.augment:
        train = baselines.augment_dataset(train)
    params = layers.build_model(spec, train.data.shape[2], config.seed,
                                samples=train.data.shape[1])
    with log_time(f'training.fit ({train_config.trainer})', logging.info):
        result = training.fit(spec, params, train, train_config, validation=test)
    evaluation = training.evaluate(spec, result.params, test, train_config.eval_batch_size)
    return TrainOutcome(spec, result.params, result.report, evaluation), result.seconds


def checkpoint_metadata(config, train, stats, norm):
    return {
        'model': config.model,
        'trainer': config.train.trainer,
        'seed': config.seed,
        'rate_hz': train.rate_hz,
        'duration_s': train.duration_s,
        'sensors': list(train.sensors),
        'classes': list(train.classes),
        'axes_per_sensor': train.axes_per_sensor,
        'normalization': None if norm is None else norm.to_json(),
        'stats': stats.to_json(),
        'train': config.train_config.to_json(),
    }


TIMING_COLUMNS = [('epoch', int), ('seconds', float)]


def cmd_train(config):
    """Train the model of an experiment and write its artifacts.

    Writes <output>/checkpoint/, <output>/report.json (deterministic) and
    <output>/timings.csv (wall time per epoch).

    Returns:
      A TrainOutcome.
    """
    train, test = load_data(config)
    train, test, stats, norm = prepare_data(config, train, test)
    outcome, seconds = train_model(config, train, test)
    storage.prepare_directory(config.output, overwrite=True)
    storage.write_checkpoint(path.join(config.output, 'checkpoint'), outcome.spec,
                             outcome.params, checkpoint_metadata(config, train, stats, norm))
    report = outcome.report.to_json()
    report.update({
        'model': outcome.spec.notation(),
        'parameters': outcome.params.count(),
        'digest': outcome.params.digest(),
        'test': outcome.evaluation._asdict(),
    })
    storage.write_json(path.join(config.output, 'report.json'), report)
    with open(path.join(config.output, 'timings.csv'), 'w', encoding='utf-8') as outfile:
        render.render_csv(TIMING_COLUMNS, list(enumerate(seconds, start=1)), outfile)
    logging.info("Test accuracy %.4f after %d epochs", outcome.evaluation.accuracy,
                 len(outcome.report.epochs))
    return outcome


# Sweeps.

class SweepRow(typing.NamedTuple):
    """Evaluation of a model at one (rate, sensors) cell.

    Attributes:
      rate_hz: The cell's sampling rate.
      sensors: The cell's sensor subset.
      model: The model name.
      trainer: The trainer the model was trained with.
      accuracy: Test accuracy, None for a failed cell.
      loss: Test loss, None for a failed cell.
      seed: The experiment seed.
      per_class: Accuracy per class, None for a failed cell.
      error: The failure message, None for an evaluated cell.
    """
    rate_hz: float
    sensors: tuple
    model: str
    trainer: str
    accuracy: typing.Optional[float]
    loss: typing.Optional[float]
    seed: int
    per_class: typing.Optional[tuple] = None
    error: typing.Optional[str] = None


RESULT_COLUMNS = [('rate_hz', float), ('sensors', tuple), ('model', str), ('trainer', str),
                  ('accuracy', float), ('loss', float), ('seed', int)]


def default_subsets(sensors):
    """The full sensor set followed by every non-empty proper subset."""
    return [tuple(sensors)] + [tuple(sensors[index] for index in subset)
                               for subset in baselines.proper_subsets(len(sensors))]


def sweep_grid(config, dataset):
    """The (rate, sensors) cells of a sweep, in row order.

    Raises:
      ConfigError: If a rate exceeds the native rate or a subset names
        unknown sensors.
    """
    if max(config.sweep_rates) > dataset.rate_hz:
        raise ConfigError(f"Sweep rates {list(config.sweep_rates)} exceed the native "
                          f"{dataset.rate_hz} Hz")
    subsets = (default_subsets(dataset.sensors) if config.sweep_sensors is None
               else config.sweep_sensors)
    for subset in subsets:
        unknown = set(subset).difference(dataset.sensors)
        if unknown:
            raise ConfigError(f"Sweep subset names unknown sensors {sorted(unknown)}")
    return [training.Dimensions(rate, tuple(name for name in dataset.sensors if name in subset))
            for rate in config.sweep_rates for subset in subsets]


def evaluate_cell(spec, params, dataset, dimensions, pipeline=None, stats=None,
                  batch_size=256):
    """Evaluate a model on a dataset brought to one cell's dimensions.

    Returns:
      A training.Evaluation.
    Raises:
      DimensionError: If the model cannot take the cell's dimensions.
    """
    batch = training.transform_batch(dataset, dimensions)
    if pipeline is not None:
        batch = baselines.preprocess_dataset(batch, pipeline, stats)
    return training.evaluate(spec, params, batch, batch_size)


def run_sweep(spec, params, dataset, cells, labels, pipeline=None, stats=None, workers=1):
    """Evaluate every cell; failed cells become failure rows.

    Args:
      spec: A ModelSpec.
      params: Its ParameterSet.
      dataset: The test LabeledDataset at native dimensions.
      cells: A list of training.Dimensions.
      labels: A (model, trainer, seed) triple copied into every row.
      pipeline: A BaselinePipeline for fixed-dimension models, or None.
      stats: NormStats for mean imputation.
      workers: Cells evaluated concurrently; rows keep the cell order.
    Returns:
      A list of SweepRow, one per cell.
    """
    model, trainer_name, seed = labels
    def run(cell):
        try:
            evaluation = evaluate_cell(spec, params, dataset, cell, pipeline, stats)
        except (tensor.DimensionError, signals.TooShortError) as exc:
            return SweepRow(cell.rate_hz, cell.sensors, model, trainer_name, None, None, seed,
                            error=str(exc))
        return SweepRow(cell.rate_hz, cell.sensors, model, trainer_name, evaluation.accuracy,
                        evaluation.loss, seed, evaluation.per_class)
    if workers == 1:
        return [run(cell) for cell in cells]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(run, cells))


def summarize(rows):
    """Min, mean and max accuracy over the evaluated rows of a sweep."""
    accuracies = [row.accuracy for row in rows if row.accuracy is not None]
    summary = {'cells': len(rows), 'failures': len(rows) - len(accuracies)}
    if accuracies:
        summary.update({'min': float(np.min(accuracies)), 'mean': float(np.mean(accuracies)),
                        'max': float(np.max(accuracies))})
    summary['rows'] = [{'rate_hz': row.rate_hz, 'sensors': list(row.sensors),
                        'accuracy': row.accuracy, 'loss': row.loss,
                        'per_class': None if row.per_class is None else list(row.per_class),
                        'error': row.error}
                       for row in rows]
    return summary


def load_checkpoint(dirname):
    """Read a checkpoint with its training statistics.

    Returns:
      A (spec, params, metadata, stats) tuple.
    """
    spec, params, metadata = storage.read_checkpoint(dirname)
    stats = signals.NormStats.create(metadata['stats']['mean'], metadata['stats']['std'],
                                     require_spread=False)
    return spec, params, metadata, stats


def prepare_test(config, metadata):
    """The test split, standardized with the checkpoint's training statistics.

    On another dataset than the training one this is pseudo-normalization.
    """
    _, test = load_data(config)
    norm = metadata.get('normalization')
    if norm is not None:
        test = _normalized(test, signals.NormStats.create(norm['mean'], norm['std']))
    return test


def make_pipeline(config, spec, metadata):
    if spec.adaptive or config.baseline is None:
        return None
    return baselines.BaselinePipeline(metadata['rate_hz'], tuple(metadata['sensors']),
                                      config.baseline, spec).validate()


def cmd_sweep(config, checkpoint):
    """Evaluate a checkpoint over the sweep grid of an experiment.

    Writes <output>/sweep.csv and <output>/sweep_summary.json.

    Returns:
      The list of SweepRow.
    """
    spec, params, metadata, stats = load_checkpoint(checkpoint)
    test = prepare_test(config, metadata)
    cells = sweep_grid(config, test)
    train_rates = metadata['train']['rates']
    if spec.adaptive and min(config.sweep_rates) < min(train_rates):
        logging.warning("Sweep rates below %s Hz are outside the training rate set",
                        min(train_rates))
    labels = (metadata['model'], metadata['trainer'], metadata['seed'])
    with log_time(f'sweep ({len(cells)} cells)', logging.info):
        rows = run_sweep(spec, params, test, cells, labels,
                         make_pipeline(config, spec, metadata), stats, config.workers)
    storage.prepare_directory(config.output, overwrite=True)
    with open(path.join(config.output, 'sweep.csv'), 'w', encoding='utf-8') as outfile:
        render.render_csv(RESULT_COLUMNS, [row[:7] for row in rows], outfile)
    storage.write_json(path.join(config.output, 'sweep_summary.json'), summarize(rows))
    return rows


def cmd_eval(config, checkpoint, rate_hz=None, sensors=None):
    """Evaluate a checkpoint at a single cell; defaults to native dimensions.

    Returns:
      A SweepRow.
    """
    spec, params, metadata, stats = load_checkpoint(checkpoint)
    test = prepare_test(config, metadata)
    rate_hz = test.rate_hz if rate_hz is None else rate_hz
    if sensors and set(sensors).difference(test.sensors):
        raise ConfigError(f"Unknown sensors {sorted(set(sensors).difference(test.sensors))}")
    sensors = test.sensors if not sensors else tuple(name for name in test.sensors
                                                     if name in set(sensors))
    if rate_hz > test.rate_hz:
        raise ConfigError(f"Rate {rate_hz} Hz exceeds the native {test.rate_hz} Hz")
    row, = run_sweep(spec, params, test, [training.Dimensions(rate_hz, sensors)],
                     (metadata['model'], metadata['trainer'], metadata['seed']),
                     make_pipeline(config, spec, metadata), stats)
    return row


def cmd_gradcheck(seed=0, probes=100):
    """Run the gradient checks; return the list of gradcheck.CheckResult."""
    with log_time('gradcheck', logging.info):
        return gradcheck.run_all(seed, probes)


# Controlled study on synthetic data.

class StudyRow(typing.NamedTuple):
    seed: int
    model: str
    rate_hz: float
    sensors: tuple
    accuracy: typing.Optional[float]


STUDY_RATES = (10.0, 20.0, 30.0, 40.0, 50.0)


def controlled_study(setting, seeds=(0, 1, 2, 3, 4), epochs=100, per_class=(800, 200),
                     rates=STUDY_RATES, patience=20):
    """Compare a dimension-adaptive model with imputing fixed-dimension baselines.

    For every seed, a synthetic dataset of the given correlation setting is
    generated; the adaptive toy model is trained with dimension-adaptive
    training and the fixed toy model with standard training at native
    dimensions. Both are evaluated over the given rates x every sensor
    subset, the fixed model behind mean and copy imputation pipelines. The
    adaptive model always trains on STUDY_RATES.

    Returns:
      A list of StudyRow for models 'dana', 'original_mean' and 'original_copy'.
    """
    rows = []
    for seed in seeds:
        synthetic = synthgen.SyntheticConfig(setting=setting, train_per_class=per_class[0],
                                             test_per_class=per_class[1], seed=seed)
        base = ExperimentConfig(synthetic=synthetic, sweep_rates=rates, seed=seed)
        train, test = load_data(base)
        train, test, stats, _ = prepare_data(base, train, test)
        cells = sweep_grid(base, test)

        dana = base._replace(model='toy_dana', train=training.TrainConfig(
            epochs=epochs, batch_size=32, rates=STUDY_RATES, patience=patience))
        outcome, _ = train_model(dana, train, test)
        for row in run_sweep(outcome.spec, outcome.params, test, cells, ('dana', 'dat', seed)):
            rows.append(StudyRow(seed, 'dana', row.rate_hz, row.sensors, row.accuracy))

        original = base._replace(model='toy_original', train=training.TrainConfig(
            trainer='standard', epochs=epochs, batch_size=32, batches_per_round=1,
            rates=(train.rate_hz,), sensor_policy='all', patience=patience))
        outcome, _ = train_model(original, train, test)
        for imputation in ('mean', 'copy'):
            pipeline = baselines.BaselinePipeline(train.rate_hz, train.sensors, imputation,
                                                  outcome.spec)
            name = f'original_{imputation}'
            for row in run_sweep(outcome.spec, outcome.params, test, cells,
                                 (name, 'standard', seed), pipeline, stats):
                rows.append(StudyRow(seed, name, row.rate_hz, row.sensors, row.accuracy))
    return rows
