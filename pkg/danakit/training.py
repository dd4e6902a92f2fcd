"""Training procedures: dimension-adaptive training and its comparison trainers.

A training round draws one input dimension (sampling rate and sensor
subset) per batch, resamples and masks every window of the batch to it, and
updates the parameters. The trainers differ in how the batches of a round
become an update:

  dat         gradients of B batches are accumulated at fixed parameters,
              then a single optimizer step is taken with their mean.
  standard    one batch, one gradient, one optimizer step.
  weight_avg  B copies each take a standard step on their own batch; the
              parameters become the mean of the copies.
  reptile     as weight_avg, but the displacement towards the mean of the
              copies is fed to the optimizer in place of a gradient.
"""
__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import logging
import time
import typing

import numpy as np

from danakit import layers
from danakit import signals
from danakit import tensor


class ConfigurationError(Exception):
    """An invalid training configuration."""


# Named sensor-subset policies; see sensor_policy().
POLICIES = ('default', 'all', 'single')


class TrainConfig(typing.NamedTuple):
    """Parameters of a training run.

    Attributes:
      trainer: A name from TRAINERS.
      epochs: Maximum number of passes over the training set.
      batch_size: Windows per batch (K).
      batches_per_round: Batches per parameter update (B); ignored by the
        standard trainer.
      rates: The feasible sampling rates in Hz.
      sensor_policy: A name from POLICIES, or a tuple of (sensors, probability)
        pairs over non-empty sensor subsets.
      replace_rates: Draw the rates of a round with replacement.
      optimizer: A name from OPTIMIZERS.
      learning_rate: Optimizer step size.
      beta1: Decay of the first moment (adam).
      beta2: Decay of the second moment (adam).
      rms_decay: Decay of the squared-gradient average (rmsprop).
      epsilon: Denominator offset of adam and rmsprop.
      patience: Non-improving epochs tolerated before stopping.
      seed: Seed of the shuffling, dimension draws and dropout masks.
      eval_batch_size: Windows per forward pass during evaluation.
    """
    trainer: str = 'dat'
    epochs: int = 100
    batch_size: int = 128
    batches_per_round: int = 5
    rates: tuple = (10.0, 20.0, 30.0, 40.0, 50.0)
    sensor_policy: typing.Union[str, tuple] = 'default'
    replace_rates: bool = False
    optimizer: str = 'adam'
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    rms_decay: float = 0.9
    epsilon: float = 1e-8
    patience: int = 100
    seed: int = 0
    eval_batch_size: int = 256

    @property
    def round_size(self):
        return 1 if self.trainer == 'standard' else self.batches_per_round

    def validate(self):
        """Raise ConfigurationError on inconsistent fields; return self."""
        if self.trainer not in TRAINERS:
            raise ConfigurationError(
                f"Unknown trainer '{self.trainer}'; choose from {sorted(TRAINERS)}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(
                f"Unknown optimizer '{self.optimizer}'; choose from {sorted(OPTIMIZERS)}")
        for name in ('epochs', 'batch_size', 'batches_per_round', 'eval_batch_size'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.patience < 0 or self.seed < 0:
            raise ConfigurationError("patience and seed must not be negative")
        if not self.rates or min(self.rates) <= 0:
            raise ConfigurationError(f"Invalid rate set {self.rates}")
        if len(set(self.rates)) != len(self.rates):
            raise ConfigurationError(f"Duplicate rates in {self.rates}")
        if not self.replace_rates and self.round_size > len(self.rates):
            raise ConfigurationError(
                f"Cannot draw {self.round_size} distinct rates from {len(self.rates)}; "
                "lower batches_per_round or set replace_rates")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ConfigurationError("learning_rate and epsilon must be positive")
        for name in ('beta1', 'beta2', 'rms_decay'):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if isinstance(self.sensor_policy, str):
            if self.sensor_policy not in POLICIES:
                raise ConfigurationError(
                    f"Unknown sensor policy '{self.sensor_policy}'; choose from {POLICIES}")
        else:
            _check_policy_table(self.sensor_policy)
        return self

    def to_json(self):
        return {key: _thaw(value) for key, value in self._asdict().items()}

    @classmethod
    def from_json(cls, json):
        fields = {}
        for key, value in json.items():
            if key not in cls._fields:
                raise ConfigurationError(f"Unknown training config field '{key}'")
            fields[key] = _freeze(value)
        if 'rates' in fields:
            fields['rates'] = tuple(float(rate) for rate in fields['rates'])
        return cls(**fields).validate()


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(item) for item in value)
    return value


def _thaw(value):
    if isinstance(value, tuple):
        return [_thaw(item) for item in value]
    return value


def _check_policy_table(table):
    if not table:
        raise ConfigurationError("Empty sensor policy")
    total = 0.0
    for entry in table:
        if len(entry) != 2 or not entry[0]:
            raise ConfigurationError(f"Invalid sensor policy entry {entry!r}")
        if entry[1] < 0:
            raise ConfigurationError(f"Negative probability in {entry!r}")
        total += entry[1]
    if abs(total - 1.0) > 1e-9:
        raise ConfigurationError(f"Sensor policy probabilities sum to {total}, not 1")


def sensor_policy(policy, sensors):
    """Resolve a policy into a table of (sensor subset, probability).

    'default' trains on all sensors half of the time and on one uniformly
    chosen sensor otherwise; 'all' always keeps every sensor; 'single' always
    keeps one uniformly chosen sensor.

    Args:
      policy: A name from POLICIES or a table of (sensors, probability).
      sensors: The sensors of the dataset, in stream order.
    Returns:
      A tuple of (sensors, probability) pairs; subsets are in stream order.
    Raises:
      ConfigurationError: If the table names unknown sensors.
    """
    sensors = tuple(sensors)
    singles = tuple((name,) for name in sensors)
    if policy == 'all' or (policy == 'default' and len(sensors) == 1):
        return ((sensors, 1.0),)
    if policy == 'default':
        return ((sensors, 0.5),) + tuple((single, 0.5 / len(sensors)) for single in singles)
    if policy == 'single':
        return tuple((single, 1.0 / len(sensors)) for single in singles)
    _check_policy_table(policy)
    table = []
    for subset, probability in policy:
        unknown = set(subset).difference(sensors)
        if unknown:
            raise ConfigurationError(f"Sensor policy names unknown sensors {sorted(unknown)}")
        table.append((tuple(name for name in sensors if name in set(subset)), float(probability)))
    return tuple(table)


class Dimensions(typing.NamedTuple):
    """The input dimension a batch is trained at."""
    rate_hz: float
    sensors: tuple


def draw_dimensions(rates, policy, count, rng, replace=False):
    """Draw the dimensions of the batches of one round.

    Args:
      rates: The feasible rates.
      policy: A resolved sensor_policy() table.
      count: Number of batches in the round.
      rng: A numpy Generator.
      replace: Draw rates with replacement.
    Returns:
      A list of count Dimensions.
    Raises:
      ConfigurationError: If count distinct rates cannot be drawn.
    """
    if not replace and count > len(rates):
        raise ConfigurationError(f"Cannot draw {count} distinct rates from {len(rates)}")
    chosen = rng.choice(len(rates), size=count, replace=replace)
    probabilities = np.array([probability for _, probability in policy])
    subsets = rng.choice(len(policy), size=count, p=probabilities / probabilities.sum())
    return [Dimensions(float(rates[r]), policy[s][0]) for r, s in zip(chosen, subsets)]


def transform_batch(batch, dimensions):
    """Resample and mask every window of a batch to the same dimensions.

    Args:
      batch: A signals.LabeledDataset at its native rate with all sensors.
      dimensions: The target Dimensions.
    Returns:
      A LabeledDataset at the target rate holding the chosen sensors only.
    Raises:
      ConfigurationError: If the target rate exceeds the native rate.
    """
    if dimensions.rate_hz > batch.rate_hz:
        raise ConfigurationError(
            f"Rate {dimensions.rate_hz} Hz exceeds the native {batch.rate_hz} Hz")
    samples = signals.sample_count(dimensions.rate_hz, batch.duration_s)
    streams = signals.sensor_streams(batch.sensors, dimensions.sensors, batch.axes_per_sensor)
    data = signals.interpolate(batch.data, samples)[..., streams]
    kept = tuple(name for name in batch.sensors if name in set(dimensions.sensors))
    return batch._replace(data=data, rate_hz=dimensions.rate_hz, sensors=kept)


def dimension_randomization(batch, rates, policy, rng):
    """Transform a batch to one randomly drawn dimension.

    Returns:
      A pair of the transformed batch and the drawn Dimensions.
    """
    dimensions, = draw_dimensions(rates, policy, 1, rng)
    return transform_batch(batch, dimensions), dimensions


# Optimizers.

class OptimizerState(typing.NamedTuple):
    """Moment accumulators of an optimizer, keyed by parameter name."""
    step: int
    first: dict
    second: dict


def init_state(params):
    zeros = lambda: {name: np.zeros(array.shape) for name, array in params.arrays.items()}
    return OptimizerState(0, zeros(), zeros())


OPTIMIZERS = {}


def optimizer(name):
    def decorator(func):
        OPTIMIZERS[name] = func
        return func
    return decorator


@optimizer('sgd')
def sgd_step(arrays, grads, state, config):
    """Plain gradient descent."""
    new = {name: array - config.learning_rate * grads[name] for name, array in arrays.items()}
    return new, state._replace(step=state.step + 1)


@optimizer('adam')
def adam_step(arrays, grads, state, config):
    """Adaptive moments with bias correction."""
    step = state.step + 1
    first, second, new = {}, {}, {}
    for name, array in arrays.items():
        grad = grads[name]
        first[name] = config.beta1 * state.first[name] + (1.0 - config.beta1) * grad
        second[name] = config.beta2 * state.second[name] + (1.0 - config.beta2) * grad * grad
        corrected = first[name] / (1.0 - config.beta1 ** step)
        scale = np.sqrt(second[name] / (1.0 - config.beta2 ** step)) + config.epsilon
        new[name] = array - config.learning_rate * corrected / scale
    return new, OptimizerState(step, first, second)


@optimizer('rmsprop')
def rmsprop_step(arrays, grads, state, config):
    """Steps scaled by a decaying average of squared gradients."""
    second, new = {}, {}
    for name, array in arrays.items():
        grad = grads[name]
        second[name] = config.rms_decay * state.second[name] + (1.0 - config.rms_decay) * grad * grad
        new[name] = array - config.learning_rate * grad / (np.sqrt(second[name]) + config.epsilon)
    return new, state._replace(step=state.step + 1, second=second)


def apply_update(params, state, grads, config):
    """Take one optimizer step; parameters without a gradient get zeros."""
    grads = {name: grads.get(name, np.zeros(array.shape))
             for name, array in params.arrays.items()}
    arrays, state = OPTIMIZERS[config.optimizer](params.arrays, grads, state, config)
    return params.replace_arrays(arrays), state


# Trainers.

class RoundResult(typing.NamedTuple):
    """Outcome of one training round.

    Attributes:
      params: The updated ParameterSet.
      state: The updated OptimizerState.
      loss: Sum over batches of the mean batch loss times the batch size.
      correct: Correctly classified training windows.
      windows: Windows trained on.
      gradients: For dat and standard, the gradients summed over the batches
        at the round-start parameters; None for the other trainers.
      dimensions: The Dimensions of each batch.
    """
    params: layers.ParameterSet
    state: OptimizerState
    loss: float
    correct: int
    windows: int
    gradients: typing.Optional[dict]
    dimensions: list


TRAINERS = {}


def trainer(name):
    def decorator(func):
        TRAINERS[name] = func
        return func
    return decorator


def _accumulate(spec, params, batches, dimensions, rng):
    """Forward and backward every batch at fixed parameters on one tape."""
    tape = tensor.Tape()
    loss_sum, correct, windows = 0.0, 0, 0
    for batch, dims in zip(batches, dimensions):
        batch = transform_batch(batch, dims)
        loss, scores = layers.batch_loss(tape, spec, params, batch.data, batch.labels,
                                         training=True, rng=rng)
        tape.backward(loss)
        loss_sum += loss.item() * batch.size
        correct += int(np.sum(np.argmax(scores.data, axis=1) == batch.labels))
        windows += batch.size
    return tape.accumulate_and_reset(), loss_sum, correct, windows


@trainer('dat')
def dat_round(spec, params, state, batches, config, policy, rng):
    """Accumulate the gradients of all batches, then step once with their mean.

    Args:
      spec: A ModelSpec.
      params: The ParameterSet at the start of the round.
      state: The OptimizerState.
      batches: LabeledDatasets at native dimensions, at most B of them.
      config: A TrainConfig.
      policy: A resolved sensor_policy() table.
      rng: A numpy Generator.
    Returns:
      A RoundResult.
    """
    dimensions = draw_dimensions(config.rates, policy, len(batches), rng, config.replace_rates)
    summed, loss, correct, windows = _accumulate(spec, params, batches, dimensions, rng)
    mean = {name: grad / len(batches) for name, grad in summed.items()}
    params, state = apply_update(params, state, mean, config)
    return RoundResult(params, state, loss, correct, windows, summed, dimensions)


@trainer('standard')
def standard_round(spec, params, state, batches, config, policy, rng):
    """One batch, one gradient, one step."""
    if len(batches) != 1:
        raise ConfigurationError(f"The standard trainer takes one batch, got {len(batches)}")
    return dat_round(spec, params, state, batches, config, policy, rng)


def _train_copies(spec, params, state, batches, config, policy, rng):
    dimensions = draw_dimensions(config.rates, policy, len(batches), rng, config.replace_rates)
    copies = []
    loss, correct, windows = 0.0, 0, 0
    for batch, dims in zip(batches, dimensions):
        grads, batch_loss, batch_correct, batch_windows = _accumulate(
            spec, params, [batch], [dims], rng)
        copies.append(apply_update(params, state, grads, config))
        loss += batch_loss
        correct += batch_correct
        windows += batch_windows
    return copies, dimensions, loss, correct, windows


def _mean(dicts):
    return {name: np.mean(np.stack([values[name] for values in dicts]), axis=0)
            for name in dicts[0]}


@trainer('weight_avg')
def weight_avg_round(spec, params, state, batches, config, policy, rng):
    """Average B copies, each updated by a standard step on its own batch.

    Every copy starts from the central optimizer state; the new state is the
    mean of the copies' states.
    """
    copies, dimensions, loss, correct, windows = _train_copies(
        spec, params, state, batches, config, policy, rng)
    arrays = _mean([copy.arrays for copy, _ in copies])
    states = [copy_state for _, copy_state in copies]
    state = OptimizerState(states[0].step, _mean([s.first for s in states]),
                           _mean([s.second for s in states]))
    return RoundResult(params.replace_arrays(arrays), state, loss, correct, windows,
                       None, dimensions)


@trainer('reptile')
def reptile_round(spec, params, state, batches, config, policy, rng):
    """Step the central parameters along their displacement to the copies' mean.

    The copies are trained as for weight_avg; their optimizer states are
    discarded. The central state advances with the pseudo-gradient.
    """
    copies, dimensions, loss, correct, windows = _train_copies(
        spec, params, state, batches, config, policy, rng)
    mean = _mean([copy.arrays for copy, _ in copies])
    pseudo = {name: array - mean[name] for name, array in params.arrays.items()}
    params, state = apply_update(params, state, pseudo, config)
    return RoundResult(params, state, loss, correct, windows, None, dimensions)


# Evaluation and the training loop.

class Evaluation(typing.NamedTuple):
    """Classification metrics over a dataset.

    Attributes:
      accuracy: Fraction of windows classified correctly.
      loss: Mean cross-entropy.
      per_class: Accuracy per class id, None for classes without windows.
      count: Number of windows.
    """
    accuracy: float
    loss: float
    per_class: tuple
    count: int


def evaluate(spec, params, dataset, batch_size=256):
    """Evaluate a model on a dataset at the dataset's own dimensions."""
    if not dataset.size:
        raise ConfigurationError("Cannot evaluate on an empty dataset")
    predictions, losses = [], []
    for start in range(0, dataset.size, batch_size):
        scores = layers.forward_batch(spec, params, dataset.data[start:start + batch_size])
        logprob = tensor.log_softmax(scores)
        labels = dataset.labels[start:start + batch_size]
        losses.append(-logprob[np.arange(len(labels)), labels])
        predictions.append(np.argmax(scores, axis=1))
    predictions = np.concatenate(predictions)
    hits = predictions == dataset.labels
    per_class = tuple(float(hits[dataset.labels == label].mean())
                      if np.any(dataset.labels == label) else None
                      for label in range(len(dataset.classes)))
    return Evaluation(float(hits.mean()), float(np.concatenate(losses).mean()), per_class,
                      dataset.size)


class EpochRecord(typing.NamedTuple):
    epoch: int
    trainer: str
    loss: float
    train_accuracy: float
    val_accuracy: float
    val_loss: float
    rounds: int


class TrainingReport(typing.NamedTuple):
    """Deterministic summary of a training run.

    Attributes:
      epochs: A list of EpochRecord, one per completed epoch.
      best_epoch: The epoch whose parameters were kept.
      best_accuracy: Its validation accuracy.
      stopped_early: Whether patience ran out before the last epoch.
    """
    epochs: list
    best_epoch: int
    best_accuracy: float
    stopped_early: bool

    def to_json(self):
        return {'epochs': [record._asdict() for record in self.epochs],
                'best_epoch': self.best_epoch,
                'best_accuracy': self.best_accuracy,
                'stopped_early': self.stopped_early}


class FitResult(typing.NamedTuple):
    """The best parameters, the report, and the wall time of each epoch."""
    params: layers.ParameterSet
    report: TrainingReport
    seconds: list


def check_rates(config, dataset):
    if max(config.rates) > dataset.rate_hz:
        raise ConfigurationError(
            f"Rates {list(config.rates)} exceed the native {dataset.rate_hz} Hz")


def fit(spec, params, train, config, validation=None):
    """Train a model.

    Each epoch shuffles the training set, cuts it into batches of
    batch_size windows and groups them into rounds of round_size batches.
    After every epoch the model is validated at native dimensions with all
    sensors; the parameters with the best validation accuracy are kept.

    Args:
      spec: A ModelSpec.
      params: The initial ParameterSet.
      train: The training LabeledDataset.
      config: A TrainConfig.
      validation: A LabeledDataset to validate on; defaults to train.
    Returns:
      A FitResult.
    Raises:
      ConfigurationError: On an invalid config or rates above the native rate.
    """
    config.validate()
    check_rates(config, train)
    if not train.size:
        raise ConfigurationError("Cannot train on an empty dataset")
    validation = train if validation is None else validation
    policy = sensor_policy(config.sensor_policy, train.sensors)
    trainer_func = TRAINERS[config.trainer]
    rng = np.random.default_rng(config.seed)
    state = init_state(params)

    best = (params, 0, -1.0)
    records, seconds = [], []
    stale = 0
    stopped_early = False
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(train.size)
        batches = [train.subset(order[i:i + config.batch_size])
                   for i in range(0, train.size, config.batch_size)]
        loss, correct, windows, rounds = 0.0, 0, 0, 0
        for i in range(0, len(batches), config.round_size):
            result = trainer_func(spec, params, state, batches[i:i + config.round_size],
                                  config, policy, rng)
            params, state = result.params, result.state
            loss += result.loss
            correct += result.correct
            windows += result.windows
            rounds += 1
        evaluation = evaluate(spec, params, validation, config.eval_batch_size)
        record = EpochRecord(epoch, config.trainer, loss / windows, correct / windows,
                             evaluation.accuracy, evaluation.loss, rounds)
        records.append(record)
        seconds.append(time.perf_counter() - start)
        logging.info("Epoch %d: loss %.4f, train accuracy %.4f, validation accuracy %.4f "
                     "(%.2fs)", epoch, record.loss, record.train_accuracy,
                     record.val_accuracy, seconds[-1])
        if evaluation.accuracy > best[2]:
            best = (params, epoch, evaluation.accuracy)
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                stopped_early = epoch < config.epochs
                break

    params, best_epoch, best_accuracy = best
    return FitResult(params, TrainingReport(records, best_epoch, best_accuracy, stopped_early),
                     seconds)
