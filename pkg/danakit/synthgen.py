"""Synthetic two-sensor dataset with controlled inter-sensor correlation.

Every window simulates two 3-axis sensors, S1 and S2. For each axis, a pair of
correlated Gaussian base streams is drawn (Pearson coefficient rho in
expectation), then each stream receives three sinusoids and a linear trend,
is smoothed with a centred moving average, and receives white noise. The
characteristics of these components depend on the class. The correlation
setting decides how many of them the two sensors share: all of them (high),
two sinusoids and the trend (moderate), or none (low).

Characteristics are fixed by the seed and shared by the train and test
splits; only the Gaussian draws and the noise differ between windows.
"""
__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import math
import typing

import numpy as np

from danakit import signals


class ConfigurationError(Exception):
    """An invalid synthetic dataset configuration."""


# Correlation coefficient of the base streams per setting.
SETTINGS = {'low': 0.01, 'moderate': 0.58, 'high': 0.89}

SENSORS = ('S1', 'S2')

SPLITS = ('train', 'test')


class SyntheticConfig(typing.NamedTuple):
    """Parameters of a synthetic dataset.

    Attributes:
      setting: 'low', 'moderate' or 'high'.
      samples: Window width w.
      rate_hz: Sampling rate; the window lasts samples / rate_hz seconds.
      variances: Base signal variance per class; its length is the class count.
      train_per_class: Training windows per class.
      test_per_class: Test windows per class.
      seed: Seed of the component table and of the draws.
      periodic_energy: Variance of the three sinusoids together, relative to
        the class variance.
      trend_energy: Variance of the trend over the window, relative.
      noise_energy: Variance of the white noise, relative.
      smoothing: Candidate moving-average lengths.
      max_frequency: Sinusoid frequencies are integers in [1, max_frequency]
        cycles per window.
      rho: Overrides the setting's correlation coefficient if not None.
    """
    setting: str = 'high'
    samples: int = 50
    rate_hz: float = 50.0
    variances: tuple = (0.6, 0.7, 0.8, 0.9, 1.0)
    train_per_class: int = 800
    test_per_class: int = 200
    seed: int = 0
    periodic_energy: float = 0.45
    trend_energy: float = 0.05
    noise_energy: float = 0.10
    smoothing: tuple = (2, 3)
    max_frequency: int = 8
    rho: typing.Optional[float] = None

    @property
    def classes(self):
        return len(self.variances)

    @property
    def correlation(self):
        return SETTINGS[self.setting] if self.rho is None else self.rho

    def validate(self):
        """Raise ConfigurationError on inconsistent fields; return self."""
        if self.setting not in SETTINGS:
            raise ConfigurationError(
                f"Unknown setting '{self.setting}'; choose from {sorted(SETTINGS)}")
        if not 0 <= self.correlation < 1:
            raise ConfigurationError(f"Correlation {self.correlation} not in [0, 1)")
        if not self.variances or min(self.variances) <= 0:
            raise ConfigurationError(f"Invalid class variances {self.variances}")
        if self.samples < 2 or self.rate_hz <= 0:
            raise ConfigurationError(f"Invalid window of {self.samples} at {self.rate_hz} Hz")
        if self.seed < 0:
            raise ConfigurationError(f"Seed must not be negative, got {self.seed}")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise ConfigurationError("Window counts must not be negative")
        if not self.smoothing or max(self.smoothing) > self.samples or min(self.smoothing) < 1:
            raise ConfigurationError(
                f"Smoothing lengths {self.smoothing} must be in [1, {self.samples}]")
        if self.max_frequency < 6:
            raise ConfigurationError("Distinct sinusoids need max_frequency >= 6")
        return self

    def to_json(self):
        return {key: (list(value) if isinstance(value, tuple) else value)
                for key, value in self._asdict().items()}

    @classmethod
    def from_json(cls, json):
        fields = {}
        for key, value in json.items():
            if key not in cls._fields:
                raise ConfigurationError(f"Unknown synthetic config field '{key}'")
            fields[key] = tuple(value) if isinstance(value, list) else value
        return cls(**fields).validate()


class Components(typing.NamedTuple):
    """Characteristics of the components added to one stream.

    Attributes:
      amplitudes: Amplitude of each sinusoid.
      frequencies: Cycles per window of each sinusoid.
      phases: Phase of each sinusoid, in radians.
      slope: Total rise of the linear trend over the window.
      smoothing: Moving-average length.
      noise_std: Standard deviation of the white noise.
    """
    amplitudes: tuple
    frequencies: tuple
    phases: tuple
    slope: float
    smoothing: int
    noise_std: float

    def to_json(self):
        return {key: (list(value) if isinstance(value, tuple) else value)
                for key, value in self._asdict().items()}


def mutual_information(rho):
    """Mutual information of one bivariate Gaussian sample pair, in nats."""
    return -0.5 * math.log(1.0 - rho * rho)


def sample_correlated_base(variance, rho, size, rng):
    """Draw a pair of correlated Gaussian streams.

    S1 ~ N(0, variance) and S2 | S1 ~ N(rho * S1, (1 - rho^2) * variance),
    so both have the same marginal and Pearson coefficient rho.

    Args:
      variance: The class variance.
      rho: Correlation coefficient in [0, 1).
      size: Shape of each stream array.
      rng: A numpy Generator.
    Returns:
      A pair of arrays of the given shape.
    """
    sigma = math.sqrt(variance)
    first = rng.normal(0.0, sigma, size)
    second = rho * first + math.sqrt(1.0 - rho * rho) * sigma * rng.normal(0.0, 1.0, size)
    return first, second


def moving_average(stream, length):
    """Centred moving average along the last axis, over the cells in range."""
    if length <= 1:
        return np.array(stream, dtype=np.float64)
    width = stream.shape[-1]
    before = (length - 1) // 2
    padded = np.concatenate([np.zeros(stream.shape[:-1] + (1,)), stream], axis=-1)
    cumsum = np.cumsum(padded, axis=-1)
    index = np.arange(width)
    lo = np.clip(index - before, 0, width)
    hi = np.clip(index - before + length, 0, width)
    return (cumsum[..., hi] - cumsum[..., lo]) / (hi - lo)


def add_components(stream, components, rng):
    """Add periodic, trend, smoothing and noise components to streams.

    Args:
      stream: An array of shape (..., w); the last axis is time.
      components: A Components instance.
      rng: A numpy Generator for the noise.
    Returns:
      A new array of the same shape.
    Raises:
      ConfigurationError: If the smoothing length exceeds the window.
    """
    stream = np.asarray(stream, dtype=np.float64)
    width = stream.shape[-1]
    if components.smoothing > width or components.smoothing < 1:
        raise ConfigurationError(
            f"Smoothing length {components.smoothing} not in [1, {width}]")
    time = np.arange(width)
    out = stream.copy()
    for amplitude, frequency, phase in zip(components.amplitudes, components.frequencies,
                                           components.phases):
        out = out + amplitude * np.sin(2 * np.pi * frequency * time / width + phase)
    if components.slope:
        out = out + components.slope * (time / max(width - 1, 1) - 0.5)
    out = moving_average(out, components.smoothing)
    if components.noise_std:
        out = out + rng.normal(0.0, components.noise_std, out.shape)
    return out


def component_table(config):
    """Draw the component characteristics of every (class, sensor, axis).

    Returns:
      A nested tuple indexed [class][sensor][axis] of Components.
    """
    rng = np.random.default_rng([config.seed, sorted(SETTINGS).index(config.setting), 7])
    frequencies = np.arange(1, config.max_frequency + 1)
    table = []
    for variance in config.variances:
        sigma = math.sqrt(variance)
        amplitude = sigma * math.sqrt(2.0 * config.periodic_energy / 3.0)
        slope_size = sigma * math.sqrt(12.0 * config.trend_energy)
        noise_std = sigma * math.sqrt(config.noise_energy)
        first, second = [], []
        for _ in range(3):
            freqs = rng.choice(frequencies, 3, replace=False)
            others = rng.choice(np.setdiff1d(frequencies, freqs), 3, replace=False)
            phases = rng.uniform(0, 2 * np.pi, 3)
            other_phases = rng.uniform(0, 2 * np.pi, 3)
            slope = slope_size * rng.choice([-1.0, 1.0])
            other_slope = slope_size * rng.choice([-1.0, 1.0])
            length = int(rng.choice(config.smoothing))
            other_length = int(rng.choice(config.smoothing))
            base = Components((amplitude,) * 3, tuple(int(f) for f in freqs),
                              tuple(float(p) for p in phases), float(slope), length, noise_std)
            if config.setting == 'high':
                paired = base
            elif config.setting == 'moderate':
                paired = base._replace(
                    frequencies=base.frequencies[:2] + (int(others[0]),),
                    phases=base.phases[:2] + (float(other_phases[0]),))
            else:
                paired = base._replace(
                    frequencies=tuple(int(f) for f in others),
                    phases=tuple(float(p) for p in other_phases),
                    slope=float(other_slope), smoothing=other_length)
            first.append(base)
            second.append(paired)
        table.append((tuple(first), tuple(second)))
    return tuple(table)


def generate_split(config, table, split, count):
    """Generate the windows of one split.

    Args:
      config: A validated SyntheticConfig.
      table: The component_table() of the config.
      split: 'train' or 'test'.
      count: Windows per class.
    Returns:
      A (data, labels) pair; data has shape (classes * count, w, 6).
    """
    data = np.empty((config.classes * count, config.samples, 6))
    labels = np.repeat(np.arange(config.classes), count).astype(np.int64)
    for label, variance in enumerate(config.variances):
        rng = np.random.default_rng([config.seed, SPLITS.index(split), label])
        streams = sample_correlated_base(variance, config.correlation,
                                         (count, 3, config.samples), rng)
        rows = slice(label * count, (label + 1) * count)
        for sensor in range(2):
            for axis in range(3):
                data[rows, :, sensor * 3 + axis] = add_components(
                    streams[sensor][:, axis, :], table[label][sensor][axis], rng)
    return data, labels


def window_pearson(data):
    """Pearson coefficients between matching S1 and S2 axes of each window.

    Args:
      data: A (count, w, 6) array.
    Returns:
      A (count, 3) array.
    """
    first = data[:, :, 0:3] - data[:, :, 0:3].mean(axis=1, keepdims=True)
    second = data[:, :, 3:6] - data[:, :, 3:6].mean(axis=1, keepdims=True)
    numerator = (first * second).sum(axis=1)
    denominator = np.sqrt((first ** 2).sum(axis=1) * (second ** 2).sum(axis=1))
    return numerator / denominator


def pearson_summary(data):
    """Mean and standard deviation of the absolute per-window coefficients."""
    values = np.abs(window_pearson(data))
    return {'mean': float(values.mean()), 'std': float(values.std())}


def generate_dataset(config):
    """Generate the train and test splits.

    Args:
      config: A SyntheticConfig.
    Returns:
      A pair of (train, test) signals.LabeledDataset instances, each carrying
      a manifest with the config, the component table and Pearson statistics.
    """
    config.validate()
    table = component_table(config)
    duration = config.samples / config.rate_hz
    classes = tuple(f'class{index}' for index in range(config.classes))
    datasets = []
    for split, count in zip(SPLITS, (config.train_per_class, config.test_per_class)):
        data, labels = generate_split(config, table, split, count)
        manifest = {
            'generator': 'synthgen',
            'config': config.to_json(),
            'correlation': config.correlation,
            'mutual_information': mutual_information(config.correlation),
            'components': [[[components.to_json() for components in sensor]
                            for sensor in per_class] for per_class in table],
            'pearson': pearson_summary(data) if len(data) else None,
        }
        datasets.append(signals.LabeledDataset(
            data, labels, config.rate_hz, duration, SENSORS, classes, split,
            manifest=manifest))
    return tuple(datasets)
