"""Window-level transforms of multivariate sensor signals.

A window holds w samples over h streams (samples first). Each sensor
contributes a contiguous block of axes_per_sensor streams, in sensor order.
All transforms here are pure; they return new windows.
"""
__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import math
import typing

import numpy as np


class TooShortError(Exception):
    """A window has too few samples to be resampled."""


class SelectionError(Exception):
    """An invalid sensor selection."""


class ConfigurationError(Exception):
    """Statistics or masks inconsistent with the window."""


class TimeWindow(typing.NamedTuple):
    """One multivariate window.

    Attributes:
      data: A (samples, streams) float64 array.
      rate_hz: Samples per second per stream.
      duration_s: Window duration in seconds.
      sensors: Tuple of the names of the sensors present, in stream order.
      label: Integer class id, or None.
      axes_per_sensor: Streams per sensor.
    """
    data: np.ndarray
    rate_hz: float
    duration_s: float
    sensors: tuple
    label: typing.Optional[int] = None
    axes_per_sensor: int = 3

    @property
    def samples(self):
        return self.data.shape[0]

    @property
    def streams(self):
        return self.data.shape[1]


def sample_count(rate_hz, duration_s):
    """Samples in a window of the given duration, rounded half up."""
    return math.floor(rate_hz * duration_s + 0.5)


def interpolate(data, samples):
    """Endpoint-aligned linear interpolation along the samples axis.

    Args:
      data: An array of shape (..., w, h).
      samples: The target sample count w2.
    Returns:
      An array of shape (..., w2, h); output sample j is taken at input
      position j * (w - 1) / (w2 - 1).
    Raises:
      TooShortError: If w < 2 or w2 < 2.
    """
    width = data.shape[-2]
    if width < 2:
        raise TooShortError(f"Cannot resample a window of {width} samples")
    if samples < 2:
        raise TooShortError(f"Cannot resample to {samples} samples")
    if samples == width:
        return np.array(data, dtype=np.float64)
    positions = np.arange(samples) * (width - 1) / (samples - 1)
    lower = np.minimum(np.floor(positions).astype(np.int64), width - 2)
    frac = (positions - lower)[:, None]
    return data[..., lower, :] * (1.0 - frac) + data[..., lower + 1, :] * frac


def resample(window, target_rate_hz):
    """Resample a window to a new rate over the same duration."""
    samples = sample_count(target_rate_hz, window.duration_s)
    return window._replace(data=interpolate(window.data, samples),
                           rate_hz=target_rate_hz)


def sensor_streams(sensors, keep, axes_per_sensor=3):
    """Return the stream indices of the kept sensors, in original order.

    Raises:
      SelectionError: If keep is empty or names sensors not present.
    """
    keep = set(keep)
    if not keep:
        raise SelectionError("At least one sensor must be kept")
    unknown = keep.difference(sensors)
    if unknown:
        raise SelectionError(f"Sensors {sorted(unknown)} not in {list(sensors)}")
    return [index * axes_per_sensor + axis
            for index, name in enumerate(sensors) if name in keep
            for axis in range(axes_per_sensor)]


def select_sensors(window, keep):
    """Keep only the stream blocks of the given sensors."""
    streams = sensor_streams(window.sensors, keep, window.axes_per_sensor)
    kept = tuple(name for name in window.sensors if name in set(keep))
    return window._replace(data=window.data[:, streams], sensors=kept)


def _check_mask(window, full_mask):
    missing = set(window.sensors).difference(full_mask)
    if missing:
        raise ConfigurationError(f"Sensors {sorted(missing)} not in mask {list(full_mask)}")
    if window.streams != len(window.sensors) * window.axes_per_sensor:
        raise ConfigurationError(
            f"Window has {window.streams} streams for sensors {list(window.sensors)}")


def _blocks(window):
    axes = window.axes_per_sensor
    return {name: window.data[:, index * axes:(index + 1) * axes]
            for index, name in enumerate(window.sensors)}


def impute_mean(window, full_mask, stats):
    """Fill the blocks of missing sensors with per-stream training means.

    Args:
      window: A TimeWindow whose sensors are a subset of full_mask.
      full_mask: Tuple of all sensor names, in stream order.
      stats: NormStats covering every stream of full_mask.
    Returns:
      A TimeWindow with axes_per_sensor * len(full_mask) streams.
    Raises:
      ConfigurationError: If the statistics do not cover the full mask.
    """
    _check_mask(window, full_mask)
    axes = window.axes_per_sensor
    expected = axes * len(full_mask)
    if len(stats.mean) != expected:
        raise ConfigurationError(
            f"Statistics cover {len(stats.mean)} streams; mask needs {expected}")
    present = _blocks(window)
    blocks = []
    for index, name in enumerate(full_mask):
        if name in present:
            blocks.append(present[name])
        else:
            means = np.asarray(stats.mean[index * axes:(index + 1) * axes])
            blocks.append(np.broadcast_to(means, (window.samples, axes)))
    return window._replace(data=np.concatenate(blocks, axis=1), sensors=tuple(full_mask))


def impute_copy(window, full_mask):
    """Fill missing sensor blocks by cycling through the present blocks in order."""
    _check_mask(window, full_mask)
    if not window.sensors:
        raise SelectionError("Copy imputation needs at least one present sensor")
    present = _blocks(window)
    order = [name for name in full_mask if name in present]
    blocks = []
    copies = 0
    for name in full_mask:
        if name in present:
            blocks.append(present[name])
        else:
            blocks.append(present[order[copies % len(order)]])
            copies += 1
    return window._replace(data=np.concatenate(blocks, axis=1), sensors=tuple(full_mask))


class NormStats(typing.NamedTuple):
    """Per-stream mean and standard deviation of a training set."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def create(cls, mean, std, require_spread=True):
        """Build statistics, rejecting degenerate streams.

        Args:
          mean: Per-stream means.
          std: Per-stream standard deviations.
          require_spread: Reject streams whose std is not positive. Statistics
            used only for their means, as by mean imputation, may skip this.
        Raises:
          ConfigurationError: If shapes differ or, with require_spread, any
            std is not positive.
        """
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ConfigurationError(
                f"Mean {mean.shape} and std {std.shape} must be matching vectors")
        degenerate = np.flatnonzero(~(std > 0))
        if require_spread and degenerate.size:
            raise ConfigurationError(f"Streams {degenerate.tolist()} have non-positive std")
        return cls(mean, std)

    @classmethod
    def from_windows(cls, data, require_spread=True):
        """Compute statistics over all samples of a (count, w, h) array."""
        data = np.asarray(data, dtype=np.float64)
        flat = data.reshape(-1, data.shape[-1])
        return cls.create(flat.mean(axis=0), flat.std(axis=0), require_spread)

    def to_json(self):
        return {'mean': self.mean.tolist(), 'std': self.std.tolist()}


def normalize(window, stats):
    """Standardize each stream with the given statistics.

    The statistics may come from another dataset; normalizing with them is
    the pseudo-normalization used for cross-dataset evaluation.
    """
    if len(stats.mean) != window.streams:
        raise ConfigurationError(
            f"Statistics cover {len(stats.mean)} streams; window has {window.streams}")
    if np.any(~(np.asarray(stats.std) > 0)):
        raise ConfigurationError("Statistics have non-positive std")
    return window._replace(data=(window.data - stats.mean) / stats.std)


class LabeledDataset(typing.NamedTuple):
    """A set of labeled windows sharing rate, duration and sensors.

    Attributes:
      data: A (count, samples, streams) float64 array.
      labels: A (count,) integer array of class ids.
      rate_hz: Samples per second per stream.
      duration_s: Window duration in seconds.
      sensors: Tuple of sensor names, in stream order.
      classes: Tuple of class names, indexed by class id.
      split: A tag, 'train' or 'test' for generated data.
      axes_per_sensor: Streams per sensor.
      manifest: A dict describing how the data was produced, or None.
    """
    data: np.ndarray
    labels: np.ndarray
    rate_hz: float
    duration_s: float
    sensors: tuple
    classes: tuple
    split: str = 'train'
    axes_per_sensor: int = 3
    manifest: typing.Optional[dict] = None

    @property
    def size(self):
        return self.data.shape[0]

    def window(self, index):
        return TimeWindow(self.data[index], self.rate_hz, self.duration_s, self.sensors,
                          int(self.labels[index]), self.axes_per_sensor)

    def windows(self):
        for index in range(self.size):
            yield self.window(index)

    def subset(self, indices):
        return self._replace(data=self.data[indices], labels=self.labels[indices])

    def class_counts(self):
        return np.bincount(self.labels, minlength=len(self.classes))

    def validate(self):
        """Check shapes and labels.

        Raises:
          ConfigurationError: If arrays and metadata disagree.
        """
        if self.data.ndim != 3 or self.labels.shape != (self.data.shape[0],):
            raise ConfigurationError(
                f"Data {self.data.shape} and labels {self.labels.shape} disagree")
        if self.data.shape[2] != len(self.sensors) * self.axes_per_sensor:
            raise ConfigurationError(
                f"{self.data.shape[2]} streams for sensors {list(self.sensors)}")
        if self.size and (self.labels.min() < 0 or self.labels.max() >= len(self.classes)):
            raise ConfigurationError(f"Labels outside [0, {len(self.classes)})")
        return self
