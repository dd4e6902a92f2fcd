"""Fixed-dimension baselines: resampling, imputation and augmented training.

A model without dimension-adaptive pooling only accepts the dimensions it
was built for. A BaselinePipeline brings any window to those dimensions by
resampling it to the model's rate and filling the blocks of missing sensors,
either with training means or with copies of the sensors present.
"""
__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import itertools
import typing

import numpy as np

from danakit import layers
from danakit import signals
from danakit import tensor


IMPUTATIONS = ('mean', 'copy', 'none')


class BaselinePipeline(typing.NamedTuple):
    """Preprocessing in front of a fixed-dimension model.

    Attributes:
      rate_hz: The model's sampling rate.
      sensors: The model's sensors, in stream order.
      imputation: 'mean', 'copy' or 'none'.
      spec: The wrapped ModelSpec, or None.
    """
    rate_hz: float
    sensors: tuple
    imputation: str = 'copy'
    spec: typing.Optional[layers.ModelSpec] = None

    def validate(self):
        if self.imputation not in IMPUTATIONS:
            raise signals.ConfigurationError(
                f"Unknown imputation '{self.imputation}'; choose from {IMPUTATIONS}")
        if self.spec is not None and self.spec.adaptive:
            raise layers.SpecError("Baselines wrap models without DAP")
        return self


def _missing(sensors, pipeline):
    unknown = set(sensors).difference(pipeline.sensors)
    if unknown:
        raise signals.SelectionError(
            f"Sensors {sorted(unknown)} not in the pipeline's {list(pipeline.sensors)}")
    missing = [name for name in pipeline.sensors if name not in set(sensors)]
    if missing and pipeline.imputation == 'none':
        raise tensor.DimensionError(
            f"Sensors {missing} are missing and the pipeline does not impute; the model "
            f"needs {list(pipeline.sensors)}")
    return missing


def preprocess(window, pipeline, stats=None):
    """Bring one window to the pipeline's dimensions.

    Args:
      window: A TimeWindow with a subset of the pipeline's sensors.
      pipeline: A BaselinePipeline.
      stats: NormStats over the pipeline's streams; required for 'mean'.
    Returns:
      A TimeWindow at pipeline.rate_hz holding all pipeline sensors.
    Raises:
      DimensionError: If sensors are missing and imputation is 'none'.
      ConfigurationError: If 'mean' imputation has no statistics.
    """
    missing = _missing(window.sensors, pipeline)
    if window.rate_hz != pipeline.rate_hz:
        window = signals.resample(window, pipeline.rate_hz)
    if not missing:
        return window
    if pipeline.imputation == 'copy':
        return signals.impute_copy(window, pipeline.sensors)
    if stats is None:
        raise signals.ConfigurationError("Mean imputation needs training statistics")
    return signals.impute_mean(window, pipeline.sensors, stats)


def copy_streams(sensors, present, axes_per_sensor=3):
    """Source stream of every stream of `sensors` under copy imputation.

    Present sensors keep their own streams; each missing sensor takes the
    block of the next present sensor, cycling in stream order.
    """
    order = [index for index, name in enumerate(sensors) if name in set(present)]
    if not order:
        raise signals.SelectionError("Copy imputation needs at least one present sensor")
    sources, copies = [], 0
    for index, name in enumerate(sensors):
        if name in set(present):
            source = index
        else:
            source = order[copies % len(order)]
            copies += 1
        sources.extend(source * axes_per_sensor + axis for axis in range(axes_per_sensor))
    return sources


def preprocess_dataset(dataset, pipeline, stats=None):
    """Vectorized preprocess() of every window of a LabeledDataset."""
    missing = _missing(dataset.sensors, pipeline)
    data = dataset.data
    if dataset.rate_hz != pipeline.rate_hz:
        data = signals.interpolate(data, signals.sample_count(pipeline.rate_hz,
                                                              dataset.duration_s))
    if missing:
        axes = dataset.axes_per_sensor
        # Spread the present blocks over a full-width array first.
        full = np.zeros(data.shape[:2] + (len(pipeline.sensors) * axes,))
        for position, name in enumerate(dataset.sensors):
            target = pipeline.sensors.index(name)
            full[..., target * axes:(target + 1) * axes] = data[..., position * axes:
                                                                 (position + 1) * axes]
        if pipeline.imputation == 'copy':
            full = full[..., copy_streams(pipeline.sensors, dataset.sensors, axes)]
        else:
            if stats is None:
                raise signals.ConfigurationError("Mean imputation needs training statistics")
            if len(stats.mean) != full.shape[-1]:
                raise signals.ConfigurationError(
                    f"Statistics cover {len(stats.mean)} streams; mask needs {full.shape[-1]}")
            for name in missing:
                index = pipeline.sensors.index(name)
                block = slice(index * axes, (index + 1) * axes)
                full[..., block] = np.asarray(stats.mean)[block]
        data = full
    return dataset._replace(data=data, rate_hz=pipeline.rate_hz,
                            sensors=tuple(pipeline.sensors))


def proper_subsets(count):
    """Non-empty proper subsets of range(count), lexicographically ordered."""
    subsets = [subset for size in range(1, count)
               for subset in itertools.combinations(range(count), size)]
    return sorted(subsets)


def augment_dataset(dataset):
    """Add one copy-imputed variant of every window per missing-sensor case.

    Args:
      dataset: A LabeledDataset with s >= 2 sensors.
    Returns:
      A LabeledDataset of size * (2^s - 1) windows: the originals followed by
      one block of variants per non-empty proper sensor subset.
    Raises:
      ConfigurationError: If the dataset has fewer than two sensors.
    """
    count = len(dataset.sensors)
    if count < 2:
        raise signals.ConfigurationError(
            f"Augmentation needs at least two sensors, got {list(dataset.sensors)}")
    blocks, labels = [dataset.data], [dataset.labels]
    for subset in proper_subsets(count):
        present = [dataset.sensors[index] for index in subset]
        streams = copy_streams(dataset.sensors, present, dataset.axes_per_sensor)
        blocks.append(dataset.data[..., streams])
        labels.append(dataset.labels)
    return dataset._replace(data=np.concatenate(blocks), labels=np.concatenate(labels))
