"""Dataset and checkpoint directories.

A dataset directory holds:

  manifest.json      UTF-8 JSON with sorted keys: schema version, window
                     shape, rate, duration, sensor and class names, the
                     window count of every split, and the generator manifest.
  <split>.f64        The windows of a split, row-major little-endian float64,
                     windows concatenated.
  <split>.labels     The class ids of a split, little-endian int32.

A checkpoint directory holds a manifest.json naming the model notation, the
build dimensions and every parameter with its shape, and one raw float64 file
per parameter, named exactly after it.

Every file is a deterministic function of its content, so equal datasets and
checkpoints are written byte-for-byte identically.
"""
__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import json
import logging
import os
from os import path

import numpy as np

from danakit import layers
from danakit import signals


class FormatError(Exception):
    """A dataset or checkpoint directory that cannot be read."""


SCHEMA_VERSION = 1

MANIFEST = 'manifest.json'

FLOAT_TYPE = np.dtype('<f8')
LABEL_TYPE = np.dtype('<i4')


def dumps(document):
    return json.dumps(document, sort_keys=True, indent=2) + '\n'


def write_json(filename, document):
    with open(filename, 'w', encoding='utf-8') as outfile:
        outfile.write(dumps(document))


def read_json(filename):
    try:
        with open(filename, encoding='utf-8') as infile:
            return json.load(infile)
    except FileNotFoundError:
        raise FormatError(f"Missing file {filename}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"Invalid JSON in {filename}: {exc}") from None


def prepare_directory(dirname, overwrite=False):
    """Create an output directory, refusing to reuse a non-empty one.

    Raises:
      FileExistsError: If the directory has content and overwrite is false.
    """
    if path.isdir(dirname) and os.listdir(dirname) and not overwrite:
        raise FileExistsError(f"Output directory {dirname} is not empty")
    os.makedirs(dirname, exist_ok=True)


def _check_schema(manifest, kind, dirname):
    if manifest.get('schema') != SCHEMA_VERSION or manifest.get('kind') != kind:
        raise FormatError(
            f"{dirname} is not a version {SCHEMA_VERSION} {kind} directory")


def write_dataset(dirname, datasets, overwrite=False):
    """Write the splits of a dataset to a directory.

    Args:
      dirname: The output directory.
      datasets: LabeledDatasets sharing rate, duration, sensors and classes,
        with distinct split tags.
      overwrite: Allow writing into a non-empty directory.
    Returns:
      The manifest document.
    """
    first = datasets[0]
    for dataset in datasets:
        dataset.validate()
        if (dataset.data.shape[1:], dataset.rate_hz, dataset.sensors, dataset.classes) != (
                first.data.shape[1:], first.rate_hz, first.sensors, first.classes):
            raise FormatError(f"Split '{dataset.split}' does not match split '{first.split}'")
    prepare_directory(dirname, overwrite)
    manifest = {
        'schema': SCHEMA_VERSION,
        'kind': 'dataset',
        'samples': first.data.shape[1],
        'streams': first.data.shape[2],
        'rate_hz': first.rate_hz,
        'duration_s': first.duration_s,
        'axes_per_sensor': first.axes_per_sensor,
        'sensors': list(first.sensors),
        'classes': list(first.classes),
        'splits': {dataset.split: dataset.size for dataset in datasets},
        'generator': first.manifest,
    }
    for dataset in datasets:
        base = path.join(dirname, dataset.split)
        with open(base + '.f64', 'wb') as outfile:
            outfile.write(np.ascontiguousarray(dataset.data, dtype=FLOAT_TYPE).tobytes())
        with open(base + '.labels', 'wb') as outfile:
            outfile.write(np.ascontiguousarray(dataset.labels, dtype=LABEL_TYPE).tobytes())
    write_json(path.join(dirname, MANIFEST), manifest)
    logging.info("Wrote %s to %s", ', '.join(f'{split}: {count}' for split, count
                                             in manifest['splits'].items()), dirname)
    return manifest


def _read_array(filename, dtype, shape):
    try:
        with open(filename, 'rb') as infile:
            content = infile.read()
    except FileNotFoundError:
        raise FormatError(f"Missing file {filename}") from None
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(content) != expected:
        raise FormatError(f"{filename} holds {len(content)} bytes; expected {expected}")
    return np.frombuffer(content, dtype=dtype).reshape(shape)


def read_dataset(dirname, split):
    """Read one split of a dataset directory.

    Returns:
      A LabeledDataset whose manifest is the generator manifest.
    Raises:
      FormatError: If the manifest, the split or a file is missing or corrupt.
    """
    manifest = read_json(path.join(dirname, MANIFEST))
    _check_schema(manifest, 'dataset', dirname)
    try:
        count = manifest['splits'][split]
    except KeyError:
        raise FormatError(
            f"No split '{split}' in {dirname}; found {sorted(manifest['splits'])}") from None
    shape = (count, manifest['samples'], manifest['streams'])
    base = path.join(dirname, split)
    data = _read_array(base + '.f64', FLOAT_TYPE, shape).astype(np.float64)
    labels = _read_array(base + '.labels', LABEL_TYPE, (count,)).astype(np.int64)
    dataset = signals.LabeledDataset(
        data, labels, manifest['rate_hz'], manifest['duration_s'], tuple(manifest['sensors']),
        tuple(manifest['classes']), split, manifest['axes_per_sensor'], manifest['generator'])
    try:
        return dataset.validate()
    except signals.ConfigurationError as exc:
        raise FormatError(f"{dirname}: {exc}") from None


def write_checkpoint(dirname, spec, params, metadata=None, overwrite=True):
    """Write a model and its parameters.

    Each parameter is stored raw, as little-endian float64, in a file named
    after the parameter.

    Args:
      dirname: The output directory.
      spec: A ModelSpec.
      params: Its ParameterSet.
      metadata: A JSON-serializable dict stored alongside (dataset dimensions,
        normalization statistics, training config).
      overwrite: Allow writing into a non-empty directory.
    Returns:
      The manifest document.
    """
    prepare_directory(dirname, overwrite)
    entries = []
    for name, array in params.arrays.items():
        with open(path.join(dirname, name), 'wb') as outfile:
            outfile.write(np.ascontiguousarray(array, dtype=FLOAT_TYPE).tobytes())
        entries.append({'name': name, 'shape': list(array.shape), 'file': name})
    manifest = {
        'schema': SCHEMA_VERSION,
        'kind': 'checkpoint',
        'model': spec.notation(),
        'classes': spec.classes,
        'streams': params.streams,
        'samples': params.samples,
        'parameters': entries,
        'digest': params.digest(),
        'metadata': metadata or {},
    }
    write_json(path.join(dirname, MANIFEST), manifest)
    return manifest


def read_checkpoint(dirname):
    """Read a checkpoint directory.

    Returns:
      A (spec, params, metadata) triple.
    Raises:
      FormatError: On missing files, mismatched shapes or a digest mismatch.
    """
    manifest = read_json(path.join(dirname, MANIFEST))
    _check_schema(manifest, 'checkpoint', dirname)
    spec = layers.compile_spec(manifest['model'])
    arrays = {}
    for entry in manifest['parameters']:
        array = _read_array(path.join(dirname, entry['file']), FLOAT_TYPE,
                            tuple(entry['shape'])).astype(np.float64)
        array.setflags(write=False)
        arrays[entry['name']] = array
    expected = dict(layers.parameter_shapes(spec, manifest['streams'], manifest['samples']))
    if {name: array.shape for name, array in arrays.items()} != expected:
        raise FormatError(f"{dirname}: parameters do not match model '{manifest['model']}'")
    params = layers.ParameterSet(arrays, manifest['streams'], manifest['samples'])
    if params.digest() != manifest['digest']:
        raise FormatError(f"{dirname}: parameter digest mismatch")
    return spec, params, manifest['metadata']
