"""Dimension-adaptive max pooling.

Feature maps of any (samples, streams) extent are pooled down to a fixed
(W, H) grid per map. Sample windows use exact rational pooling ratios with
each window edge rounded half up. When sensors are missing the map has fewer
streams than H; it is then concatenated with copies of itself along the
streams axis, truncated to max(h', H) streams, and pooled with an integer
stream stride.

The whole pooling is expressed as a table of flat cell indices per output
cell, which is consumed by the generic 'max_window' primitive. Indices always
refer to the original, unreplicated map, so gradients routed through a
replicated copy land on the source stream.
"""
__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

from fractions import Fraction
from functools import lru_cache as cache
import math
import typing

import numpy as np

from danakit import tensor


class UnsupportedDimensionsError(tensor.DimensionError):
    """The input feature maps cannot be pooled to the requested grid."""


class DapParams(typing.NamedTuple):
    """Output grid of the pooling layer.

    Attributes:
      W: Output extent along the samples axis.
      H: Output extent along the streams axis.
      axes_per_sensor: Streams contributed by one sensor (3 for motion
        sensors); used to decide how many copies of the map are appended.
    """
    W: int
    H: int
    axes_per_sensor: int = 3

    def validate(self):
        if self.W < 1 or self.H < 1:
            raise ValueError(f"Invalid pooling grid {self.W}x{self.H}")
        if self.axes_per_sensor < 1:
            raise ValueError(f"Invalid axes per sensor: {self.axes_per_sensor}")
        return self


# The result of a forward pass outside of a tape.
#
# Attributes:
#   output: An array of shape (..., W, H).
#   sources: Integer array of shape (..., W*H), the flat index into the input
#     (samples, streams) plane of each window's first argmax.
#   input_shape: The shape of the pooled input.
DapRecord = typing.NamedTuple('DapRecord', [('output', np.ndarray),
                                            ('sources', np.ndarray),
                                            ('input_shape', tuple)])


def round_half_up(value):
    """Round a Fraction to the nearest integer, halves going up."""
    return math.floor(value + Fraction(1, 2))


def replication_count(streams, params):
    """Number of extra copies of the map appended along the streams axis."""
    return max(math.ceil((params.H - streams) / params.axes_per_sensor), 0)


def check_dimensions(samples, streams, params):
    """Raise UnsupportedDimensionsError if (samples, streams) cannot be pooled."""
    if samples < params.W:
        raise UnsupportedDimensionsError(
            f"DAP: {samples} samples is fewer than the {params.W} output rows")
    copies = replication_count(streams, params)
    if streams < 1 or streams * (copies + 1) < params.H:
        raise UnsupportedDimensionsError(
            f"DAP: {streams} streams cannot be replicated up to {params.H} "
            f"({copies} copies of {params.axes_per_sensor}-axis sensors)")


def _clamp(lo, hi, width):
    lo = min(lo, width - 1)
    hi = min(hi, width)
    if hi <= lo:
        hi = lo + 1
    return lo, hi


def sample_windows(samples, params):
    """Return the [lo, hi) sample range of each output row."""
    ratio = Fraction(samples, params.W)
    windows = []
    for i in range(params.W):
        lo, hi = round_half_up(i * ratio), round_half_up((i + 1) * ratio)
        windows.append(_clamp(lo, hi, samples))
    return windows


def stream_windows(streams, params):
    """Return the [lo, hi) range of each output column in replicated coordinates.

    The replicated map has max(streams, H) columns; column c of it is stream
    c % streams of the input.
    """
    copies = replication_count(streams, params)
    width = max(streams, params.H)
    windows = []
    if copies == 0:
        ratio = Fraction(streams, params.H)
        for j in range(params.H):
            lo, hi = round_half_up(j * ratio), round_half_up((j + 1) * ratio)
            windows.append(_clamp(lo, hi, width))
    else:
        stride = math.floor(Fraction((copies + 1) * streams, params.H))
        for j in range(params.H):
            windows.append(_clamp(j * stride, (j + 1) * stride, width))
    return windows


@cache(maxsize=512)
def index_table(samples, streams, params):
    """Build the gather table for pooling a (samples, streams) plane.

    Args:
      samples: Input extent along the samples axis, w'.
      streams: Input extent along the streams axis, h'.
      params: A DapParams instance.
    Returns:
      A read-only integer array of shape (W*H, K). Row i*H + j lists the flat
      input cells of output cell (i, j) in scan order (samples outer), padded
      with -1.
    Raises:
      UnsupportedDimensionsError: If the dimensions cannot be pooled.
    """
    check_dimensions(samples, streams, params)
    rows = sample_windows(samples, params)
    cols = stream_windows(streams, params)
    cells = []
    for rlo, rhi in rows:
        for clo, chi in cols:
            cells.append([r * streams + c % streams
                          for r in range(rlo, rhi)
                          for c in range(clo, chi)])
    width = max(len(window) for window in cells)
    table = np.full((len(cells), width), -1, dtype=np.int64)
    for row, window in zip(table, cells):
        row[:len(window)] = window
    table.setflags(write=False)
    return table


def dap_forward(fmaps, params):
    """Pool feature maps to the fixed grid.

    Args:
      fmaps: An array of shape (..., w', h'); typically (M, w', h') or
        (batch, M, w', h').
      params: A DapParams instance.
    Returns:
      A DapRecord whose output has shape (..., W, H).
    Raises:
      UnsupportedDimensionsError: If w' < W or replication cannot reach H.
    """
    fmaps = np.asarray(fmaps, dtype=np.float64)
    table = index_table(fmaps.shape[-2], fmaps.shape[-1], params)
    maxima, sources = tensor.window_max(fmaps, table)
    output = maxima.reshape(fmaps.shape[:-2] + (params.W, params.H))
    return DapRecord(output, sources, fmaps.shape)


def dap_backward(record, upstream):
    """Route an upstream gradient of shape (..., W, H) back to the input maps.

    Each value goes to the argmax cell of its window, at original
    coordinates; collisions are summed.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    lead = record.input_shape[:-2]
    return tensor.window_max_grad(record.input_shape, record.sources,
                                  upstream.reshape(lead + (-1,)))


def dap_layer(tape, fmaps, params):
    """Apply the pooling on a tape to a (..., w', h') Tensor."""
    table = index_table(fmaps.shape[-2], fmaps.shape[-1], params)
    return tape.max_window(fmaps, table=table, out_shape=(params.W, params.H))
