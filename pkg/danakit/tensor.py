"""Dense tensors with reverse-mode differentiation.

A Tape records every primitive applied through it, in order (a Wengert list).
Replaying the records backwards from a scalar loss yields the gradient of
every named leaf tensor (a trainable parameter). Gradients are added into a
per-parameter accumulator which is only cleared by accumulate_and_reset(), so
that several backward passes can be summed before a single optimizer step.

All values are 64-bit reals. Tensors are immutable once created.
"""
__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import collections
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(Exception):
    """Operand shapes are incompatible with an operation."""


class EmptyTapeError(Exception):
    """A backward pass was requested on a tape without any recorded forward."""


_uids = itertools.count()


class Tensor:
    """An immutable 64-bit real array, optionally named as a trainable leaf."""
    __slots__ = ('data', 'name', 'uid')

    def __init__(self, data, name=None):
        array = np.array(data, dtype=np.float64)
        array.setflags(write=False)
        self.data = array
        self.name = name
        self.uid = next(_uids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        name = f' {self.name!r}' if self.name else ''
        return f'Tensor({self.shape}{name})'


def describe(tensor):
    """A short operand description for error messages."""
    if tensor.name:
        return f'{tensor.name}{tensor.shape}'
    return f'tensor{tensor.shape}'


# A record on the tape.
#
# Attributes:
#   kind: The name of the primitive.
#   inputs: The operand Tensor instances.
#   output: The produced Tensor.
#   vjp: A function of the output gradient returning one gradient array per
#     operand (or None for operands without a gradient, e.g. integer labels).
Record = collections.namedtuple('Record', 'kind inputs output vjp')


# Map of primitive names to their implementation. Populated by the
# @primitive decorator; every implementation receives the operand arrays and
# keyword attributes and returns a (value, vjp) pair.
PRIMITIVES = {}


def primitive(name):
    def decorator(func):
        PRIMITIVES[name] = func
        return func
    return decorator


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to an operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{name}: operand shapes {a.shape} and {b.shape} do not broadcast") from None


@primitive('matmul')
def matmul_(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: operand shapes {a.shape} and {b.shape} do not align")
    def vjp(grad):
        return [grad @ b.T, a.T @ grad]
    return a @ b, vjp


@primitive('add')
def add_(a, b):
    _broadcast_shape('add', a, b)
    def vjp(grad):
        return [_unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)]
    return a + b, vjp


@primitive('mul')
def mul_(a, b):
    _broadcast_shape('mul', a, b)
    def vjp(grad):
        return [_unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)]
    return a * b, vjp


@primitive('tanh')
def tanh_(x):
    value = np.tanh(x)
    def vjp(grad):
        return [grad * (1.0 - value * value)]
    return value, vjp


def _sigmoid(x):
    # Split on sign to avoid overflow in exp().
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    expx = np.exp(x[~positive])
    out[~positive] = expx / (1.0 + expx)
    return out


@primitive('sigmoid')
def sigmoid_(x):
    value = _sigmoid(x)
    def vjp(grad):
        return [grad * value * (1.0 - value)]
    return value, vjp


@primitive('relu')
def relu_(x):
    mask = x > 0
    def vjp(grad):
        return [grad * mask]
    return np.where(mask, x, 0.0), vjp


@primitive('sum')
def sum_(x):
    def vjp(grad):
        return [np.broadcast_to(grad, x.shape).copy()]
    return np.asarray(x.sum()), vjp


@primitive('reshape')
def reshape_(x, shape):
    try:
        value = x.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    def vjp(grad):
        return [grad.reshape(x.shape)]
    return value, vjp


@primitive('transpose')
def transpose_(x, axes):
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = np.argsort(axes)
    def vjp(grad):
        return [grad.transpose(inverse)]
    return x.transpose(axes), vjp


@primitive('slice')
def slice_(x, index):
    try:
        value = x[index]
    except IndexError as exc:
        raise DimensionError(f"slice: {index} out of range for shape {x.shape}") from exc
    def vjp(grad):
        full = np.zeros_like(x)
        full[index] = grad
        return [full]
    return value, vjp


@primitive('concat')
def concat_(*arrays, axis=0):
    shapes = [array.shape for array in arrays]
    try:
        value = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {shapes} differ off axis {axis}") from None
    bounds = np.cumsum([shape[axis] for shape in shapes])[:-1]
    def vjp(grad):
        return np.split(grad, bounds, axis=axis)
    return value, vjp


def conv_padding(kernel, padding):
    """Return the (before, after) zero padding of one axis for a stride 1 convolution.

    Args:
      kernel: The kernel extent along the axis.
      padding: 'same' or 'valid'.
    Returns:
      A pair of integers. With 'same' the odd cell goes after, as TensorFlow
      pads.
    """
    if padding == 'valid':
        return (0, 0)
    total = kernel - 1
    return (total // 2, total - total // 2)


@primitive('conv2d')
def conv2d_(x, kernel, padding='valid'):
    """2D cross-correlation, stride 1.

    x has shape (batch, in_maps, samples, streams) and kernel has shape
    (out_maps, in_maps, k1, k2).
    """
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv2d: input {x.shape} and kernel {kernel.shape} do not agree on input maps")
    _, _, k1, k2 = kernel.shape
    pad1, pad2 = conv_padding(k1, padding), conv_padding(k2, padding)
    padded = np.pad(x, ((0, 0), (0, 0), pad1, pad2))
    if padded.shape[2] < k1 or padded.shape[3] < k2:
        raise DimensionError(
            f"conv2d: kernel {(k1, k2)} larger than input {x.shape[2:]} with {padding} padding")
    windows = sliding_window_view(padded, (k1, k2), axis=(2, 3))
    value = np.einsum('ncwhij,ocij->nowh', windows, kernel, optimize=True)
    out_w, out_h = value.shape[2:]
    def vjp(grad):
        gkernel = np.einsum('ncwhij,nowh->ocij', windows, grad, optimize=True)
        gpadded = np.zeros_like(padded)
        for i in range(k1):
            for j in range(k2):
                gpadded[:, :, i:i + out_w, j:j + out_h] += np.einsum(
                    'nowh,oc->ncwh', grad, kernel[:, :, i, j], optimize=True)
        gx = gpadded[:, :, pad1[0]:pad1[0] + x.shape[2], pad2[0]:pad2[0] + x.shape[3]]
        return [gx, gkernel]
    return value, vjp


def window_max(values, table):
    """Gather-max over windows of the last two axes.

    Args:
      values: An array of shape (..., w, h).
      table: An integer array of shape (P, K) of flat cell indices into the
        trailing (w, h) plane, one row per output cell, listed in scan order;
        rows shorter than K are padded with -1.
    Returns:
      A pair of (maxima, sources), both of shape (..., P): the window maxima
      and the flat index of the first cell reaching it in scan order.
    """
    lead = values.shape[:-2]
    flat = values.reshape(lead + (-1,))
    valid = table >= 0
    safe = np.where(valid, table, 0)
    gathered = np.where(valid, flat[..., safe], -np.inf)
    argmax = np.argmax(gathered, axis=-1)
    maxima = np.take_along_axis(gathered, argmax[..., None], axis=-1)[..., 0]
    sources = np.take_along_axis(
        np.broadcast_to(safe, lead + safe.shape), argmax[..., None], axis=-1)[..., 0]
    return maxima, sources


def window_max_grad(shape, sources, grad):
    """Route window gradients back to their argmax cells, summing collisions.

    Args:
      shape: The (..., w, h) shape of the pooled values.
      sources: The flat argmax indices returned by window_max().
      grad: Upstream gradient of shape (..., P).
    Returns:
      The gradient with respect to the pooled values.
    """
    rows = int(np.prod(shape[:-2], dtype=np.int64))
    plane = shape[-2] * shape[-1]
    out = np.zeros((rows, plane))
    index = sources.reshape(rows, -1)
    np.add.at(out, (np.arange(rows)[:, None], index), grad.reshape(rows, -1))
    return out.reshape(shape)


@primitive('max_window')
def max_window_(x, table, out_shape):
    if x.ndim < 2:
        raise DimensionError(f"max_window: input {x.shape} has fewer than two axes")
    if table.size and table.max() >= x.shape[-2] * x.shape[-1]:
        raise DimensionError(f"max_window: window table exceeds input plane {x.shape[-2:]}")
    maxima, sources = window_max(x, table)
    lead = x.shape[:-2]
    def vjp(grad):
        return [window_max_grad(x.shape, sources, grad.reshape(lead + (-1,)))]
    return maxima.reshape(lead + tuple(out_shape)), vjp


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@primitive('softmax_crossentropy')
def softmax_crossentropy_(logits, labels):
    """Mean categorical cross-entropy of a (batch, classes) score matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"softmax_crossentropy: scores {logits.shape} and labels {labels.shape} disagree")
    count = logits.shape[0]
    logprob = log_softmax(logits)
    value = -logprob[np.arange(count), labels].mean()
    def vjp(grad):
        dlogits = np.exp(logprob)
        dlogits[np.arange(count), labels] -= 1.0
        return [grad * dlogits / count]
    return np.asarray(value), vjp


class Tape:
    """Records primitives and accumulates parameter gradients.

    A tape is single-owner. Each backward pass consumes the records of the
    forward pass that preceded it; gradients of named leaves are added into
    the accumulator until accumulate_and_reset() is called.
    """

    def __init__(self):
        self.records = []
        self.accumulator = {}
        self.passes = 0

    def constant(self, data):
        return Tensor(data)

    def apply(self, kind, *inputs, **attrs):
        """Apply and record a primitive.

        Args:
          kind: A primitive name from PRIMITIVES.
          *inputs: Tensor operands.
          **attrs: Non-differentiable attributes (padding, shapes, labels...).
        Returns:
          The output Tensor.
        Raises:
          DimensionError: If the operand shapes do not fit the primitive.
        """
        try:
            func = PRIMITIVES[kind]
        except KeyError:
            raise ValueError(f"Unknown primitive '{kind}'") from None
        try:
            value, vjp = func(*(tensor.data for tensor in inputs), **attrs)
        except DimensionError as exc:
            operands = ', '.join(describe(tensor) for tensor in inputs)
            raise DimensionError(f"{exc} (operands: {operands})") from None
        output = Tensor(value)
        self.records.append(Record(kind, inputs, output, vjp))
        return output

    def __getattr__(self, kind):
        # Shorthand: tape.matmul(a, b) is tape.apply('matmul', a, b).
        if kind in PRIMITIVES:
            return lambda *inputs, **attrs: self.apply(kind, *inputs, **attrs)
        raise AttributeError(kind)

    def backward(self, loss):
        """Propagate d(loss) back through the recorded primitives.

        Args:
          loss: A scalar Tensor produced on this tape.
        Returns:
          A dict of parameter name to the gradient of this pass. The same
          gradients are added into the accumulator.
        Raises:
          EmptyTapeError: If nothing was recorded since the last backward.
          DimensionError: If the loss is not a scalar.
        """
        if not self.records:
            raise EmptyTapeError("backward() called before any forward pass")
        if loss.size != 1:
            raise DimensionError(f"backward: loss must be a scalar, not {loss.shape}")
        if not any(record.output is loss for record in self.records):
            raise ValueError("backward: loss was not produced on this tape")

        grads = {loss.uid: np.ones(loss.shape)}
        leaves = {}
        for record in reversed(self.records):
            grad = grads.pop(record.output.uid, None)
            if grad is None:
                continue
            for tensor, igrad in zip(record.inputs, record.vjp(grad)):
                if igrad is None:
                    continue
                if tensor.uid in grads:
                    grads[tensor.uid] = grads[tensor.uid] + igrad
                else:
                    grads[tensor.uid] = igrad
                if tensor.name is not None:
                    leaves[tensor.uid] = tensor

        result = {}
        for uid, tensor in sorted(leaves.items()):
            grad = grads.get(uid)
            if grad is None:
                continue
            result[tensor.name] = result.get(tensor.name, 0.0) + grad
        for name, grad in result.items():
            if name in self.accumulator:
                self.accumulator[name] = self.accumulator[name] + grad
            else:
                self.accumulator[name] = np.array(grad, dtype=np.float64)

        self.records = []
        self.passes += 1
        return result

    def discard(self):
        """Drop recorded primitives without a backward pass (evaluation)."""
        self.records = []

    def accumulate_and_reset(self):
        """Return the gradients summed over all passes since the last reset.

        Returns:
          A dict of parameter name to summed gradient array.
        """
        summed = self.accumulator
        self.accumulator = {}
        self.passes = 0
        return summed
