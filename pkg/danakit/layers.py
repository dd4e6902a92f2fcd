"""Layers, model specifications and the model forward pass.

A model is described in layer notation (see model_parser) and compiled into a
ModelSpec. Compilation checks the structure of the layer graph: the spatial
stage (Conv2D, MaxPool2D, DAP) comes first, followed by an optional Flatten
and the head (LSTM, Dense), ending with a Dense classifier. A model with a
DAP layer is 'adaptive': it accepts windows of any sample count and any
feasible stream count. Other models are bound to the (samples, streams) they
were built for.

Windows enter the first layer as a single input map of (samples, streams).
"""
__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import hashlib
import typing
from functools import lru_cache as cache

import numpy as np

from danakit import dap
from danakit import model_parser
from danakit import signals
from danakit import tensor


class SpecError(Exception):
    """An invalid model specification."""


class LayerSpec(typing.NamedTuple):
    """One compiled layer.

    Attributes:
      kind: One of 'conv2d', 'maxpool2d', 'dap', 'flatten', 'dropout',
        'lstm', 'dense'.
      units: Neuron count of conv2d, lstm and dense layers.
      kernel: (k1, k2) kernel size of conv2d layers.
      padding: 'same' or 'valid' for conv2d layers.
      activation: Activation name of conv2d, lstm and dense layers.
      rate: Drop probability of dropout layers.
      window: (p1, p2) of maxpool2d layers, (W, H) of dap layers.
      rank: 1 or 2 for explicit flatten layers, None to follow the head.
    """
    kind: str
    units: typing.Optional[int] = None
    kernel: typing.Optional[tuple] = None
    padding: typing.Optional[str] = None
    activation: typing.Optional[str] = None
    rate: typing.Optional[float] = None
    window: typing.Optional[tuple] = None
    rank: typing.Optional[int] = None

    def notation(self):
        """Render the layer back in canonical layer notation."""
        if self.kind == 'conv2d':
            return 'Conv2D({},({},{}),{},{})'.format(
                self.units, *self.kernel, self.padding, self.activation)
        if self.kind == 'maxpool2d':
            return 'MaxPool2D(({},{}))'.format(*self.window)
        if self.kind == 'dap':
            return 'DAP({},{})'.format(*self.window)
        if self.kind == 'flatten':
            return 'Flatten{}D()'.format(self.rank or 'X')
        if self.kind == 'dropout':
            return 'Dropout({!r})'.format(self.rate)
        if self.kind == 'lstm':
            return 'LSTM({},{})'.format(self.units, self.activation)
        return 'Dense({},{})'.format(self.units, self.activation)


class ModelSpec(typing.NamedTuple):
    """A compiled model.

    Attributes:
      layers: A tuple of LayerSpec.
      classes: The classifier head size C.
      adaptive: True if the model pools with a DAP layer.
    """
    layers: tuple
    classes: int
    adaptive: bool

    @property
    def dap_params(self):
        for layer in self.layers:
            if layer.kind == 'dap':
                return dap.DapParams(*layer.window)
        return None

    def notation(self):
        return ', '.join(layer.notation() for layer in self.layers)


ACTIVATIONS = {'linear', 'relu', 'tanh', 'sigmoid'}

# Layer kinds per stage of the graph.
SPATIAL = {'conv2d', 'maxpool2d', 'dap'}
HEAD = {'lstm', 'dense'}


# Map of lowercased layer names to functions compiling their arguments into a
# LayerSpec.
LAYERS = {}


def layer(*names):
    def decorator(func):
        for name in names:
            LAYERS[name.lower()] = func
        return func
    return decorator


def _expect(name, arguments, types):
    """Check positional argument types; trailing arguments may be omitted."""
    if len(arguments) > len(types):
        raise SpecError(f"{name}: expected at most {len(types)} arguments, got {len(arguments)}")
    for index, (argument, expected) in enumerate(zip(arguments, types)):
        if expected is float and isinstance(argument, int):
            continue
        if not isinstance(argument, expected):
            raise SpecError(f"{name}: argument {index + 1} ({argument!r}) should be "
                            f"{getattr(expected, '__name__', expected)}")


def _positive(name, *values):
    for value in values:
        if value < 1:
            raise SpecError(f"{name}: sizes must be positive, got {value}")


def _activation(name, value, allowed=ACTIVATIONS):
    if value not in allowed:
        raise SpecError(f"{name}: unknown activation '{value}'")
    return value


@layer('Conv2D')
def compile_conv2d(name, arguments):
    _expect(name, arguments, (int, tuple, str, str))
    if len(arguments) < 2:
        raise SpecError(f"{name}: expected units and kernel size")
    units, kernel = arguments[0], arguments[1]
    padding = arguments[2] if len(arguments) > 2 else 'valid'
    activation = _activation(name, arguments[3] if len(arguments) > 3 else 'linear')
    _positive(name, units, *kernel)
    if padding not in ('same', 'valid'):
        raise SpecError(f"{name}: padding must be 'same' or 'valid', not '{padding}'")
    return LayerSpec('conv2d', units=units, kernel=kernel, padding=padding,
                     activation=activation)


@layer('MaxPool2D')
def compile_maxpool2d(name, arguments):
    _expect(name, arguments, (tuple,))
    if len(arguments) != 1:
        raise SpecError(f"{name}: expected a pool size")
    _positive(name, *arguments[0])
    return LayerSpec('maxpool2d', window=arguments[0])


@layer('DAP')
def compile_dap(name, arguments):
    _expect(name, arguments, (int, int))
    if len(arguments) != 2:
        raise SpecError(f"{name}: expected the output grid W and H")
    _positive(name, *arguments)
    return LayerSpec('dap', window=tuple(arguments))


@layer('Flatten1D', 'Flatten2D', 'FlattenXD', 'Flatten')
def compile_flatten(name, arguments):
    _expect(name, arguments, ())
    rank = {'flatten1d': 1, 'flatten2d': 2}.get(name.lower())
    return LayerSpec('flatten', rank=rank)


@layer('Dropout')
def compile_dropout(name, arguments):
    _expect(name, arguments, (float,))
    if len(arguments) != 1:
        raise SpecError(f"{name}: expected a probability")
    rate = float(arguments[0])
    if not 0 <= rate < 1:
        raise SpecError(f"{name}: probability {rate} not in [0, 1)")
    return LayerSpec('dropout', rate=rate)


@layer('LSTM')
def compile_lstm(name, arguments):
    _expect(name, arguments, (int, str))
    if not arguments:
        raise SpecError(f"{name}: expected units")
    _positive(name, arguments[0])
    activation = _activation(name, arguments[1] if len(arguments) > 1 else 'tanh')
    return LayerSpec('lstm', units=arguments[0], activation=activation)


@layer('Dense')
def compile_dense(name, arguments):
    _expect(name, arguments, (int, str))
    if not arguments:
        raise SpecError(f"{name}: expected units")
    _positive(name, arguments[0])
    activation = _activation(name, arguments[1] if len(arguments) > 1 else 'linear',
                             ACTIVATIONS | {'softmax'})
    return LayerSpec('dense', units=arguments[0], activation=activation)


def _next_head(layers, index):
    """The kind of the first layer after index that is not a dropout."""
    for spec in layers[index + 1:]:
        if spec.kind != 'dropout':
            return spec.kind
    return None


def validate(layers):
    """Check the structure of a layer sequence.

    Raises:
      SpecError: If the layers do not form a valid model.
    """
    if not layers:
        raise SpecError("A model needs at least one layer")
    last = layers[-1]
    if last.kind != 'dense':
        raise SpecError("A model must end with a Dense classifier")
    for spec in layers[:-1]:
        if spec.activation == 'softmax':
            raise SpecError("Only the final Dense layer may use softmax")

    in_head = False
    for index, spec in enumerate(layers):
        following = _next_head(layers, index)
        if spec.kind in SPATIAL and in_head:
            raise SpecError(f"{spec.notation()} cannot follow the flatten or head layers")
        if spec.kind == 'flatten':
            if in_head:
                raise SpecError("Flatten must come before the head layers, once")
            if following not in HEAD:
                raise SpecError("Flatten must be followed by a Dense or LSTM layer")
            if spec.rank is not None and spec.rank != (2 if following == 'lstm' else 1):
                raise SpecError(f"{spec.notation()} does not match the following {following}")
        if spec.kind == 'dense' and following == 'lstm':
            raise SpecError("An LSTM layer cannot follow a Dense layer")
        if spec.kind in HEAD or spec.kind == 'flatten':
            in_head = True

    pools = [index for index, spec in enumerate(layers) if spec.kind == 'dap']
    if len(pools) > 1:
        raise SpecError("Adaptive models contain exactly one DAP layer")
    if pools:
        convs = [index for index, spec in enumerate(layers) if spec.kind == 'conv2d']
        if convs and convs[-1] > pools[0]:
            raise SpecError("DAP must follow the last convolution")
        for spec in layers:
            if spec.kind == 'conv2d' and spec.padding != 'same':
                raise SpecError(
                    f"{spec.notation()}: adaptive models require 'same' padding")
            if spec.kind == 'maxpool2d':
                raise SpecError(f"{spec.notation()}: adaptive models pool with DAP only")


def compile_layers(nodes):
    """Compile parsed layer nodes into LayerSpec instances."""
    layers = []
    for node in nodes:
        try:
            compiler = LAYERS[node.name.lower()]
        except KeyError:
            raise SpecError(f"Unknown layer '{node.name}' (at {node.position})") from None
        layers.append(compiler(node.name, node.arguments))
    return tuple(layers)


def compile_spec(text):
    """Parse and compile a model written in layer notation.

    Args:
      text: A string in layer notation.
    Returns:
      A ModelSpec.
    Raises:
      model_parser.ParseError: If the notation does not parse.
      SpecError: If the layers do not form a valid model.
    """
    layers = compile_layers(model_parser.parse(text))
    validate(layers)
    adaptive = any(spec.kind == 'dap' for spec in layers)
    return ModelSpec(layers, layers[-1].units, adaptive)


# Named architectures, formatted with the number of classes. The toy pair has
# identical parameter counts: MaxPool2D((10,1)) over 50x6 windows and
# DAP(5,6) both feed 5 rows of 6x5 features to the LSTM.
PRESETS = {
    'toy_dana': ("Conv2D(5,(3,3),same,relu), Conv2D(5,(3,3),same,relu), "
                 "DAP(5,6), LSTM(5), Dense({classes},softmax)"),
    'toy_original': ("Conv2D(5,(3,3),same,relu), Conv2D(5,(3,3),same,relu), "
                     "MaxPool2D((10,1)), LSTM(5), Dense({classes},softmax)"),
    'cnn_fnn': ("Conv2D(32,(5,1),same,relu), Conv2D(32,(5,1),same,relu), "
                "MaxPool2D((8,1)), Flatten1D(), Dense(100,relu), Dropout(0.5), "
                "Dense({classes},softmax)"),
    'cnn_fnn_dana': ("Conv2D(32,(5,1),same,relu), Conv2D(32,(5,1),same,relu), "
                     "DAP(16,9), Flatten1D(), Dense(100,relu), Dropout(0.5), "
                     "Dense({classes},softmax)"),
    'cnn_rnn': ("Conv2D(16,(5,1),same,relu), Conv2D(16,(5,1),same,relu), "
                "MaxPool2D((4,1)), Flatten2D(), Dropout(0.5), LSTM(32), LSTM(32), "
                "Dense({classes},softmax)"),
    'cnn_rnn_dana': ("Conv2D(16,(5,1),same,relu), Conv2D(16,(5,1),same,relu), "
                     "DAP(32,9), Flatten2D(), Dropout(0.5), LSTM(32), LSTM(32), "
                     "Dense({classes},softmax)"),
}


def preset(name, classes):
    """Compile a named architecture for a number of classes."""
    try:
        template = PRESETS[name]
    except KeyError:
        raise SpecError(f"Unknown preset '{name}'; choose from {sorted(PRESETS)}") from None
    return compile_spec(template.format(classes=classes))


def resolve(model, classes):
    """Compile a preset name or a literal layer notation."""
    if model in PRESETS:
        return preset(model, classes)
    return compile_spec(model)


def parameter_prefix(index, spec):
    return f'{index:02d}_{spec.kind}'


def parameter_shapes(spec, streams, samples=None):
    """Compute the name and shape of every trainable parameter.

    Args:
      spec: A ModelSpec.
      streams: The input stream count h (the maximum for adaptive models).
      samples: The input sample count w; required for non-adaptive models.
    Returns:
      A list of (name, shape) pairs in layer order.
    Raises:
      SpecError: If the dimensions are missing or too small for the layers.
    """
    if not spec.adaptive and samples is None:
        raise SpecError("Non-adaptive models need the build-time sample count")
    maps, width, height = 1, samples, streams
    features = None
    shapes = []
    for index, layer_spec in enumerate(spec.layers):
        prefix = parameter_prefix(index, layer_spec)
        kind = layer_spec.kind
        if kind in HEAD and features is None:
            following = 'recurrent' if kind == 'lstm' else 'dense'
            features = height * maps if following == 'recurrent' else width * height * maps
        if kind == 'conv2d':
            k1, k2 = layer_spec.kernel
            shapes.append((f'{prefix}.kernel', (layer_spec.units, maps, k1, k2)))
            shapes.append((f'{prefix}.bias', (layer_spec.units,)))
            maps = layer_spec.units
            if layer_spec.padding == 'valid':
                width = None if width is None else width - k1 + 1
                height = height - k2 + 1
        elif kind == 'maxpool2d':
            p1, p2 = layer_spec.window
            width, height = width // p1, height // p2
        elif kind == 'dap':
            width, height = layer_spec.window
        elif kind == 'lstm':
            units = layer_spec.units
            shapes.append((f'{prefix}.input', (features, 4 * units)))
            shapes.append((f'{prefix}.recurrent', (units, 4 * units)))
            shapes.append((f'{prefix}.bias', (4 * units,)))
            features = units
        elif kind == 'dense':
            shapes.append((f'{prefix}.kernel', (features, layer_spec.units)))
            shapes.append((f'{prefix}.bias', (layer_spec.units,)))
            features = layer_spec.units
        if (width is not None and width < 1) or height < 1:
            raise SpecError(f"{layer_spec.notation()} leaves no {width}x{height} output")
    return shapes


def count_parameters(spec, streams, samples=None):
    return sum(int(np.prod(shape)) for _, shape in parameter_shapes(spec, streams, samples))


class ParameterSet(typing.NamedTuple):
    """Trainable parameters of a built model.

    Attributes:
      arrays: A dict of parameter name to read-only float64 array, in layer
        order.
      streams: The build-time stream count (the maximum for adaptive models).
      samples: The build-time sample count, or None for adaptive models.
    """
    arrays: dict
    streams: int
    samples: typing.Optional[int] = None

    def count(self):
        return sum(array.size for array in self.arrays.values())

    def digest(self):
        """A hex digest of the names, shapes and exact values."""
        hasher = hashlib.sha256()
        for name, array in self.arrays.items():
            hasher.update(name.encode('utf-8'))
            hasher.update(repr(array.shape).encode('ascii'))
            hasher.update(np.ascontiguousarray(array, dtype='<f8').tobytes())
        return hasher.hexdigest()

    def tensors(self):
        """Fresh named leaf tensors for a forward pass."""
        return {name: tensor.Tensor(array, name=name) for name, array in self.arrays.items()}

    def replace_arrays(self, arrays):
        """Return a new set with the given arrays (same names)."""
        frozen = {}
        for name, old in self.arrays.items():
            array = np.array(arrays[name], dtype=np.float64)
            if array.shape != old.shape:
                raise tensor.DimensionError(
                    f"Parameter {name}: shape {array.shape} differs from {old.shape}")
            array.setflags(write=False)
            frozen[name] = array
        return self._replace(arrays=frozen)


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_model(spec, max_streams, seed, samples=None):
    """Initialize the parameters of a model.

    Weights are drawn from a seeded Glorot uniform range; biases start at
    zero except the LSTM forget gates, which start at one.

    Args:
      spec: A ModelSpec.
      max_streams: The full stream count of the input windows.
      seed: Integer seed of the initialization.
      samples: The sample count; required for non-adaptive models.
    Returns:
      A ParameterSet.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in parameter_shapes(spec, max_streams, samples):
        part = name.rsplit('.', 1)[1]
        if part == 'bias':
            value = np.zeros(shape)
            if '_lstm.' in name:
                units = shape[0] // 4
                value[units:2 * units] = 1.0
        elif len(shape) == 4:
            receptive = shape[2] * shape[3]
            value = glorot_uniform(rng, shape, shape[1] * receptive, shape[0] * receptive)
        else:
            value = glorot_uniform(rng, shape, shape[0], shape[1])
        value.setflags(write=False)
        arrays[name] = value
    return ParameterSet(arrays, max_streams, None if spec.adaptive else samples)


def _activate(tape, x, activation):
    if activation in (None, 'linear', 'softmax'):
        return x
    return tape.apply(activation, x)


@cache(maxsize=128)
def pool_table(width, height, window):
    """Gather table of a non-overlapping max pooling, trailing cells dropped."""
    p1, p2 = window
    out_w, out_h = width // p1, height // p2
    if out_w < 1 or out_h < 1:
        raise tensor.DimensionError(
            f"MaxPool2D({window}) does not fit a {width}x{height} input")
    table = np.array([[(i * p1 + r) * height + (j * p2 + c)
                       for r in range(p1) for c in range(p2)]
                      for i in range(out_w) for j in range(out_h)], dtype=np.int64)
    table.setflags(write=False)
    return table, (out_w, out_h)


def reshape_for_head(tape, fmaps, head):
    """Reshape (batch, M, w', h') feature maps for the head layers.

    Args:
      tape: The Tape to record on.
      fmaps: A Tensor of shape (batch, M, w', h').
      head: 'dense' or 'recurrent'.
    Returns:
      For 'dense', a (batch, w'*h'*M) Tensor; for 'recurrent', a
      (batch, w', h'*M) Tensor whose row i holds the maps' values at sample i,
      streams outer and maps inner.
    """
    batch, maps, width, height = fmaps.shape
    moved = tape.transpose(fmaps, axes=(0, 2, 3, 1))
    if head == 'dense':
        return tape.reshape(moved, shape=(batch, width * height * maps))
    return tape.reshape(moved, shape=(batch, width, height * maps))


def _lstm(tape, tensors, prefix, x, units, activation, sequences):
    batch, steps, _ = x.shape
    projected = tape.reshape(
        tape.matmul(tape.reshape(x, shape=(batch * steps, x.shape[2])),
                    tensors[f'{prefix}.input']),
        shape=(batch, steps, 4 * units))
    recurrent = tensors[f'{prefix}.recurrent']
    bias = tensors[f'{prefix}.bias']
    hidden = tape.constant(np.zeros((batch, units)))
    cell = tape.constant(np.zeros((batch, units)))
    outputs = []
    gate = lambda z, k: tape.slice(z, index=(slice(None), slice(k * units, (k + 1) * units)))
    for step in range(steps):
        z = tape.add(tape.add(tape.slice(projected, index=(slice(None), step)),
                              tape.matmul(hidden, recurrent)), bias)
        input_gate = tape.sigmoid(gate(z, 0))
        forget_gate = tape.sigmoid(gate(z, 1))
        candidate = _activate(tape, gate(z, 2), activation)
        output_gate = tape.sigmoid(gate(z, 3))
        cell = tape.add(tape.mul(forget_gate, cell), tape.mul(input_gate, candidate))
        hidden = tape.mul(output_gate, _activate(tape, cell, activation))
        if sequences:
            outputs.append(tape.reshape(hidden, shape=(batch, 1, units)))
    if sequences:
        return tape.concat(*outputs, axis=1)
    return hidden


def apply_model(tape, spec, tensors, data, training=False, rng=None):
    """Record the forward pass of a batch of windows on a tape.

    Args:
      tape: A Tape.
      spec: A ModelSpec.
      tensors: Dict of parameter name to Tensor, from ParameterSet.tensors().
      data: A (batch, samples, streams) array; all windows share dimensions.
      training: Apply dropout if true.
      rng: A numpy Generator for dropout masks; required when training with
        a non-zero dropout rate.
    Returns:
      A (batch, C) Tensor of class scores (logits).
    """
    data = np.asarray(data, dtype=np.float64)
    x = tape.constant(data[:, None, :, :])
    for index, layer_spec in enumerate(spec.layers):
        prefix = parameter_prefix(index, layer_spec)
        kind = layer_spec.kind
        following = _next_head(spec.layers, index)
        if kind in HEAD and len(x.shape) == 4:
            x = reshape_for_head(tape, x, 'recurrent' if kind == 'lstm' else 'dense')

        if kind == 'conv2d':
            x = tape.conv2d(x, tensors[f'{prefix}.kernel'], padding=layer_spec.padding)
            bias = tape.reshape(tensors[f'{prefix}.bias'], shape=(1, layer_spec.units, 1, 1))
            x = _activate(tape, tape.add(x, bias), layer_spec.activation)
        elif kind == 'maxpool2d':
            table, out_shape = pool_table(x.shape[2], x.shape[3], layer_spec.window)
            x = tape.max_window(x, table=table, out_shape=out_shape)
        elif kind == 'dap':
            x = dap.dap_layer(tape, x, dap.DapParams(*layer_spec.window))
        elif kind == 'flatten':
            x = reshape_for_head(tape, x, 'recurrent' if following == 'lstm' else 'dense')
        elif kind == 'dropout':
            if training and layer_spec.rate > 0:
                if rng is None:
                    raise ValueError("Dropout in training mode needs a random generator")
                keep = rng.random(x.shape) >= layer_spec.rate
                x = tape.mul(x, tape.constant(keep / (1.0 - layer_spec.rate)))
        elif kind == 'lstm':
            x = _lstm(tape, tensors, prefix, x, layer_spec.units, layer_spec.activation,
                      sequences=(following == 'lstm'))
        elif kind == 'dense':
            x = tape.add(tape.matmul(x, tensors[f'{prefix}.kernel']), tensors[f'{prefix}.bias'])
            x = _activate(tape, x, layer_spec.activation)
    return x


def check_input(spec, params, data):
    """Raise DimensionError if a (batch, samples, streams) input does not fit."""
    if np.ndim(data) != 3:
        raise tensor.DimensionError(f"Expected (batch, samples, streams), got {np.shape(data)}")
    _, samples, streams = np.shape(data)
    if streams > params.streams:
        raise tensor.DimensionError(
            f"Input has {streams} streams; model built for at most {params.streams}")
    if not spec.adaptive and (samples, streams) != (params.samples, params.streams):
        raise tensor.DimensionError(
            f"Input {samples}x{streams} does not match the model's "
            f"{params.samples}x{params.streams}")


def forward_batch(spec, params, data, training=False, rng=None):
    """Class scores of a (batch, samples, streams) array, shape (batch, C)."""
    check_input(spec, params, data)
    tape = tensor.Tape()
    scores = apply_model(tape, spec, params.tensors(), data, training, rng)
    tape.discard()
    return scores.data


def forward(spec, params, window, training=False, rng=None):
    """Class scores of one window, a vector of C values.

    Args:
      spec: A ModelSpec.
      params: Its ParameterSet.
      window: A signals.TimeWindow or a (samples, streams) array.
      training: Apply dropout if true.
      rng: Generator for dropout masks.
    Raises:
      DimensionError: If a non-adaptive model is fed other dimensions than it
        was built for, or the input has too many streams.
    """
    data = window.data if isinstance(window, signals.TimeWindow) else window
    return forward_batch(spec, params, np.asarray(data)[None], training, rng)[0]


def batch_loss(tape, spec, params, data, labels, training=False, rng=None):
    """Record the mean cross-entropy of a batch.

    Returns:
      A pair of (loss, scores) Tensors.
    """
    check_input(spec, params, data)
    scores = apply_model(tape, spec, params.tensors(), data, training, rng)
    return tape.softmax_crossentropy(scores, labels=np.asarray(labels)), scores


def softmax(scores):
    """Probabilities from class scores along the last axis."""
    return np.exp(tensor.log_softmax(np.asarray(scores, dtype=np.float64)))
