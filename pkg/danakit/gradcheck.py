"""Finite-difference verification of the differentiation engine.

Each check builds a scalar function of some named input arrays, computes its
gradient with a backward pass, and compares random entries of it against
central differences. Inputs of piecewise-linear primitives (relu, max
pooling) are drawn well away from their kinks so that the differences are
exact up to rounding.
"""
__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import logging
import typing

import numpy as np

from danakit import dap
from danakit import layers
from danakit import tensor


STEP = 1e-4

# Floor of the denominator of the relative error, so that entries with tiny
# gradients are compared absolutely.
FLOOR = 1e-3

TOLERANCES = {'primitive': 1e-5, 'dap': 1e-5, 'model': 1e-4}


class CheckResult(typing.NamedTuple):
    """Outcome of one gradient check."""
    name: str
    suite: str
    probes: int
    max_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_error < self.tolerance


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR)


def evaluate(func, arrays):
    """Value of func at the given arrays, without recording a backward pass."""
    tape = tensor.Tape()
    tensors = {name: tensor.Tensor(array, name=name) for name, array in arrays.items()}
    value = func(tape, tensors).item()
    tape.discard()
    return value


def analytic_gradient(func, arrays):
    tape = tensor.Tape()
    tensors = {name: tensor.Tensor(array, name=name) for name, array in arrays.items()}
    grads = tape.backward(func(tape, tensors))
    return {name: grads.get(name, np.zeros(array.shape)) for name, array in arrays.items()}


def numeric_gradient(func, arrays, name, index, step=STEP):
    """Central difference of func along one entry of one input."""
    values = []
    for sign in (1.0, -1.0):
        moved = np.array(arrays[name], dtype=np.float64)
        moved[index] += sign * step
        values.append(evaluate(func, dict(arrays, **{name: moved})))
    return (values[0] - values[1]) / (2.0 * step)


def check(name, suite, func, arrays, rng, probes=100, step=STEP):
    """Compare the analytic gradient with central differences on random entries.

    Args:
      name: The check name.
      suite: 'primitive', 'dap' or 'model'; selects the tolerance.
      func: A function (tape, tensors) -> scalar Tensor.
      arrays: Dict of input name to array.
      rng: A numpy Generator choosing the probed entries.
      probes: Number of entries probed.
      step: Finite-difference step.
    Returns:
      A CheckResult.
    """
    analytic = analytic_gradient(func, arrays)
    names = sorted(arrays)
    sizes = np.array([arrays[key].size for key in names])
    max_error = 0.0
    for _ in range(probes):
        key = names[rng.choice(len(names), p=sizes / sizes.sum())]
        index = np.unravel_index(rng.integers(arrays[key].size), arrays[key].shape)
        numeric = numeric_gradient(func, arrays, key, index, step)
        max_error = max(max_error, relative_error(analytic[key][index], numeric))
    return CheckResult(name, suite, probes, max_error, TOLERANCES[suite])


# Map of check names to (suite, builder). A builder takes a Generator and
# returns (func, arrays). Populated by the @gradient_case decorator.
CASES = {}


def gradient_case(name, suite='primitive'):
    def decorator(func):
        CASES[name] = (suite, func)
        return func
    return decorator


def weighted_sum(tape, output, weights):
    """Reduce an output to a scalar with fixed random weights."""
    return tape.sum(tape.mul(output, tape.constant(weights)))


def separated(rng, shape, spacing=0.01):
    """Distinct values at least `spacing` apart, in random order."""
    size = int(np.prod(shape))
    return (rng.permutation(size) * spacing - size * spacing / 2).reshape(shape)


def away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _unary(kind):
    def build(rng):
        weights = rng.normal(size=(4, 3))
        func = lambda tape, t: weighted_sum(tape, tape.apply(kind, t['x']), weights)
        return func, {'x': away_from_zero(rng, (4, 3))}
    return build


for _kind in ('tanh', 'sigmoid', 'relu'):
    gradient_case(_kind)(_unary(_kind))


@gradient_case('matmul')
def matmul_case(rng):
    weights = rng.normal(size=(3, 2))
    func = lambda tape, t: weighted_sum(tape, tape.matmul(t['a'], t['b']), weights)
    return func, {'a': rng.normal(size=(3, 4)), 'b': rng.normal(size=(4, 2))}


@gradient_case('add')
def add_case(rng):
    weights = rng.normal(size=(3, 4))
    func = lambda tape, t: weighted_sum(tape, tape.add(t['a'], t['b']), weights)
    return func, {'a': rng.normal(size=(3, 4)), 'b': rng.normal(size=(4,))}


@gradient_case('mul')
def mul_case(rng):
    weights = rng.normal(size=(2, 3))
    func = lambda tape, t: weighted_sum(tape, tape.mul(t['a'], t['b']), weights)
    return func, {'a': rng.normal(size=(2, 3)), 'b': rng.normal(size=(2, 1))}


@gradient_case('sum')
def sum_case(rng):
    # Squared so that the gradient depends on the input.
    func = lambda tape, t: tape.sum(tape.mul(t['x'], t['x']))
    return func, {'x': rng.normal(size=(3, 5))}


@gradient_case('reshape')
def reshape_case(rng):
    weights = rng.normal(size=(5, 3))
    func = lambda tape, t: weighted_sum(tape, tape.reshape(t['x'], shape=(5, 3)), weights)
    return func, {'x': rng.normal(size=(3, 5))}


@gradient_case('transpose')
def transpose_case(rng):
    weights = rng.normal(size=(4, 2, 3))
    func = lambda tape, t: weighted_sum(tape, tape.transpose(t['x'], axes=(2, 0, 1)), weights)
    return func, {'x': rng.normal(size=(2, 3, 4))}


@gradient_case('slice')
def slice_case(rng):
    weights = rng.normal(size=(3,))
    func = lambda tape, t: weighted_sum(tape, tape.slice(t['x'], index=(slice(None), 2)),
                                        weights)
    return func, {'x': rng.normal(size=(3, 4))}


@gradient_case('concat')
def concat_case(rng):
    weights = rng.normal(size=(2, 5))
    func = lambda tape, t: weighted_sum(tape, tape.concat(t['a'], t['b'], axis=1), weights)
    return func, {'a': rng.normal(size=(2, 2)), 'b': rng.normal(size=(2, 3))}


@gradient_case('conv2d')
def conv2d_case(rng):
    weights = {'valid': rng.normal(size=(2, 3, 4, 4)), 'same': rng.normal(size=(2, 3, 6, 5))}
    def func(tape, t):
        valid = weighted_sum(tape, tape.conv2d(t['x'], t['kernel'], padding='valid'),
                             weights['valid'])
        same = weighted_sum(tape, tape.conv2d(t['x'], t['kernel'], padding='same'),
                            weights['same'])
        return tape.add(valid, same)
    return func, {'x': rng.normal(size=(2, 2, 6, 5)), 'kernel': rng.normal(size=(3, 2, 3, 2))}


@gradient_case('max_window')
def max_window_case(rng):
    table, out_shape = layers.pool_table(6, 4, (2, 2))
    weights = rng.normal(size=(2, 3, 2))
    func = lambda tape, t: weighted_sum(
        tape, tape.max_window(t['x'], table=table, out_shape=out_shape), weights)
    return func, {'x': separated(rng, (2, 6, 4))}


@gradient_case('softmax_crossentropy')
def crossentropy_case(rng):
    labels = rng.integers(0, 5, size=4)
    func = lambda tape, t: tape.softmax_crossentropy(t['logits'], labels=labels)
    return func, {'logits': rng.normal(size=(4, 5))}


@gradient_case('dap_pooling', suite='dap')
def dap_pooling_case(rng):
    params = dap.DapParams(4, 3)
    weights = rng.normal(size=(2, 3, 4, 3))
    func = lambda tape, t: weighted_sum(tape, dap.dap_layer(tape, t['fmaps'], params), weights)
    return func, {'fmaps': separated(rng, (2, 3, 13, 9))}


@gradient_case('dap_replication', suite='dap')
def dap_replication_case(rng):
    # Six streams replicated to twelve, then pooled to nine; some cells feed
    # two output windows.
    params = dap.DapParams(4, 9)
    weights = rng.normal(size=(2, 3, 4, 9))
    func = lambda tape, t: weighted_sum(tape, dap.dap_layer(tape, t['fmaps'], params), weights)
    return func, {'fmaps': separated(rng, (2, 3, 10, 6))}


# Toy architecture with smooth activations; with five samples the pooling
# windows hold a single cell, so the loss is smooth in every parameter.
MODEL = ("Conv2D(3,(3,3),same,tanh), Conv2D(3,(3,3),same,tanh), DAP(5,6), LSTM(4), "
         "Dense(3,softmax)")


def _model_case(streams):
    def build(rng):
        spec = layers.compile_spec(MODEL)
        params = layers.build_model(spec, max_streams=6, seed=int(rng.integers(1 << 31)))
        data = rng.normal(size=(2, 5, streams))
        labels = np.array([0, 2])
        def func(tape, tensors):
            scores = layers.apply_model(tape, spec, tensors, data)
            return tape.softmax_crossentropy(scores, labels=labels)
        return func, {name: np.array(array) for name, array in params.arrays.items()}
    return build


gradient_case('toy_model', suite='model')(_model_case(6))
gradient_case('toy_model_missing_sensor', suite='model')(_model_case(3))


# Ten samples by six streams pooled to 5x3: every window holds 2x2 cells. The
# 1x1 tanh convolution is monotone in its input, so on separated inputs the
# maximum of each window stays put under small parameter steps.
POOLING_MODEL = "Conv2D(3,(1,1),same,tanh), DAP(5,3), LSTM(4), Dense(3,softmax)"


@gradient_case('toy_model_pooling', suite='model')
def pooling_model_case(rng):
    spec = layers.compile_spec(POOLING_MODEL)
    params = layers.build_model(spec, max_streams=6, seed=int(rng.integers(1 << 31)))
    data = separated(rng, (2, 10, 6))
    labels = np.array([1, 2])
    def func(tape, tensors):
        scores = layers.apply_model(tape, spec, tensors, data)
        return tape.softmax_crossentropy(scores, labels=labels)
    return func, {name: np.array(array) for name, array in params.arrays.items()}


def run_all(seed=0, probes=100, names=None):
    """Run gradient checks in a deterministic order.

    Args:
      seed: Seed of the inputs and of the probed entries.
      probes: Entries probed per check.
      names: Check names to run; all of CASES if None.
    Returns:
      A list of CheckResult, one per check.
    """
    results = []
    order = sorted(CASES)
    for name in order if names is None else names:
        suite, build = CASES[name]
        rng = np.random.default_rng([seed, order.index(name)])
        func, arrays = build(rng)
        result = check(name, suite, func, arrays, rng, probes)
        logging.info("%s %s: max relative error %.3g over %d probes", suite, name,
                     result.max_error, result.probes)
        results.append(result)
    return results
