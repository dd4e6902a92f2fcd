__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import math
import unittest

from hypothesis import given, settings
from hypothesis import strategies as st
import numpy as np

from danakit import dap
from danakit import tensor


def naive_pool(fmap, W, H, axes=3):
    """Nested-loop reference: replicate, truncate, then pool one map."""
    samples, streams = fmap.shape
    copies = max(math.ceil((H - streams) / axes), 0)
    if copies > 0:
        fmap = np.concatenate([fmap] * (copies + 1), axis=1)
    width = max(streams, H)
    fmap = fmap[:, :width]

    def rnd(value):
        return math.floor(value + 0.5)

    def clamp(lo, hi, limit):
        lo, hi = min(lo, limit - 1), min(hi, limit)
        return (lo, hi) if hi > lo else (lo, lo + 1)

    out = np.empty((W, H))
    for i in range(W):
        r1, r2 = clamp(rnd(i * samples / W), rnd((i + 1) * samples / W), samples)
        for j in range(H):
            if copies == 0:
                c1, c2 = clamp(rnd(j * streams / H), rnd((j + 1) * streams / H), width)
            else:
                stride = math.floor((copies + 1) * streams / H)
                c1, c2 = clamp(j * stride, (j + 1) * stride, width)
            best = -np.inf
            for r in range(r1, r2):
                for c in range(c1, c2):
                    if fmap[r, c] > best:
                        best = fmap[r, c]
            out[i, j] = best
    return out


GRIDS = [(4, 6), (8, 6), (16, 3), (16, 9), (32, 1)]


class TestWindows(unittest.TestCase):

    def test_round_half_up(self):
        self.assertEqual(dap.round_half_up(dap.Fraction(5, 2)), 3)
        self.assertEqual(dap.round_half_up(dap.Fraction(7, 3)), 2)

    def test_replication_count(self):
        params = dap.DapParams(16, 9)
        self.assertEqual(dap.replication_count(9, params), 0)
        self.assertEqual(dap.replication_count(6, params), 1)
        self.assertEqual(dap.replication_count(3, params), 2)

    def test_partition_when_divisible(self):
        for W in (1, 4, 16):
            for multiple in (1, 2, 5):
                windows = dap.sample_windows(W * multiple, dap.DapParams(W, 3))
                self.assertEqual(windows[0][0], 0)
                self.assertEqual(windows[-1][1], W * multiple)
                for (_, hi), (lo, _) in zip(windows, windows[1:]):
                    self.assertEqual(hi, lo)

    def test_non_divisible_no_empty_windows(self):
        windows = dap.sample_windows(37, dap.DapParams(16, 3))
        self.assertTrue(all(hi > lo for lo, hi in windows))
        self.assertEqual(windows[-1][1], 37)


class TestWorkedExamples(unittest.TestCase):

    def test_three_sensors(self):
        # 128x9 to 16x3: windows of 8 samples across the 3 axes of a sensor.
        params = dap.DapParams(16, 3)
        self.assertEqual(dap.sample_windows(128, params), [(8 * i, 8 * i + 8) for i in range(16)])
        self.assertEqual(dap.stream_windows(9, params), [(0, 3), (3, 6), (6, 9)])
        fmaps = np.random.default_rng(0).normal(size=(32, 128, 9))
        out = dap.dap_forward(fmaps, params).output
        self.assertEqual(out.shape, (32, 16, 3))
        self.assertEqual(out[5, 2, 1], fmaps[5, 16:24, 3:6].max())

    def test_half_rate_one_sensor(self):
        params = dap.DapParams(16, 3)
        self.assertEqual(dap.sample_windows(64, params), [(4 * i, 4 * i + 4) for i in range(16)])
        self.assertEqual(dap.stream_windows(3, params), [(0, 1), (1, 2), (2, 3)])
        fmaps = np.random.default_rng(1).normal(size=(2, 64, 3))
        out = dap.dap_forward(fmaps, params).output
        np.testing.assert_array_equal(out, fmaps.reshape(2, 16, 4, 3).max(axis=2))

    def test_replication_then_truncation(self):
        params = dap.DapParams(16, 9)
        self.assertEqual(dap.replication_count(6, params), 1)
        # 6 streams, doubled to 12 and cut to 9: columns 6..8 repeat streams 0..2.
        self.assertEqual(dap.stream_windows(6, params), [(j, j + 1) for j in range(9)])
        table = dap.index_table(16, 6, params)
        self.assertEqual([int(row[0]) for row in table[:9]], [0, 1, 2, 3, 4, 5, 0, 1, 2])

    def test_brute_force_example(self):
        fmap = np.array([[[1, 5], [2, 6], [3, 7], [4, 8]]], dtype=float)
        record = dap.dap_forward(fmap, dap.DapParams(2, 2))
        np.testing.assert_array_equal(record.output, [[[2, 6], [4, 8]]])
        grad = dap.dap_backward(record, np.ones((1, 2, 2)))
        np.testing.assert_array_equal(grad, [[[0, 0], [1, 1], [0, 0], [1, 1]]])

    def test_identity(self):
        fmaps = np.random.default_rng(2).normal(size=(3, 8, 6))
        params = dap.DapParams(8, 6)
        record = dap.dap_forward(fmaps, params)
        np.testing.assert_array_equal(record.output, fmaps)
        upstream = np.random.default_rng(3).normal(size=(3, 8, 6))
        np.testing.assert_array_equal(dap.dap_backward(record, upstream), upstream)


class TestErrors(unittest.TestCase):

    def test_too_few_samples(self):
        with self.assertRaises(dap.UnsupportedDimensionsError):
            dap.dap_forward(np.zeros((1, 15, 9)), dap.DapParams(16, 3))

    def test_replication_insufficient(self):
        with self.assertRaises(dap.UnsupportedDimensionsError):
            dap.dap_forward(np.zeros((1, 16, 1)), dap.DapParams(16, 3))

    def test_is_dimension_error(self):
        with self.assertRaises(tensor.DimensionError):
            dap.dap_forward(np.zeros((1, 4, 3)), dap.DapParams(8, 3))

    def test_invalid_params(self):
        with self.assertRaises(ValueError):
            dap.DapParams(0, 3).validate()


class TestOracle(unittest.TestCase):

    def test_matches_nested_loops(self):
        rng = np.random.default_rng(42)
        cases = 0
        for W, H in GRIDS:
            for streams in (3, 6, 9):
                for _ in range(70):
                    samples = int(rng.integers(W, 4 * W + 1))
                    fmaps = rng.normal(size=(2, samples, streams))
                    if rng.random() < 0.3:
                        # Ties exercise first-argmax routing.
                        fmaps = np.round(fmaps)
                    out = dap.dap_forward(fmaps, dap.DapParams(W, H)).output
                    for m in range(2):
                        np.testing.assert_array_equal(
                            out[m], naive_pool(fmaps[m], W, H))
                    cases += 1
        self.assertGreaterEqual(cases, 1000)

    def test_replication_levels_covered(self):
        levels = {dap.replication_count(streams, dap.DapParams(W, H))
                  for W, H in GRIDS for streams in (3, 6, 9)}
        self.assertEqual(levels, {0, 1, 2})


class TestProperties(unittest.TestCase):

    @settings(max_examples=300, deadline=None)
    @given(st.sampled_from(GRIDS), st.sampled_from([1, 8, 32]),
           st.sampled_from([3, 6, 9]), st.data())
    def test_shape_invariance(self, grid, maps, streams, data):
        W, H = grid
        samples = data.draw(st.integers(W, 4 * W))
        out = dap.dap_forward(np.zeros((maps, samples, streams)), dap.DapParams(W, H))
        self.assertEqual(out.output.shape, (maps, W, H))

    def test_shape_invariance_exhaustive(self):
        checked = 0
        for W, H in GRIDS:
            params = dap.DapParams(W, H)
            for samples in range(W, 4 * W + 1):
                for streams in (3, 6, 9):
                    for maps in (1, 8, 32):
                        for batch in (1, 2, 3):
                            fmaps = np.zeros((batch, maps, samples, streams))
                            out = dap.dap_forward(fmaps, params).output
                            self.assertEqual(out.shape, (batch, maps, W, H))
                            checked += 1
        self.assertGreaterEqual(checked, 5000)

    @settings(max_examples=100, deadline=None)
    @given(st.sampled_from(GRIDS), st.sampled_from([3, 6, 9]),
           st.integers(0, 2**32 - 1), st.sampled_from([np.tanh, np.exp, lambda x: 3 * x + 1]))
    def test_monotone_commutation(self, grid, streams, seed, func):
        W, H = grid
        rng = np.random.default_rng(seed)
        fmaps = rng.normal(size=(2, int(rng.integers(W, 4 * W + 1)), streams))
        params = dap.DapParams(W, H)
        np.testing.assert_array_equal(
            dap.dap_forward(func(fmaps), params).output,
            func(dap.dap_forward(fmaps, params).output))

    def test_temporal_locality(self):
        params = dap.DapParams(8, 3)
        rng = np.random.default_rng(5)
        fmaps = rng.normal(size=(1, 37, 9))
        base = dap.dap_forward(fmaps, params).output
        windows = dap.sample_windows(37, params)
        lo, hi = windows[3]
        changed = fmaps.copy()
        changed[:, :lo] += 100.0
        changed[:, hi:] += 100.0
        out = dap.dap_forward(changed, params).output
        np.testing.assert_array_equal(out[:, 3], base[:, 3])


class TestBackward(unittest.TestCase):

    def test_replication_collisions_summed(self):
        # One stream replicated to three columns: every window routes to it.
        params = dap.DapParams(2, 3, axes_per_sensor=1)
        fmap = np.array([[[1.0], [2.0], [3.0], [4.0]]])
        record = dap.dap_forward(fmap, params)
        np.testing.assert_array_equal(record.output, [[[2, 2, 2], [4, 4, 4]]])
        grad = dap.dap_backward(record, np.ones((1, 2, 3)))
        np.testing.assert_array_equal(grad, [[[0], [3], [0], [3]]])

    def test_tape_matches_record(self):
        rng = np.random.default_rng(6)
        fmaps = rng.normal(size=(2, 3, 20, 6))
        params = dap.DapParams(5, 6)
        upstream = rng.normal(size=(2, 3, 5, 6))
        tape = tensor.Tape()
        x = tensor.Tensor(fmaps, name='x')
        out = dap.dap_layer(tape, x, params)
        loss = tape.sum(tape.mul(out, tensor.Tensor(upstream)))
        grads = tape.backward(loss)
        record = dap.dap_forward(fmaps, params)
        np.testing.assert_array_equal(out.data, record.output)
        np.testing.assert_array_equal(grads['x'], dap.dap_backward(record, upstream))


if __name__ == '__main__':
    unittest.main()
