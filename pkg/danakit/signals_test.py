__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import unittest

from hypothesis import given, settings
from hypothesis import strategies as st
import numpy as np

from danakit import signals


def window(data, rate=50.0, duration=1.0, sensors=('S1', 'S2'), label=3):
    return signals.TimeWindow(np.asarray(data, dtype=float), rate, duration,
                              tuple(sensors), label)


class TestResample(unittest.TestCase):

    def test_same_rate_identity(self):
        data = np.random.default_rng(0).normal(size=(50, 6))
        out = signals.resample(window(data), 50.0)
        np.testing.assert_array_equal(out.data, data)

    def test_endpoints(self):
        data = np.array([[0.0], [1.0], [2.0], [3.0]])
        out = signals.resample(window(data, rate=4.0, sensors=('S1',)), 2.0)
        np.testing.assert_array_equal(out.data[:, 0], [0.0, 3.0])
        self.assertEqual(out.rate_hz, 2.0)

    def test_constant(self):
        data = np.full((50, 3), 2.5)
        for rate in (5, 13, 50, 120):
            out = signals.resample(window(data, sensors=('S1',)), rate)
            np.testing.assert_allclose(out.data, 2.5, rtol=0, atol=1e-12)

    def test_half_rate_counts(self):
        data = np.zeros((128, 9))
        out = signals.resample(window(data, duration=2.56, sensors=('a', 'b', 'c')), 25.0)
        self.assertEqual(out.samples, 64)
        self.assertEqual(out.duration_s, 2.56)

    def test_metadata_preserved(self):
        out = signals.resample(window(np.zeros((50, 6))), 20.0)
        self.assertEqual(out.label, 3)
        self.assertEqual(out.sensors, ('S1', 'S2'))
        self.assertEqual(out.duration_s, 1.0)

    def test_too_short(self):
        with self.assertRaises(signals.TooShortError):
            signals.resample(window(np.zeros((1, 3)), rate=1.0, sensors=('S1',)), 10.0)
        with self.assertRaises(signals.TooShortError):
            signals.resample(window(np.zeros((50, 3)), sensors=('S1',)), 1.0)

    def test_round_trip_aligned(self):
        data = np.random.default_rng(1).normal(size=(11, 3))
        up = signals.interpolate(data, 41)
        np.testing.assert_array_equal(up[::4], data)
        np.testing.assert_array_equal(signals.interpolate(up, 11), data)

    def test_batch_axes(self):
        data = np.random.default_rng(2).normal(size=(4, 30, 6))
        out = signals.interpolate(data, 12)
        self.assertEqual(out.shape, (4, 12, 6))
        np.testing.assert_array_equal(out[2], signals.interpolate(data[2], 12))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 80), st.integers(2, 80),
           st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
    def test_linear(self, width, target, alpha, beta, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(2, width, 3))
        np.testing.assert_allclose(
            signals.interpolate(alpha * x + beta * y, target),
            alpha * signals.interpolate(x, target) + beta * signals.interpolate(y, target),
            rtol=1e-9, atol=1e-9)


class TestSelect(unittest.TestCase):

    def test_keep_all(self):
        data = np.arange(12.0).reshape(2, 6)
        out = signals.select_sensors(window(data), {'S1', 'S2'})
        np.testing.assert_array_equal(out.data, data)

    def test_keep_first(self):
        data = np.arange(12.0).reshape(2, 6)
        out = signals.select_sensors(window(data), {'S1'})
        np.testing.assert_array_equal(out.data, data[:, 0:3])
        self.assertEqual(out.sensors, ('S1',))

    def test_keep_first_and_third(self):
        data = np.arange(18.0).reshape(2, 9)
        out = signals.select_sensors(window(data, sensors=('a', 'b', 'c')), {'c', 'a'})
        np.testing.assert_array_equal(out.data, data[:, [0, 1, 2, 6, 7, 8]])
        self.assertEqual(out.sensors, ('a', 'c'))

    def test_invalid(self):
        with self.assertRaises(signals.SelectionError):
            signals.select_sensors(window(np.zeros((2, 6))), set())
        with self.assertRaises(signals.SelectionError):
            signals.select_sensors(window(np.zeros((2, 6))), {'S3'})


class TestImpute(unittest.TestCase):

    def setUp(self):
        self.stats = signals.NormStats.create([1, 2, 3, 4, 5, 6], np.ones(6))

    def test_mean_nothing_missing(self):
        data = np.random.default_rng(3).normal(size=(5, 6))
        out = signals.impute_mean(window(data), ('S1', 'S2'), self.stats)
        np.testing.assert_array_equal(out.data, data)

    def test_mean_zero_stats(self):
        stats = signals.NormStats.create(np.zeros(6), np.ones(6))
        out = signals.impute_mean(window(np.ones((5, 3)), sensors=('S1',)), ('S1', 'S2'), stats)
        np.testing.assert_array_equal(out.data[:, 3:], 0.0)
        np.testing.assert_array_equal(out.data[:, :3], 1.0)

    def test_mean_fill_second(self):
        out = signals.impute_mean(window(np.zeros((4, 3)), sensors=('S1',)),
                                  ('S1', 'S2'), self.stats)
        np.testing.assert_array_equal(out.data[:, 3:], np.tile([4.0, 5.0, 6.0], (4, 1)))
        self.assertEqual(out.sensors, ('S1', 'S2'))

    def test_mean_fill_first(self):
        out = signals.impute_mean(window(np.zeros((4, 3)), sensors=('S2',)),
                                  ('S1', 'S2'), self.stats)
        np.testing.assert_array_equal(out.data[0], [1, 2, 3, 0, 0, 0])

    def test_mean_bad_stats(self):
        stats = signals.NormStats.create(np.zeros(3), np.ones(3))
        with self.assertRaises(signals.ConfigurationError):
            signals.impute_mean(window(np.zeros((4, 3)), sensors=('S1',)), ('S1', 'S2'), stats)

    def test_copy_nothing_missing(self):
        data = np.random.default_rng(4).normal(size=(5, 6))
        np.testing.assert_array_equal(
            signals.impute_copy(window(data), ('S1', 'S2')).data, data)

    def test_copy_one_of_two(self):
        data = np.random.default_rng(5).normal(size=(5, 3))
        out = signals.impute_copy(window(data, sensors=('S2',)), ('S1', 'S2'))
        np.testing.assert_array_equal(out.data, np.hstack([data, data]))

    def test_copy_one_of_three(self):
        data = np.random.default_rng(6).normal(size=(5, 3))
        out = signals.impute_copy(window(data, sensors=('acc',)), ('acc', 'gyr', 'mag'))
        np.testing.assert_array_equal(out.data, np.hstack([data, data, data]))

    def test_copy_cycles(self):
        data = np.arange(12.0).reshape(2, 6)
        out = signals.impute_copy(window(data, sensors=('a', 'c')), ('a', 'b', 'c', 'd'))
        np.testing.assert_array_equal(
            out.data, np.hstack([data[:, :3], data[:, :3], data[:, 3:], data[:, 3:]]))

    def test_select_after_copy_is_identity(self):
        data = np.random.default_rng(7).normal(size=(5, 6))
        win = window(data, sensors=('a', 'c'))
        full = signals.impute_copy(win, ('a', 'b', 'c'))
        np.testing.assert_array_equal(signals.select_sensors(full, {'a', 'c'}).data, data)

    def test_preserve_label(self):
        out = signals.impute_copy(window(np.zeros((5, 3)), sensors=('S1',)), ('S1', 'S2'))
        self.assertEqual(out.label, 3)
        self.assertEqual(out.duration_s, 1.0)


class TestNormalize(unittest.TestCase):

    def test_own_stats(self):
        data = np.random.default_rng(8).normal(3, 2, size=(200, 6))
        stats = signals.NormStats.from_windows(data[None])
        out = signals.normalize(window(data), stats)
        np.testing.assert_allclose(out.data.mean(axis=0), 0, atol=1e-9)
        np.testing.assert_allclose(out.data.std(axis=0), 1, atol=1e-9)

    def test_identity_stats(self):
        data = np.random.default_rng(9).normal(size=(10, 6))
        stats = signals.NormStats.create(np.zeros(6), np.ones(6))
        np.testing.assert_array_equal(signals.normalize(window(data), stats).data, data)

    def test_direct(self):
        stats = signals.NormStats.create([3.0], [1.0])
        out = signals.normalize(window([[2.0], [4.0]], sensors=()), stats)
        np.testing.assert_array_equal(out.data[:, 0], [-1.0, 1.0])

    def test_degenerate(self):
        with self.assertRaises(signals.ConfigurationError):
            signals.NormStats.create([0.0, 0.0], [1.0, 0.0])
        with self.assertRaises(signals.ConfigurationError):
            signals.NormStats.from_windows(np.ones((3, 4, 2)))

    def test_degenerate_means_only(self):
        data = np.ones((3, 4, 2))
        data[..., 0] = np.arange(4.0)
        stats = signals.NormStats.from_windows(data, require_spread=False)
        np.testing.assert_array_equal(stats.mean, [1.5, 1.0])
        self.assertEqual(stats.std[1], 0.0)
        with self.assertRaises(signals.ConfigurationError):
            signals.normalize(window(data[0], sensors=()), stats)


if __name__ == '__main__':
    unittest.main()
