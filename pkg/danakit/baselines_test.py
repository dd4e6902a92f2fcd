__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import unittest

import numpy as np

from danakit import baselines
from danakit import layers
from danakit import signals
from danakit import tensor


SENSORS = ('acc', 'gyro')


def make_dataset(count=4, samples=50, sensors=SENSORS, rate=50.0):
    rng = np.random.default_rng(0)
    data = rng.normal(size=(count, samples, 3 * len(sensors)))
    return signals.LabeledDataset(data, np.arange(count) % 2, rate, samples / rate,
                                  tuple(sensors), ('walk', 'run'))


class TestPipeline(unittest.TestCase):

    def setUp(self):
        self.dataset = make_dataset()
        self.stats = signals.NormStats.create(np.zeros(6), np.ones(6))

    def test_validate(self):
        baselines.BaselinePipeline(50.0, SENSORS, 'mean',
                                   layers.preset('toy_original', 5)).validate()
        with self.assertRaises(layers.SpecError):
            baselines.BaselinePipeline(50.0, SENSORS, 'mean',
                                       layers.preset('toy_dana', 5)).validate()
        with self.assertRaises(signals.ConfigurationError):
            baselines.BaselinePipeline(50.0, SENSORS, 'zero').validate()

    def test_unchanged(self):
        window = self.dataset.window(0)
        out = baselines.preprocess(window, baselines.BaselinePipeline(50.0, SENSORS))
        np.testing.assert_array_equal(out.data, window.data)

    def test_resample_and_copy(self):
        window = signals.select_sensors(signals.resample(self.dataset.window(1), 25.0), ['gyro'])
        out = baselines.preprocess(window, baselines.BaselinePipeline(50.0, SENSORS, 'copy'))
        self.assertEqual(out.data.shape, (50, 6))
        self.assertEqual(out.rate_hz, 50.0)
        self.assertEqual(out.sensors, SENSORS)
        np.testing.assert_array_equal(out.data[:, :3], out.data[:, 3:])

    def test_zero_mean(self):
        window = signals.select_sensors(self.dataset.window(0), ['acc'])
        out = baselines.preprocess(window, baselines.BaselinePipeline(50.0, SENSORS, 'mean'),
                                   self.stats)
        np.testing.assert_array_equal(out.data[:, 3:], 0.0)
        np.testing.assert_array_equal(out.data[:, :3], self.dataset.window(0).data[:, :3])

    def test_mean_without_stats(self):
        window = signals.select_sensors(self.dataset.window(0), ['acc'])
        with self.assertRaises(signals.ConfigurationError):
            baselines.preprocess(window, baselines.BaselinePipeline(50.0, SENSORS, 'mean'))

    def test_no_imputation(self):
        window = signals.select_sensors(self.dataset.window(0), ['acc'])
        with self.assertRaises(tensor.DimensionError):
            baselines.preprocess(window, baselines.BaselinePipeline(50.0, SENSORS, 'none'))
        out = baselines.preprocess(signals.resample(self.dataset.window(0), 20.0),
                                   baselines.BaselinePipeline(50.0, SENSORS, 'none'))
        self.assertEqual(out.data.shape, (50, 6))

    def test_unknown_sensor(self):
        window = self.dataset.window(0)._replace(sensors=('acc', 'mag'))
        with self.assertRaises(signals.SelectionError):
            baselines.preprocess(window, baselines.BaselinePipeline(50.0, SENSORS))

    def test_dataset_matches_windows(self):
        three = make_dataset(sensors=('a', 'b', 'c'))
        stats = signals.NormStats.from_windows(three.data)
        for imputation in ('mean', 'copy'):
            pipeline = baselines.BaselinePipeline(50.0, three.sensors, imputation)
            for keep in (['a'], ['b'], ['c'], ['a', 'c']):
                partial = signals.LabeledDataset(
                    signals.interpolate(three.data, 20)[..., signals.sensor_streams(
                        three.sensors, keep)],
                    three.labels, 20.0, 1.0, tuple(keep), three.classes)
                batched = baselines.preprocess_dataset(partial, pipeline, stats)
                with self.subTest(imputation=imputation, keep=keep):
                    self.assertEqual(batched.data.shape, (4, 50, 9))
                    for index, window in enumerate(partial.windows()):
                        expected = baselines.preprocess(window, pipeline, stats)
                        np.testing.assert_allclose(batched.data[index], expected.data,
                                                   rtol=0, atol=1e-12)


class TestAugment(unittest.TestCase):

    def test_subsets(self):
        self.assertEqual(baselines.proper_subsets(2), [(0,), (1,)])
        self.assertEqual(baselines.proper_subsets(3),
                         [(0,), (0, 1), (0, 2), (1,), (1, 2), (2,)])

    def test_two_sensors(self):
        dataset = make_dataset()
        augmented = baselines.augment_dataset(dataset)
        self.assertEqual(augmented.size, 12)
        np.testing.assert_array_equal(augmented.data[:4], dataset.data)
        # Only acc present: gyro block copied from acc.
        np.testing.assert_array_equal(augmented.data[4:8, :, 3:], dataset.data[..., :3])
        np.testing.assert_array_equal(augmented.data[8:, :, :3], dataset.data[..., 3:])
        np.testing.assert_array_equal(augmented.labels, np.tile(dataset.labels, 3))

    def test_three_sensors(self):
        dataset = make_dataset(count=5, sensors=('a', 'b', 'c'))
        augmented = baselines.augment_dataset(dataset)
        self.assertEqual(augmented.size, 5 * 7)
        for block, subset in enumerate(baselines.proper_subsets(3), start=1):
            keep = [dataset.sensors[index] for index in subset]
            window = signals.select_sensors(dataset.window(2), keep)
            expected = signals.impute_copy(window, dataset.sensors)
            np.testing.assert_array_equal(augmented.data[block * 5 + 2], expected.data)

    def test_single_sensor(self):
        with self.assertRaises(signals.ConfigurationError):
            baselines.augment_dataset(make_dataset(sensors=('acc',)))


if __name__ == '__main__':
    unittest.main()
