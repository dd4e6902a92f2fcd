__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"

import unittest

import numpy as np

from danakit import tensor


class TestTensor(unittest.TestCase):

    def test_immutable(self):
        value = tensor.Tensor([1, 2, 3])
        self.assertEqual(value.data.dtype, np.float64)
        with self.assertRaises(ValueError):
            value.data[0] = 5.0

    def test_copies_input(self):
        array = np.zeros(3)
        value = tensor.Tensor(array)
        array[0] = 1.0
        self.assertEqual(value.data[0], 0.0)

    def test_uids_distinct(self):
        self.assertNotEqual(tensor.Tensor(0).uid, tensor.Tensor(0).uid)


class TestPrimitives(unittest.TestCase):

    def setUp(self):
        self.tape = tensor.Tape()

    def test_matmul_identity(self):
        out = self.tape.matmul(tensor.Tensor([[1, 2], [3, 4]]), tensor.Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_matmul_mismatch(self):
        with self.assertRaises(tensor.DimensionError) as context:
            self.tape.matmul(tensor.Tensor(np.ones((2, 3)), name='w'),
                             tensor.Tensor(np.ones((2, 3))))
        self.assertIn('w(2, 3)', str(context.exception))

    def test_relu(self):
        out = self.tape.relu(tensor.Tensor([-1, 0, 2]))
        np.testing.assert_array_equal(out.data, [0, 0, 2])

    def test_sigmoid_extremes(self):
        out = self.tape.sigmoid(tensor.Tensor([-1000.0, 0.0, 1000.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.5, 1.0])

    def test_conv2d_valid(self):
        x = tensor.Tensor(np.ones((1, 1, 3, 3)))
        kernel = tensor.Tensor(np.ones((1, 1, 2, 2)))
        out = self.tape.conv2d(x, kernel, padding='valid')
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    def test_conv2d_same_keeps_dims(self):
        x = tensor.Tensor(np.ones((2, 3, 7, 5)))
        kernel = tensor.Tensor(np.ones((4, 3, 3, 2)))
        out = self.tape.conv2d(x, kernel, padding='same')
        self.assertEqual(out.shape, (2, 4, 7, 5))
        # Interior cell sees the full kernel.
        self.assertEqual(out.data[0, 0, 3, 2], 3 * 3 * 2)

    def test_conv2d_is_cross_correlation(self):
        x = tensor.Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
        kernel = tensor.Tensor(np.array([[[[1.0, 0.0], [0.0, 0.0]]]]))
        out = self.tape.conv2d(x, kernel, padding='valid')
        np.testing.assert_array_equal(out.data[0, 0], [[0, 1], [3, 4]])

    def test_conv2d_kernel_too_large(self):
        with self.assertRaises(tensor.DimensionError):
            self.tape.conv2d(tensor.Tensor(np.ones((1, 1, 2, 2))),
                             tensor.Tensor(np.ones((1, 1, 3, 3))), padding='valid')

    def test_conv_padding(self):
        self.assertEqual(tensor.conv_padding(3, 'same'), (1, 1))
        self.assertEqual(tensor.conv_padding(4, 'same'), (1, 2))
        self.assertEqual(tensor.conv_padding(4, 'valid'), (0, 0))

    def test_max_window_first_argmax(self):
        x = tensor.Tensor([[3.0, 3.0], [1.0, 2.0]], name='x')
        table = np.array([[0, 1, 2, 3]])
        out = self.tape.max_window(x, table=table, out_shape=(1, 1))
        self.assertEqual(out.data.tolist(), [[3.0]])
        grads = self.tape.backward(self.tape.sum(out))
        np.testing.assert_array_equal(grads['x'], [[1, 0], [0, 0]])

    def test_max_window_padding(self):
        x = tensor.Tensor([[-5.0, -1.0], [-2.0, -3.0]])
        table = np.array([[0, -1], [1, 3], [2, -1]])
        out = self.tape.max_window(x, table=table, out_shape=(3,))
        np.testing.assert_array_equal(out.data, [-5, -1, -2])

    def test_concat_slice_reshape(self):
        a = tensor.Tensor(np.ones((2, 2)))
        b = tensor.Tensor(np.zeros((1, 2)))
        joined = self.tape.concat(a, b, axis=0)
        self.assertEqual(joined.shape, (3, 2))
        row = self.tape.slice(joined, index=(2,))
        np.testing.assert_array_equal(row.data, [0, 0])
        with self.assertRaises(tensor.DimensionError):
            self.tape.reshape(joined, shape=(4, 2))
        with self.assertRaises(tensor.DimensionError):
            self.tape.concat(a, tensor.Tensor(np.zeros((1, 3))), axis=0)

    def test_add_broadcast(self):
        with self.assertRaises(tensor.DimensionError):
            self.tape.add(tensor.Tensor(np.ones((2, 3))), tensor.Tensor(np.ones(2)))

    def test_softmax_crossentropy_uniform(self):
        out = self.tape.softmax_crossentropy(tensor.Tensor(np.zeros((3, 4))),
                                             labels=[0, 1, 3])
        self.assertAlmostEqual(out.item(), np.log(4.0))

    def test_unknown(self):
        with self.assertRaises(ValueError):
            self.tape.apply('fft', tensor.Tensor(1.0))
        with self.assertRaises(AttributeError):
            self.tape.fft  # pylint: disable=pointless-statement


class TestBackward(unittest.TestCase):

    def setUp(self):
        self.tape = tensor.Tape()

    def test_sum_is_ones(self):
        param = tensor.Tensor(np.arange(6.0).reshape(2, 3), name='p')
        grads = self.tape.backward(self.tape.sum(param))
        np.testing.assert_array_equal(grads['p'], np.ones((2, 3)))

    def test_sum_of_squares(self):
        param = tensor.Tensor([1.0, 2.0], name='p')
        grads = self.tape.backward(self.tape.sum(self.tape.mul(param, param)))
        np.testing.assert_array_equal(grads['p'], [2.0, 4.0])

    def test_broadcast_bias(self):
        x = tensor.Tensor(np.ones((4, 3)))
        bias = tensor.Tensor(np.zeros(3), name='b')
        grads = self.tape.backward(self.tape.sum(self.tape.add(x, bias)))
        np.testing.assert_array_equal(grads['b'], [4, 4, 4])

    def test_concat_splits_gradient(self):
        self.assertIs(tensor.PRIMITIVES['concat'], tensor.concat_)
        first = tensor.Tensor(np.ones((2, 1)), name='first')
        second = tensor.Tensor(np.ones((2, 2)), name='second')
        third = tensor.Tensor(np.ones((2, 3)), name='third')
        joined = self.tape.concat(first, second, third, axis=1)
        weights = tensor.Tensor(np.arange(12.0).reshape(2, 6))
        grads = self.tape.backward(self.tape.sum(self.tape.mul(joined, weights)))
        np.testing.assert_array_equal(grads['first'], [[0], [6]])
        np.testing.assert_array_equal(grads['second'], [[1, 2], [7, 8]])
        np.testing.assert_array_equal(grads['third'], [[3, 4, 5], [9, 10, 11]])

    def test_empty_tape(self):
        with self.assertRaises(tensor.EmptyTapeError):
            self.tape.backward(tensor.Tensor(0.0))

    def test_non_scalar(self):
        out = self.tape.tanh(tensor.Tensor([1.0, 2.0], name='p'))
        with self.assertRaises(tensor.DimensionError):
            self.tape.backward(out)

    def test_unused_parameter_untouched(self):
        used = tensor.Tensor([1.0], name='used')
        tensor.Tensor([1.0], name='unused')
        grads = self.tape.backward(self.tape.sum(used))
        self.assertEqual(set(grads), {'used'})
        self.assertEqual(set(self.tape.accumulate_and_reset()), {'used'})

    def test_accumulation(self):
        param = tensor.Tensor([1.0, -2.0], name='p')
        g1 = self.tape.backward(self.tape.sum(self.tape.mul(param, param)))
        g2 = self.tape.backward(self.tape.sum(self.tape.tanh(param)))
        summed = self.tape.accumulate_and_reset()
        np.testing.assert_array_equal(summed['p'], g1['p'] + g2['p'])
        self.assertEqual(self.tape.accumulate_and_reset(), {})

    def test_single_pass_exact(self):
        param = tensor.Tensor([0.3, 0.7], name='p')
        grads = self.tape.backward(self.tape.sum(self.tape.sigmoid(param)))
        np.testing.assert_array_equal(self.tape.accumulate_and_reset()['p'], grads['p'])

    def test_accumulation_matches_recomputation(self):
        rng = np.random.default_rng(3)
        weights = rng.uniform(-1, 1, (5, 3))
        batches = [rng.uniform(-2, 2, (4, 5)) for _ in range(4)]

        def loss(tape, batch):
            param = tensor.Tensor(weights, name='w')
            hidden = tape.tanh(tape.matmul(tensor.Tensor(batch), param))
            return tape.softmax_crossentropy(hidden, labels=[0, 1, 2, 0])

        expected = np.zeros_like(weights)
        for batch in batches:
            fresh = tensor.Tape()
            expected = expected + fresh.backward(loss(fresh, batch))['w']
        for batch in batches:
            self.tape.backward(loss(self.tape, batch))
        summed = self.tape.accumulate_and_reset()['w']
        self.assertLess(np.abs(summed - expected).max(), 1e-12)

    def test_deterministic(self):
        def run():
            tape = tensor.Tape()
            param = tensor.Tensor(np.linspace(-1, 1, 12).reshape(3, 4), name='p')
            out = tape.sigmoid(tape.matmul(param, tensor.Tensor(np.ones((4, 2)))))
            return tape.backward(tape.sum(out))['p']
        np.testing.assert_array_equal(run(), run())


if __name__ == '__main__':
    unittest.main()
