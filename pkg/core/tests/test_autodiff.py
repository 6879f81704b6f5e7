import numpy as np
from django.test import SimpleTestCase

from core.exceptions import DimensionError, NumericFault
from core.services.gradcheck_service import COMPOSITE_PARAMS, all_cases, check_case, run_checks
from core.utils import functional as F
from core.utils.gradcheck import gradcheck
from core.utils.tensor import Tensor, get_default_dtype, no_grad, precision
from core.utils.tensor_io import ContainerFormatError, decode_tensors, encode_tensors


class TensorTests(SimpleTestCase):
    def test_backward_accumulates_until_zero_grad(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
        for _ in range(2):
            F.sum(x * x).backward()
        np.testing.assert_allclose(x.grad, 4 * x.data)
        x.zero_grad()
        self.assertIsNone(x.grad)

    def test_shared_subexpression_gets_both_paths(self):
        x = Tensor(np.array([0.5, -1.5]), requires_grad=True, dtype=np.float64)
        y = F.exp(x)
        F.sum(y * y + y).backward()
        expected = 2 * np.exp(2 * x.data) + np.exp(x.data)
        np.testing.assert_allclose(x.grad, expected, rtol=1e-12)

    def test_broadcast_gradient_is_reduced_to_input_shape(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True, dtype=np.float64)
        b = Tensor(np.ones((1, 4)), requires_grad=True, dtype=np.float64)
        F.sum(a * b).backward()
        self.assertEqual(b.grad.shape, (1, 4))
        np.testing.assert_allclose(b.grad, np.full((1, 4), 3.0))

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        self.assertFalse(y.requires_grad)
        self.assertIsNone(y.creator)

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(DimensionError):
            (x * 2.0).backward()

    def test_precision_context_restores_default(self):
        before = get_default_dtype()
        with precision(np.float64):
            self.assertEqual(Tensor([1.0]).dtype, np.float64)
        self.assertEqual(get_default_dtype(), before)

    def test_softmax_rejects_nan_logits(self):
        with self.assertRaises(NumericFault):
            F.softmax(Tensor([np.nan, 1.0], requires_grad=True))

    def test_check_finite(self):
        with self.assertRaises(NumericFault):
            Tensor([np.nan]).check_finite('loss')


class FunctionalTests(SimpleTestCase):
    def test_softmax_rows_sum_to_one(self):
        x = Tensor(np.random.default_rng(0).standard_normal((4, 7)), dtype=np.float64)
        np.testing.assert_allclose(F.softmax(x, temperature=0.1).data.sum(axis=1), 1.0, atol=1e-12)

    def test_cross_entropy_soft_matches_manual(self):
        logits = np.array([[1.0, 2.0, 0.5], [0.1, -0.3, 0.2]])
        targets = np.array([[0.2, 0.5, 0.3], [1.0, 0.0, 0.0]])
        loss = F.cross_entropy_soft(Tensor(logits, dtype=np.float64), targets, temperature=0.5).item()
        z = logits / 0.5
        log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        self.assertAlmostEqual(loss, float(-(targets * log_p).sum() / 2), places=12)

    def test_bicubic_resize_identity_and_constant(self):
        array = np.random.default_rng(1).standard_normal((4, 4, 3))
        np.testing.assert_allclose(F.bicubic_resize(array, 4, 4), array)
        constant = np.full((8, 8, 2), 0.7)
        np.testing.assert_allclose(F.bicubic_resize(constant, 4, 4), 0.7, atol=1e-12)

    def test_gather_rows_scatters_repeated_gradients(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True, dtype=np.float64)
        F.sum(F.gather_rows(x, np.array([0, 0, 2]))).backward()
        np.testing.assert_allclose(x.grad, [[2, 2], [0, 0], [1, 1]])


class GradcheckTests(SimpleTestCase):
    def test_every_operation_passes(self):
        names = [name for name in all_cases() if name != 'composite_loss']
        results = run_checks(names)
        failed = [r.name for r in results if not r.passed]
        self.assertEqual(failed, [])
        self.assertTrue(all(r.worst_error < 1e-4 for r in results))

    def test_composite_loss_passes(self):
        result = check_case('composite_loss', all_cases()['composite_loss'], rtol=1e-3)
        self.assertTrue(result.passed, result.error)
        self.assertGreater(len(COMPOSITE_PARAMS), 0)

    def test_wrong_gradient_is_reported(self):
        class Broken(F.Exp):
            def backward(self, grad):
                return (grad * self.out * 1.01,)

        def fn(x):
            return F.sum(Broken.apply(x))

        with self.assertRaises(AssertionError):
            gradcheck(fn, [Tensor(np.array([0.3, -0.2]), requires_grad=True)])

    def test_unknown_case_raises(self):
        with self.assertRaises(KeyError):
            run_checks(['no_such_op'])


class ContainerTests(SimpleTestCase):
    def test_mixed_dtypes_survive_encoding(self):
        tensors = {
            'w': np.arange(6, dtype=np.float32).reshape(2, 3),
            'step': np.array([7], dtype=np.int64),
            'mask': np.array([True, False]),
        }
        decoded = decode_tensors(encode_tensors(tensors))
        self.assertEqual(list(decoded), ['w', 'step', 'mask'])
        np.testing.assert_array_equal(decoded['w'], tensors['w'])
        self.assertEqual(decoded['w'].dtype, np.float32)
        self.assertEqual(int(decoded['step'][0]), 7)

    def test_bad_magic(self):
        with self.assertRaises(ContainerFormatError):
            decode_tensors(b'XXXX' + bytes(8))
