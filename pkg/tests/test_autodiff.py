"""Gradient and behavior checks for the reverse-mode engine."""

import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfwi import autodiff as ad
from tfwi.autodiff import Tensor

from gradcheck import check

RNG = np.random.default_rng(20260815)


def t(*shape, lo=-2.0, hi=2.0):
    return Tensor(RNG.uniform(lo, hi, shape))


class TestElementwise:
    def test_add_same_shape(self):
        check(lambda a, b: (a + b).sum(), [t(3, 4), t(3, 4)])

    def test_add_broadcast_trailing(self):
        check(lambda a, b: (a + b).sum(), [t(2, 3, 4), t(4)])

    def test_add_broadcast_inner_ones(self):
        check(lambda a, b: (a * b).sum(), [t(2, 3, 1, 1), t(2, 3, 5, 5)])

    def test_sub(self):
        check(lambda a, b: (a - b).sum(), [t(3, 4), t(4)])

    def test_mul(self):
        check(lambda a, b: (a * b).sum(), [t(5), t(5)])

    def test_div(self):
        check(lambda a, b: (a / b).sum(), [t(4, 3), t(4, 3, lo=0.5, hi=2.0)])

    def test_scalar_mixing(self):
        check(lambda a: (2.0 * a + 1.0 - a / 3.0).sum(), [t(6)])

    def test_neg_pow(self):
        check(lambda a: ((-a) ** 3).sum(), [t(5, lo=0.5, hi=2.0)])

    def test_exp_log_sqrt(self):
        check(lambda a: (ad.exp(a) + ad.log(a) + ad.sqrt(a)).sum(),
              [t(7, lo=0.5, hi=2.0)])

    def test_tanh(self):
        check(lambda a: ad.tanh(a).sum(), [t(8)])

    def test_relu_away_from_kink(self):
        x = Tensor(np.array([-1.5, -0.7, 0.4, 2.2]))
        check(lambda a: ad.relu(a).sum(), [x])

    def test_gelu(self):
        check(lambda a: ad.gelu(a).sum(), [t(9)])

    def test_gelu_matches_reference_values(self):
        # tanh form evaluated by hand at a few points
        x = Tensor(np.array([0.0, 1.0, -1.0]))
        y = ad.gelu(x).numpy()
        assert abs(y[0]) < 1e-12
        assert abs(y[1] - 0.8411919906082768) < 1e-12
        assert abs(y[2] + 0.15880800939172324) < 1e-12

    def test_clamp_interior(self):
        x = Tensor(np.array([-0.5, 0.2, 0.7]))
        check(lambda a: ad.clamp(a, -1.0, 1.0).sum(), [x])

    def test_clamp_saturated_grad_is_zero(self):
        x = Tensor(np.array([-3.0, 0.0, 3.0]), requires_grad=True)
        ad.backward(ad.clamp(x, -1.0, 1.0).sum())
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ad.ShapeError):
            ad.add(t(3, 4), t(3, 5))
        with pytest.raises(ad.ShapeError):
            ad.mul(t(2, 3), t(4, 3))


class TestShapeOps:
    def test_reshape_transpose(self):
        check(lambda a: (ad.transpose(a.reshape(3, 4), (1, 0)) ** 2).sum(),
              [t(12)])

    def test_getitem_slice(self):
        check(lambda a: a[1:3].sum(), [t(5, 2)])

    def test_getitem_fancy_repeated(self):
        idx = np.array([0, 2, 2, 1])
        x = Tensor(np.arange(4.0), requires_grad=True)
        ad.backward(x[idx].sum())
        assert np.array_equal(x.grad, [1.0, 1.0, 2.0, 0.0])

    def test_concat(self):
        check(lambda a, b: ad.concat([a, b], axis=1).sum(), [t(2, 3), t(2, 2)])

    def test_sum_axis(self):
        check(lambda a: (a.sum(axis=1) ** 2).sum(), [t(3, 4)])

    def test_mean_axes(self):
        check(lambda a: (a.mean(axis=(0, 2)) ** 2).sum(), [t(2, 3, 4)])

    def test_reshape_bad_size(self):
        with pytest.raises(ad.ShapeError):
            t(6).reshape(4)


class TestMatmul:
    def test_2d(self):
        check(lambda a, b: (a @ b).sum(), [t(3, 4), t(4, 2)])

    def test_batched_shared_weight(self):
        check(lambda a, b: ((a @ b) ** 2).sum(), [t(2, 5, 3), t(3, 4)])

    def test_full_batched(self):
        check(lambda a, b: (a @ b).sum(), [t(2, 3, 4), t(2, 4, 2)])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ad.ShapeError):
            t(3, 4) @ t(3, 4)

    def test_vector_rejected(self):
        with pytest.raises(ad.ShapeError):
            t(4) @ t(4, 2)


class TestNeuralOps:
    def test_softmax_grad(self):
        w = Tensor(RNG.normal(size=(3, 5)))
        check(lambda a: (ad.softmax(a) * w).sum(), [t(3, 5)])

    def test_log_softmax_grad(self):
        w = Tensor(RNG.normal(size=(4, 6)))
        check(lambda a: (ad.log_softmax(a) * w).sum(), [t(4, 6)])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 9))
    def test_softmax_rows_are_distributions(self, n, k):
        rng = np.random.default_rng(n * 100 + k)
        y = ad.softmax(Tensor(rng.normal(size=(n, k)) * 5)).numpy()
        assert np.all(y > 0)
        assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)

    def test_layer_norm_grad(self):
        g = Tensor(RNG.uniform(0.5, 1.5, 6))
        b = Tensor(RNG.uniform(-0.5, 0.5, 6))
        check(lambda a, gg, bb: (ad.layer_norm(a, gg, bb) ** 2).sum(),
              [t(4, 6), g, b], rtol=5e-6)

    def test_layer_norm_statistics(self):
        x = t(10, 32)
        y = ad.layer_norm(x, Tensor(np.ones(32)), Tensor(np.zeros(32))).numpy()
        assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-9)
        assert np.allclose(y.std(axis=-1), 1.0, atol=1e-3)

    def test_embedding_grad(self):
        idx = np.array([[0, 2], [2, 1]])
        check(lambda tab: (ad.embedding(tab, idx) ** 2).sum(), [t(4, 3)])

    def test_embedding_range_check(self):
        with pytest.raises(ad.ShapeError):
            ad.embedding(t(4, 3), np.array([4]))

    def test_cross_entropy_grad(self):
        targets = np.array([1, 0, 3, 2, 1])
        check(lambda lg: ad.cross_entropy_with_logits(lg, targets), [t(5, 4)])

    def test_cross_entropy_uniform_logits(self):
        # all-equal logits: loss = log K regardless of targets
        logits = Tensor(np.zeros((3, 8)))
        loss = ad.cross_entropy_with_logits(logits, np.array([0, 5, 7]))
        assert abs(loss.item() - np.log(8)) < 1e-12

    def test_mse_grad(self):
        check(lambda a, b: ad.mse_loss(a, b), [t(3, 4), t(3, 4)])

    def test_mse_value(self):
        a = Tensor(np.array([1.0, 2.0]))
        b = Tensor(np.array([0.0, 4.0]))
        assert abs(ad.mse_loss(a, b).item() - 2.5) < 1e-12


class TestConvResize:
    def test_conv2d_valid(self):
        check(lambda x, w, b: (ad.conv2d(x, w, b) ** 2).sum(),
              [t(2, 3, 6, 6), t(4, 3, 3, 3), t(4)])

    def test_conv2d_stride_zero_pad(self):
        pads = ((1, 1), (1, 1))
        check(lambda x, w: ad.conv2d(x, w, stride=2, pads=pads).sum(),
              [t(1, 2, 7, 7), t(3, 2, 3, 3)])

    def test_conv2d_reflect_pad(self):
        pads = ((2, 2), (2, 2))
        check(lambda x, w: (ad.conv2d(x, w, pads=pads, pad_mode="reflect") ** 2).sum(),
              [t(2, 1, 5, 5), t(2, 1, 5, 5)])

    def test_conv2d_asymmetric_same(self):
        # 7 -> ceil(7/2) = 4 with k=4 needs uneven padding
        pt = ad.same_pads(7, 4, 2)
        out = ad.conv2d(t(1, 1, 7, 7), t(1, 1, 4, 4), stride=2,
                        pads=(pt, pt))
        assert out.shape == (1, 1, 4, 4)
        check(lambda x, w: ad.conv2d(x, w, stride=2, pads=(pt, pt)).sum(),
              [t(1, 1, 7, 7), t(1, 1, 4, 4)])

    def test_conv2d_identity_kernel(self):
        x = t(1, 1, 4, 4)
        w = Tensor(np.ones((1, 1, 1, 1)))
        assert np.allclose(ad.conv2d(x, w).numpy(), x.numpy())

    def test_conv2d_shape_errors(self):
        with pytest.raises(ad.ShapeError):
            ad.conv2d(t(1, 2, 5, 5), t(3, 1, 3, 3))

    def test_resize_bilinear_grad(self):
        check(lambda x: (ad.resize2d(x, 7, 5) ** 2).sum(), [t(1, 2, 4, 3)])

    def test_resize_bilinear_down_grad(self):
        check(lambda x: ad.resize2d(x, 3, 3).sum(), [t(2, 1, 5, 5)])

    def test_resize_nearest_grad(self):
        check(lambda x: (ad.resize2d(x, 6, 6) ** 2).sum(), [t(1, 1, 3, 3)])

    def test_resize_identity(self):
        x = t(1, 1, 5, 5)
        assert np.allclose(ad.resize2d(x, 5, 5).numpy(), x.numpy())

    def test_resize_constant_preserved(self):
        x = Tensor(np.full((1, 1, 4, 4), 3.25))
        assert np.allclose(ad.resize2d(x, 9, 7).numpy(), 3.25)


class TestRope:
    def test_rotation_preserves_norm(self):
        x = t(2, 6, 8)
        cos, sin = ad.rope_tables(np.arange(6), 8)
        y = ad.rope_rotate(x, cos, sin).numpy()
        assert np.allclose(np.linalg.norm(y, axis=-1),
                           np.linalg.norm(x.numpy(), axis=-1))

    def test_zero_position_is_identity(self):
        x = t(1, 1, 8)
        cos, sin = ad.rope_tables(np.zeros(1), 8)
        assert np.allclose(ad.rope_rotate(x, cos, sin).numpy(), x.numpy())

    def test_relative_phase(self):
        # q at position p and k at position q: dot depends on p - q only
        d = 16
        rng = np.random.default_rng(3)
        q = rng.normal(size=d)
        k = rng.normal(size=d)

        def dot_at(pq, pk):
            cq, sq = ad.rope_tables(np.array([pq]), d)
            ck, sk = ad.rope_tables(np.array([pk]), d)
            qr = ad.rope_rotate(Tensor(q.reshape(1, d)), cq, sq).numpy()
            kr = ad.rope_rotate(Tensor(k.reshape(1, d)), ck, sk).numpy()
            return float((qr @ kr.T)[0, 0])

        assert abs(dot_at(5, 2) - dot_at(9, 6)) < 1e-9

    def test_grad(self):
        cos, sin = ad.rope_tables(np.arange(4), 6)
        check(lambda x: (ad.rope_rotate(x, cos, sin) ** 2).sum(), [t(2, 4, 6)])

    def test_odd_dim_rejected(self):
        cos, sin = ad.rope_tables(np.arange(3), 6)
        with pytest.raises(ad.ShapeError):
            ad.rope_rotate(t(3, 7), cos, sin)


class TestEngine:
    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ad.ShapeError):
            ad.backward(x * 2)

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x + x  # dy/dx = 2x + 1 = 5
        ad.backward(y.sum())
        assert abs(x.grad[0] - 5.0) < 1e-12

    def test_tape_cleared_after_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        ad.backward((x * 3).sum())
        assert len(ad._tape()) == 0

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = x * 2
        assert not y.requires_grad
        assert len(ad._tape()) == 0

    def test_disconnected_param_gets_zeros(self):
        x = Tensor(np.ones(2), requires_grad=True)
        z = Tensor(np.ones(4), requires_grad=True)
        ad.backward((x * 2).sum(), params=[x, z])
        assert np.array_equal(z.grad, np.zeros(4))

    def test_stop_gradient_blocks(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = ad.stop_gradient(x * 2) * x  # only the direct factor contributes
        ad.backward(y.sum())
        assert abs(x.grad[0] - 6.0) < 1e-12

    def test_straight_through_passes_unit_grad(self):
        z = Tensor(np.array([0.3, -0.8]), requires_grad=True)
        q = Tensor(np.array([1.0, -1.0]))
        y = z + ad.stop_gradient(q - z)
        assert np.allclose(y.numpy(), q.numpy())
        ad.backward((y * Tensor(np.array([2.0, 5.0]))).sum())
        assert np.allclose(z.grad, [2.0, 5.0])

    def test_thread_local_tapes(self):
        errs = []

        def worker(seed):
            try:
                rng = np.random.default_rng(seed)
                for _ in range(20):
                    x = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
                    ad.backward(((x @ x) ** 2).sum())
                    assert x.grad is not None
                    assert len(ad._tape()) == 0
            except Exception as e:  # propagate to the main thread
                errs.append(e)

        threads = [threading.Thread(target=worker, args=(s,)) for s in range(4)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        assert not errs

    def test_dropout_passthrough_and_scaling(self):
        rng = np.random.default_rng(0)
        x = Tensor(np.ones((100, 100)))
        assert ad.dropout(x, 0.0, rng) is x
        y = ad.dropout(x, 0.5, rng).numpy()
        kept = y[y > 0]
        assert np.allclose(kept, 2.0)
        assert abs(y.mean() - 1.0) < 0.05
