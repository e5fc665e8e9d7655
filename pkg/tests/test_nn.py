import numpy as np
import numpy.testing as npt
import pytest

from mixnn import nn


def f32(x):
    return np.asarray(x, dtype=np.float32)


class TestLinear:
    def test_identity_weights(self):
        w = f32(np.eye(2))
        b = f32([[0.0, 0.0]])
        out = nn.linear_forward(w, b, f32([[3.0, 5.0]]))
        npt.assert_array_equal(out, f32([[3.0, 5.0]]))

    def test_hand_computed(self):
        # y[c] = sum_k x[k] * w[c][k] + b[c]
        w = f32([[1, 2], [3, 4]])
        b = f32([[0.5, -0.5]])
        out = nn.linear_forward(w, b, f32([[1, 1]]))
        npt.assert_allclose(out, f32([[3.5, 6.5]]), rtol=0)

    def test_reference_matmul_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            batch, din, dout = rng.integers(1, 9, size=3)
            x = rng.standard_normal((batch, din)).astype(np.float32)
            w = rng.standard_normal((dout, din)).astype(np.float32)
            b = rng.standard_normal((1, dout)).astype(np.float32)
            expect = np.zeros((batch, dout), dtype=np.float64)
            for r in range(batch):
                for c in range(dout):
                    expect[r, c] = sum(float(x[r, k]) * float(w[c, k]) for k in range(din)) \
                        + float(b[0, c])
            npt.assert_allclose(nn.linear_forward(w, b, x), expect, rtol=1e-5, atol=1e-5)

    def test_table_shape(self):
        # first cascade server of the MNIST MLP: batch x 784 -> batch x 128
        rng = np.random.default_rng(1)
        w = rng.standard_normal((128, 784)).astype(np.float32)
        b = np.zeros((1, 128), dtype=np.float32)
        out = nn.linear_forward(w, b, rng.standard_normal((64, 784)).astype(np.float32))
        assert out.shape == (64, 128)

    def test_shape_mismatch(self):
        w = f32([[1, 2], [3, 4]])
        b = f32([[0, 0]])
        with pytest.raises(nn.ShapeError) as err:
            nn.linear_forward(w, b, f32([[1, 2, 3]]))
        assert "(1, 3)" in str(err.value) and "(2, 2)" in str(err.value)

    def test_backward_zero_gradient(self):
        x = f32([[1, 2], [3, 4]])
        w = f32([[1, 0], [0, 1]])
        dw, db, dx = nn.linear_backward(x, w, np.zeros((2, 2), dtype=np.float32))
        assert not dw.any() and not db.any() and not dx.any()

    def test_backward_hand_case(self):
        dw, db, dx = nn.linear_backward(f32([[1, 1]]), f32([[1, 2], [3, 4]]), f32([[1, 0]]))
        npt.assert_array_equal(dx, f32([[1, 2]]))
        npt.assert_array_equal(dw, f32([[1, 1], [0, 0]]))
        npt.assert_array_equal(db, f32([[1, 0]]))

    def test_backward_missing_cache(self):
        with pytest.raises(nn.ProtocolOrderError):
            nn.linear_backward(None, f32([[1.0]]), f32([[1.0]]))


class TestReLU:
    def test_sign_cases(self):
        npt.assert_array_equal(nn.relu_forward(f32([[-1, 0, 2]])), f32([[0, 0, 2]]))

    def test_identity_on_positives(self):
        x = f32([[0.5, 1.5], [2.0, 3.0]])
        npt.assert_array_equal(nn.relu_forward(x), x)

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 7)).astype(np.float32)
        npt.assert_array_equal(nn.relu_forward(x), x * (x > 0))

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 4)).astype(np.float32)
        once = nn.relu_forward(x)
        npt.assert_array_equal(nn.relu_forward(once), once)

    def test_backward_masks_and_zero_point(self):
        out = nn.relu_backward(f32([[-1, 0, 2]]), f32([[5, 7, 9]]))
        npt.assert_array_equal(out, f32([[0, 0, 9]]))

    def test_backward_passthrough(self):
        dy = f32([[1, 2], [3, 4]])
        npt.assert_array_equal(nn.relu_backward(f32([[1, 1], [2, 2]]), dy), dy)

    def test_backward_shape_mismatch(self):
        with pytest.raises(nn.ShapeError):
            nn.relu_backward(f32([[1, 2]]), f32([[1, 2, 3]]))


class TestLogSoftmax:
    def test_uniform_row(self):
        out = nn.logsoftmax_forward(f32([[0.0, 0.0]]))
        npt.assert_allclose(out, [[-np.log(2), -np.log(2)]], atol=1e-7)

    def test_no_overflow_on_huge_inputs(self):
        out = nn.logsoftmax_forward(f32([[1000.0, 1000.0]]))
        assert np.isfinite(out).all()
        npt.assert_allclose(out, [[-np.log(2), -np.log(2)]], atol=1e-6)

    def test_rows_normalize(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            x = (rng.standard_normal((6, 10)) * rng.uniform(0.1, 50)).astype(np.float32)
            sums = np.exp(nn.logsoftmax_forward(x)).sum(axis=1)
            npt.assert_allclose(sums, np.ones(6), atol=1e-6)

    def test_table_shape(self):
        x = np.zeros((64, 10), dtype=np.float32)
        assert nn.logsoftmax_forward(x).shape == (64, 10)

    def test_backward_zero(self):
        out = nn.logsoftmax_forward(f32([[1.0, 2.0, 3.0]]))
        npt.assert_array_equal(nn.logsoftmax_backward(out, np.zeros_like(out)),
                               np.zeros_like(out))


class TestNLL:
    def test_perfect_prediction(self):
        logp = np.zeros((3, 4), dtype=np.float32)  # logp[target]=0 everywhere
        loss, _ = nn.nll_loss(logp, np.array([0, 1, 2]))
        assert loss == 0.0

    def test_direct_formula(self):
        loss, dlogp = nn.nll_loss(f32([[-0.5, -1.0]]), np.array([0]))
        assert abs(float(loss) - 0.5) < 1e-7
        npt.assert_array_equal(dlogp, f32([[-1.0, 0.0]]))

    def test_scalar_output_shape(self):
        # last cascade server of the MNIST MLP: 10 log-probs in, one real out
        rng = np.random.default_rng(5)
        logp = nn.logsoftmax_forward(rng.standard_normal((64, 10)).astype(np.float32))
        loss, dlogp = nn.nll_loss(logp, rng.integers(0, 10, 64))
        assert np.isscalar(float(loss)) and dlogp.shape == (64, 10)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            nn.nll_loss(f32([[-0.1, -0.2]]), np.array([2]))

    def test_batch_averaging(self):
        logp = f32([[-1.0, -2.0], [-3.0, -4.0]])
        loss, dlogp = nn.nll_loss(logp, np.array([0, 1]))
        assert abs(float(loss) - 2.5) < 1e-6
        npt.assert_allclose(dlogp, f32([[-0.5, 0], [0, -0.5]]))


class TestSGDMomentum:
    def test_momentum_free_reduction(self):
        p = f32([[1.0]])
        v = np.zeros_like(p)
        nn.sgd_momentum_step(p, f32([[0.5]]), v, learning_rate=0.01, momentum=0.0)
        npt.assert_allclose(p, [[0.995]], atol=1e-7)

    def test_hand_iterated_recurrence(self):
        p = f32([[1.0]])
        v = np.zeros_like(p)
        g = f32([[0.1]])
        nn.sgd_momentum_step(p, g, v, 0.01, 0.9)
        npt.assert_allclose(v, [[0.1]], atol=1e-7)
        npt.assert_allclose(p, [[0.999]], atol=1e-7)
        nn.sgd_momentum_step(p, g, v, 0.01, 0.9)
        npt.assert_allclose(v, [[0.19]], atol=1e-7)
        npt.assert_allclose(p, [[0.9971]], atol=1e-6)

    def test_zero_grad_zero_velocity_fixed_point(self):
        p = f32([[2.0, 3.0]])
        before = p.copy()
        nn.sgd_momentum_step(p, np.zeros_like(p), np.zeros_like(p), 0.01, 0.9)
        npt.assert_array_equal(p, before)

    def test_shape_mismatch(self):
        with pytest.raises(nn.ShapeError):
            nn.sgd_momentum_step(f32([[1.0]]), f32([[1.0, 2.0]]), f32([[0.0]]), 0.01, 0.9)


class TestLayerForward:
    def test_identity_chain(self):
        spec = nn.LayerSpec([nn.identity()], seed=0)
        params = nn.init_layer_params(spec)
        x = np.arange(6, dtype=np.float32).reshape(2, 3)
        out, cache = nn.layer_forward(spec, params, x)
        npt.assert_array_equal(out, x)
        assert cache is not None

    def test_mnist_first_server_chain(self):
        spec = nn.LayerSpec([nn.linear(784, 128), nn.relu()], seed=1)
        params = nn.init_layer_params(spec)
        out, _ = nn.layer_forward(spec, params, np.zeros((4, 784), dtype=np.float32))
        assert out.shape == (4, 128)
        assert (out >= 0).all()

    def test_composition_equals_separate_layers(self):
        rng = np.random.default_rng(6)
        composed = nn.LayerSpec([nn.linear(5, 4), nn.linear(4, 3)], seed=9)
        params = nn.init_layer_params(composed)
        x = rng.standard_normal((7, 5)).astype(np.float32)
        out_composed, _ = nn.layer_forward(composed, params, x)

        first = nn.LayerSpec([nn.linear(5, 4)], seed=0)
        second = nn.LayerSpec([nn.linear(4, 3)], seed=0)
        mid, _ = nn.layer_forward(first, [params[0]], x)
        out_split, _ = nn.layer_forward(second, [params[1]], mid)
        npt.assert_array_equal(out_composed, out_split)

    def test_dimension_mismatch_inside_chain(self):
        spec = nn.LayerSpec([nn.linear(3, 4), nn.linear(5, 2)], seed=0)
        params = nn.init_layer_params(spec)
        with pytest.raises(nn.ShapeError):
            nn.layer_forward(spec, params, np.zeros((1, 3), dtype=np.float32))

    def test_nllloss_only_final(self):
        with pytest.raises(ValueError):
            nn.LayerSpec([nn.nllloss(), nn.relu()], seed=0)


class TestDeterminism:
    def test_bitwise_repeatable(self):
        spec = nn.LayerSpec([nn.linear(16, 8), nn.relu(), nn.linear(8, 4)], seed=5)
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 16)).astype(np.float32)
        a, _ = nn.layer_forward(spec, nn.init_layer_params(spec), x)
        b, _ = nn.layer_forward(spec, nn.init_layer_params(spec), x)
        assert a.tobytes() == b.tobytes()

    def test_init_depends_on_seed(self):
        s1 = nn.init_layer_params(nn.LayerSpec([nn.linear(4, 4)], seed=1))
        s2 = nn.init_layer_params(nn.LayerSpec([nn.linear(4, 4)], seed=2))
        assert not np.array_equal(s1[0][0], s2[0][0])

    def test_init_bound(self):
        spec = nn.LayerSpec([nn.linear(100, 50)], seed=3)
        w, b = nn.init_layer_params(spec)[0]
        bound = 1.0 / np.sqrt(100)
        assert (np.abs(w) <= bound).all() and (np.abs(b) <= bound).all()
        assert w.dtype == np.float32 and b.dtype == np.float32

    def test_outputs_stay_finite(self):
        rng = np.random.default_rng(8)
        spec = nn.LayerSpec(
            [nn.linear(12, 8), nn.relu(), nn.linear(8, 6), nn.logsoftmax()], seed=4
        )
        params = nn.init_layer_params(spec)
        x = (rng.standard_normal((5, 12)) * 100).astype(np.float32)
        out, _ = nn.layer_forward(spec, params, x)
        assert np.isfinite(out).all()

    def test_make_layer_specs_reproducible(self):
        a = nn.make_layer_specs([[nn.linear(3, 2)], [nn.nllloss()]], seed=42)
        b = nn.make_layer_specs([[nn.linear(3, 2)], [nn.nllloss()]], seed=42)
        assert [s.seed for s in a] == [s.seed for s in b]
        assert a[0].seed != a[1].seed


class TestBatchIndices:
    def test_covers_everything_once(self):
        idx = nn.batch_indices(10, 3, shuffle=True, seed=1, epoch=0)
        flat = np.concatenate(idx)
        assert sorted(flat.tolist()) == list(range(10))
        assert [len(b) for b in idx] == [3, 3, 3, 1]

    def test_no_shuffle_is_sequential(self):
        idx = nn.batch_indices(6, 2, shuffle=False, seed=1, epoch=3)
        npt.assert_array_equal(np.concatenate(idx), np.arange(6))

    def test_epoch_changes_order(self):
        a = nn.batch_indices(50, 10, True, seed=1, epoch=0)
        b = nn.batch_indices(50, 10, True, seed=1, epoch=1)
        assert not np.array_equal(np.concatenate(a), np.concatenate(b))
