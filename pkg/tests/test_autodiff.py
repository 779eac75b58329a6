import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from magnn import autodiff as ad


def grad_of(fn, *arrays):
    """Autodiff gradients of scalar fn(*tensors) w.r.t. every input."""
    with ad.Tape() as tape:
        ts = [ad.param(a, f"x{i}") for i, a in enumerate(arrays)]
        loss = fn(*ts)
    g = ad.backward(tape, loss, ts)
    return [g[f"x{i}"] for i in range(len(arrays))]


def fd_of(fn, *arrays, eps=1e-6):
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            keep = a[idx]
            a[idx] = keep + eps
            up = float(fn(*[ad.Tensor(x) for x in arrays]).data)
            a[idx] = keep - eps
            down = float(fn(*[ad.Tensor(x) for x in arrays]).data)
            a[idx] = keep
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return out


def check(fn, *arrays):
    for ga, gf in zip(grad_of(fn, *arrays), fd_of(fn, *arrays)):
        err = np.abs(ga - gf) / np.maximum(1e-8, np.abs(ga) + np.abs(gf))
        assert err.max() < 1e-6, err.max()


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ad.matmul(ad.Tensor(np.eye(2)), ad.Tensor(b)).data, b)

    def test_hand_product(self):
        out = ad.matmul(ad.Tensor([[1, 2], [3, 4]]), ad.Tensor([[1], [1]]))
        assert out.data.tolist() == [[3], [7]]

    def test_gradient_of_sum(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        ga, _ = grad_of(lambda x, y: ad.sum(x @ y), a, b)
        np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.T)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_batched_fd(self, rng):
        check(lambda x, w: ad.sum(ad.tanh(x @ w.T)), rng.normal(size=(2, 3, 4)), rng.normal(size=(5, 4)))


class TestConcat:
    def test_values(self):
        assert ad.concat([ad.Tensor([1.0]), ad.Tensor([2.0])]).data.tolist() == [1, 2]

    def test_gradient_split(self):
        ga, gb = grad_of(lambda a, b: ad.sum(ad.concat([a, b]) * np.array([3.0, 5.0])), np.array([1.0]), np.array([2.0]))
        assert ga.tolist() == [3.0] and gb.tolist() == [5.0]

    def test_fd(self, rng):
        w = rng.normal(size=10)
        check(lambda a, b: ad.sum(ad.tanh(ad.concat([a, b])) * w), rng.normal(size=5), rng.normal(size=5))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ad.concat([ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 3)))])


class TestElementwise:
    def test_fixed_points(self):
        assert ad.sigmoid(ad.Tensor([0.0])).data[0] == 0.5
        assert ad.tanh(ad.Tensor([0.0])).data[0] == 0.0

    def test_mean_masked(self):
        out = ad.mean_masked(ad.Tensor([[2.0], [4.0], [6.0]]), [True, True, False])
        assert out.data.tolist() == [3.0]

    def test_mean_masked_all_false(self):
        with pytest.raises(ValueError):
            ad.mean_masked(ad.Tensor([[2.0], [4.0]]), [False, False])

    @pytest.mark.parametrize(
        "fn",
        [
            lambda a, b: ad.sum(ad.sigmoid(a) * ad.tanh(b)),
            lambda a, b: ad.sum(ad.log_sigmoid(a - b)),
            lambda a, b: ad.sum(ad.scale(a, 2.5) + (1.0 - b) * a),
            lambda a, b: ad.sum_squares(a - b),
            lambda a, b: ad.sum(ad.mean_masked(ad.outer_broadcast(a, 3),[True, False, True]) * b),
        ],
    )
    def test_fd(self, fn, rng):
        check(fn, rng.normal(size=4), rng.normal(size=4))

    def test_masked_mean_fd(self, rng):
        mask = np.array([[True, False, True], [False, False, True]])
        check(lambda x: ad.sum(ad.tanh(ad.mean_masked(x, mask))), rng.normal(size=(2, 3, 4)))

    def test_broadcast_add_fd(self, rng):
        check(lambda x, b: ad.sum(ad.tanh(x + b)), rng.normal(size=(3, 4)), rng.normal(size=4))

    def test_log_sigmoid_extremes(self):
        out = ad.log_sigmoid(ad.Tensor([-800.0, 0.0, 800.0])).data
        assert out[0] == -800.0 and out[1] == pytest.approx(-math.log(2)) and out[2] == 0.0


class TestSoftmax:
    def test_single(self):
        assert ad.softmax(ad.Tensor([4.2])).data.tolist() == [1.0]

    def test_uniform(self):
        assert ad.softmax(ad.Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]

    def test_reference_values(self):
        ref = [math.exp(v) / sum(math.exp(w) for w in (1, 2, 3)) for v in (1, 2, 3)]
        np.testing.assert_allclose(ad.softmax(ad.Tensor([1.0, 2.0, 3.0])).data, ref, atol=1e-12, rtol=0)

    def test_masked(self):
        out = ad.softmax(ad.Tensor([[1.0, 50.0, 2.0], [1.0, 1.0, 1.0]]), mask=[[True, False, True], [False] * 3]).data
        assert out[0, 1] == 0.0 and out[0].sum() == pytest.approx(1.0)
        assert out[1].tolist() == [0.0, 0.0, 0.0]

    def test_fd(self, rng):
        w = rng.normal(size=(2, 5))
        mask = np.array([[True] * 5, [True, False, True, True, False]])
        check(lambda x: ad.sum(ad.softmax(x, axis=-1, mask=mask) * w), rng.normal(size=(2, 5)))
        check(lambda x: ad.sum(ad.softmax(x, axis=0) * w), rng.normal(size=(2, 5)))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
                  elements=st.floats(-700, 700)))
    def test_normalised(self, x):
        y = ad.softmax(ad.Tensor(x), axis=-1).data
        assert np.all(y >= 0)
        assert np.all(np.abs(y.sum(axis=-1) - 1.0) <= 1e-10)


class TestGather:
    def test_unit_row(self):
        assert ad.gather_rows(ad.Tensor(np.eye(3)), [0]).data.tolist() == [[1, 0, 0]]

    def test_duplicates_accumulate(self):
        (g,) = grad_of(lambda t: ad.sum(ad.gather_rows(t, [1, 1])), np.zeros((3, 2)))
        assert g.tolist() == [[0, 0], [2, 2], [0, 0]]

    def test_fd(self, rng):
        idx = np.array([[0, 2], [2, 3]])
        check(lambda t: ad.sum(ad.tanh(ad.gather_rows(t, idx))), rng.normal(size=(4, 3)))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            ad.gather_rows(ad.Tensor(np.eye(3)), [3])


def test_sparse_aggregate_fd(rng):
    indptr = np.array([0, 2, 3, 3])
    indices = np.array([1, 2, 0])
    weights = np.array([0.25, 0.75, 1.0])
    rows = np.array([[0, 1], [2, 0]])
    check(lambda t: ad.sum(ad.tanh(ad.sparse_aggregate(indptr, indices, weights, rows, t))), rng.normal(size=(3, 4)))


class TestBackward:
    def test_sum(self):
        (g,) = grad_of(ad.sum, np.array([1.0, 2.0, 3.0]))
        assert g.tolist() == [1, 1, 1]

    def test_square(self):
        (g,) = grad_of(lambda p: ad.sum(p * p), np.array([1.0, 2.0]))
        assert g.tolist() == [2.0, 4.0]

    def test_loss_not_on_tape(self):
        with ad.Tape() as tape:
            ad.sum(ad.param(np.ones(2), "p"))
        with pytest.raises(ValueError):
            ad.backward(tape, ad.Tensor(1.0))

    def test_constants_skipped_and_unused_params_zero(self):
        with ad.Tape() as tape:
            p = ad.param(np.ones(2), "p")
            unused = ad.param(np.ones(3), "u")
            loss = ad.sum(p * ad.Tensor([2.0, 3.0]))
        g = ad.backward(tape, loss, [p, unused])
        assert g["p"].tolist() == [2.0, 3.0]
        assert g["u"].tolist() == [0.0, 0.0, 0.0]

    def test_nodes_recorded_once(self):
        with ad.Tape() as tape:
            p = ad.param(np.ones(2), "p")
            loss = ad.sum(ad.tanh(p) + ad.tanh(p))
        assert len(tape) == 4
        g = ad.backward(tape, loss)
        np.testing.assert_allclose(g["p"], 2 * (1 - np.tanh(1.0) ** 2))

    def test_no_tape_no_recording(self):
        t = ad.param(np.ones(2), "p")
        out = ad.tanh(t)
        assert not out.requires_grad

    def test_replay_determinism(self, rng):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        fn = lambda x, y: ad.sum(ad.softmax(ad.tanh(x @ y)))  # noqa: E731
        g1 = grad_of(fn, a, b)
        g2 = grad_of(fn, a, b)
        for x, y in zip(g1, g2):
            assert x.tobytes() == y.tobytes()


def test_debug_mode_trips_on_nonfinite():
    ad.set_debug(True)
    try:
        with pytest.raises(ad.NonFiniteError), np.errstate(over="ignore"):
            ad.scale(ad.Tensor([1e308]), 10.0)
    finally:
        ad.set_debug(False)


def test_precision_modes():
    with ad.precision("float32"):
        assert ad.Tensor([1.0]).data.dtype == np.float32
        assert ad.precision_name() == "float32"
    assert ad.Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        ad.set_precision("float16")
