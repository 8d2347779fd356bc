import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nmtkit import autodiff as ad
from nmtkit.autodiff import ShapeError, Tape, Tensor, backward, check_gradients


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Plain numeric gradient of a numpy-valued scalar function."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


class TestTensor:
    def test_shape_and_flat_data(self):
        t = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        assert t.shape == (2, 3)
        assert np.prod(t.shape) == t.data.size
        np.testing.assert_array_equal(t.data, [1, 2, 3, 4, 5, 6])

    def test_values_are_read_only(self):
        t = Tensor(np.zeros(3))
        with pytest.raises(ValueError):
            t.value[0] = 1.0

    def test_constructor_copies_input(self):
        raw = np.ones(3)
        t = Tensor(raw)
        raw[0] = 7.0
        assert t.value[0] == 1.0

    def test_reshape_is_a_new_tensor(self):
        t = Tensor(np.arange(6.0))
        r = t.reshape(2, 3)
        assert r.shape == (2, 3) and t.shape == (6,)
        with pytest.raises(ValueError):
            r.value[0, 0] = 5.0

    def test_watch_leaves_caller_array_writable(self):
        raw = np.ones(4)
        with Tape() as tape:
            tape.watch(raw)
        raw[0] = 2.0  # must not raise
        assert raw[0] == 2.0

    def test_elementwise_rejects_implicit_broadcast(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_scalar_operand_allowed(self):
        out = ad.mul(Tensor(np.ones((2, 2))), 3.0)
        np.testing.assert_array_equal(out.value, 3 * np.ones((2, 2)))

    def test_expand_is_explicit_broadcast(self):
        out = ad.expand(Tensor(np.arange(3.0)), (2, 3))
        np.testing.assert_array_equal(out.value, [[0, 1, 2], [0, 1, 2]])


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.value, [[3, 4], [5, 6]])

    def test_row_times_column(self):
        out = ad.matmul(Tensor([[1, 2]]), Tensor([[3], [4]]))
        np.testing.assert_array_equal(out.value, [[11]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_leading_dims_must_match(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 3, 4))))

    def test_grad_of_sum_is_ones_times_b_transpose(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        with Tape() as tape:
            ta, tb = tape.watch(a), tape.watch(b)
            loss = ad.reduce_sum(ad.matmul(ta, tb))
        ga, gb = tape.gradient(loss, [ta, tb])
        np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.T, rtol=1e-12)
        numeric = central_difference(lambda x: (x @ b).sum(), a)
        np.testing.assert_allclose(ga, numeric, rtol=1e-8, atol=1e-9)

    @given(hnp.arrays(np.int64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
                      elements=st.integers(-1000, 1000)))
    def test_times_identity_is_exact(self, a):
        out = ad.matmul(Tensor(a), Tensor(np.eye(a.shape[1])))
        np.testing.assert_array_equal(out.value, a)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0, 0, 0])).value, [0.25] * 4)

    def test_large_logits_do_not_overflow(self):
        out = ad.softmax(Tensor([1000.0, 0.0])).value
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)

    def test_axis_out_of_range(self):
        with pytest.raises((ValueError, IndexError)):
            ad.softmax(Tensor(np.ones((2, 3))), axis=2)

    @settings(max_examples=60)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                      elements=st.floats(-1e3, 1e3)),
           st.sampled_from([0, 1, -1]))
    def test_slices_sum_to_one(self, x, axis):
        y = ad.softmax(Tensor(x), axis=axis).value
        assert np.all(y > 0) or np.all(y >= 0)
        assert np.all(y <= 1.0)
        np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-9)


class TestLayerNorm:
    def test_constant_row_collapses_to_bias(self):
        out = ad.layer_norm(Tensor([5.0, 5, 5, 5]), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-6)
        np.testing.assert_allclose(out.value, np.zeros(4), atol=1e-12)

    def test_zero_gain_gives_bias(self, rng):
        bias = rng.standard_normal(4)
        out = ad.layer_norm(Tensor(rng.standard_normal((3, 4))), Tensor(np.zeros(4)), Tensor(bias), 1e-6)
        np.testing.assert_array_equal(out.value, np.broadcast_to(bias, (3, 4)))

    def test_normalises(self, rng):
        out = ad.layer_norm(Tensor(rng.standard_normal((5, 16)) * 3 + 2),
                            Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-9).value
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)

    @pytest.mark.parametrize("eps", [0.0, -1e-6])
    def test_non_positive_epsilon(self, eps):
        with pytest.raises(ValueError):
            ad.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(4)), Tensor(np.zeros(4)), eps)

    def test_gradient_random_3x4(self, rng):
        params = {"x": rng.standard_normal((3, 4)), "g": rng.standard_normal(4), "b": rng.standard_normal(4)}
        w = rng.standard_normal((3, 4))
        err = check_gradients(lambda p: ad.reduce_sum(ad.layer_norm(p["x"], p["g"], p["b"], 1e-6) * w), params)
        assert err < 1e-5


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = rng.standard_normal((2, 3))
        with Tape() as tape:
            tx = tape.watch(x)
            loss = ad.reduce_sum(tx)
        np.testing.assert_array_equal(tape.gradient(loss, [tx])[0], np.ones((2, 3)))

    def test_sum_of_squares(self):
        with Tape() as tape:
            x = tape.watch(np.array([1.0, 2.0]))
            loss = ad.reduce_sum(x * x)
        np.testing.assert_array_equal(tape.gradient(loss, [x])[0], [2.0, 4.0])

    def test_non_scalar_loss(self):
        with Tape() as tape:
            x = tape.watch(np.ones(3))
            y = x * 2.0
        with pytest.raises(ShapeError):
            backward(tape, y)

    def test_loss_from_another_tape(self):
        with Tape() as t1:
            loss = ad.reduce_sum(t1.watch(np.ones(2)))
        with Tape() as t2:
            pass
        with pytest.raises(ValueError):
            backward(t2, loss)

    def test_tape_is_topologically_ordered(self, rng):
        with Tape() as tape:
            x = tape.watch(rng.standard_normal((2, 2)))
            ad.reduce_sum(ad.tanh(ad.matmul(x, x)))
        for idx, node in enumerate(tape.nodes):
            assert all(i is None or i < idx for i in node.inputs)

    def test_unused_leaf_gets_zero_gradient(self):
        with Tape() as tape:
            x, y = tape.watch(np.ones(2)), tape.watch(np.ones(3))
            loss = ad.reduce_sum(x)
        gx, gy = tape.gradient(loss, [x, y])
        np.testing.assert_array_equal(gy, np.zeros(3))

    def test_replay_is_bit_identical(self, rng):
        a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))

        def run():
            with Tape() as tape:
                ta, tb = tape.watch(a), tape.watch(b)
                loss = ad.reduce_sum(ad.softmax(ad.matmul(ta, tb)) * ad.matmul(ta, tb))
            return tape.gradient(loss, [ta, tb])

        for g1, g2 in zip(run(), run()):
            assert g1.tobytes() == g2.tobytes()


class TestCheckGradients:
    def test_quadratic_bowl(self, rng):
        err = check_gradients(lambda p: ad.reduce_sum(p["w"] * p["w"]), {"w": rng.standard_normal(7)})
        assert err < 1e-9

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            check_gradients(lambda p: ad.reduce_sum(p["w"]), {"w": np.ones(2)}, h=0.0)

    def test_detects_wrong_gradient(self, rng):
        # stop_gradient hides a dependency, so analytic and numeric disagree
        f = lambda p: ad.reduce_sum(p["w"] * ad.stop_gradient(p["w"]))
        assert check_gradients(f, {"w": rng.standard_normal(5) + 3.0}) > 0.1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_values(self):
        with pytest.raises(FloatingPointError):
            check_gradients(lambda p: ad.reduce_sum(ad.log(p["w"])), {"w": np.array([0.0, 1.0])})


def _op_cases(rng):
    """(name, scalar function of params, params) for every differentiable primitive."""
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((3, 4))  # fixed projection so gradients are not all equal
    x_away = x + np.sign(x) * 0.1  # keep relu away from its kink
    pos = np.abs(x) + 0.5
    b3 = rng.standard_normal((2, 3, 4))
    ids = rng.integers(0, 5, size=(2, 3))
    pick = rng.integers(0, 4, size=(3,))
    lin = lambda t: ad.reduce_sum(t * w)
    return [
        ("add", lambda p: lin(ad.add(p["a"], p["b"])), {"a": x, "b": w + 1}),
        ("sub", lambda p: lin(ad.sub(p["a"], p["b"])), {"a": x, "b": w + 1}),
        ("mul", lambda p: lin(ad.mul(p["a"], p["b"])), {"a": x, "b": w + 1}),
        ("exp", lambda p: lin(ad.exp(p["a"])), {"a": x}),
        ("log", lambda p: lin(ad.log(p["a"])), {"a": pos}),
        ("relu", lambda p: lin(ad.relu(p["a"])), {"a": x_away}),
        ("tanh", lambda p: lin(ad.tanh(p["a"])), {"a": x}),
        ("reshape", lambda p: ad.reduce_sum(ad.reshape(p["a"], (4, 3)) * w.reshape(4, 3)), {"a": x}),
        ("transpose", lambda p: ad.reduce_sum(ad.transpose(p["a"]) * w.T), {"a": x}),
        ("expand", lambda p: ad.reduce_sum(ad.expand(p["a"], (3, 4)) * w), {"a": x[:1]}),
        ("sum_axis", lambda p: ad.reduce_sum(ad.reduce_sum(p["a"], axis=0) * w[0]), {"a": x}),
        ("mean", lambda p: ad.reduce_sum(ad.mean(p["a"], axis=1) * w[:, 0]), {"a": x}),
        ("matmul", lambda p: ad.reduce_sum(ad.matmul(p["a"], p["b"]) * w[:, :3]), {"a": x, "b": w.T[:, :3] + 0.5}),
        ("batched_matmul", lambda p: ad.reduce_sum(ad.matmul(p["a"], ad.swap_last(p["a"]))), {"a": b3}),
        ("linear", lambda p: lin(ad.linear(p["x"], p["w"], p["b"])),
         {"x": x, "w": rng.standard_normal((4, 4)), "b": rng.standard_normal(4)}),
        ("softmax", lambda p: lin(ad.softmax(p["a"], axis=-1)), {"a": x}),
        ("softmax_axis0", lambda p: lin(ad.softmax(p["a"], axis=0)), {"a": x}),
        ("log_softmax", lambda p: lin(ad.log_softmax(p["a"], axis=-1)), {"a": x}),
        ("layer_norm", lambda p: lin(ad.layer_norm(p["x"], p["g"], p["b"], 1e-6)),
         {"x": x, "g": rng.standard_normal(4), "b": rng.standard_normal(4)}),
        ("embedding", lambda p: ad.reduce_sum(ad.embedding(p["t"], ids) * b3), {"t": rng.standard_normal((5, 4))}),
        ("gather_last", lambda p: ad.reduce_sum(ad.gather_last(p["a"], pick) * w[:, 0]), {"a": x}),
        ("dropout", lambda p: lin(ad.dropout(p["a"], 0.7, np.random.default_rng(5))), {"a": x}),
    ]


OP_NAMES = [name for name, _, _ in _op_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("op", OP_NAMES)
def test_primitive_gradients_on_50_random_inputs(op):
    worst = 0.0
    for seed in range(50):
        name, f, params = next(c for c in _op_cases(np.random.default_rng(seed)) if c[0] == op)
        worst = max(worst, check_gradients(f, params, h=1e-5))
    assert worst < 1e-6, f"{op}: {worst:.3e}"


class TestDropout:
    def test_keep_one_is_identity(self, rng):
        x = Tensor(rng.standard_normal(10))
        assert ad.dropout(x, 1.0, rng) is x

    def test_seeded_mask_is_reproducible(self):
        x = Tensor(np.ones(50))
        a = ad.dropout(x, 0.5, np.random.default_rng(3)).value
        b = ad.dropout(x, 0.5, np.random.default_rng(3)).value
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, 2.0}
