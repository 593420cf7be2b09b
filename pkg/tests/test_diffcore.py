import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ontoscene import diffcore as dc
from ontoscene.diffcore import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-12) * 2, x)


# -- elementwise -------------------------------------------------------------


def test_add_arithmetic():
    assert dc.add([1.0, 2.0], [3.0, 4.0]).data.tolist() == [4.0, 6.0]


def test_mul_by_one_is_bit_identical():
    x = np.random.default_rng(0).normal(size=17)
    assert np.array_equal(dc.mul(x, 1.0).data, x)


def test_clamp_example():
    assert dc.clamp([-0.1, 0.5, 1.2], 0.0, 1.0).data.tolist() == [0.0, 0.5, 1.0]


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
def test_scalar_broadcast_both_sides(kind):
    x = np.array([1.0, 2.0, 4.0])
    left = dc.elementwise(kind, x, 2.0).data
    right = dc.elementwise(kind, 2.0, x).data
    ref = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}[kind]
    assert np.array_equal(left, ref(x, 2.0))
    assert np.array_equal(right, ref(2.0, x))


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        dc.add(np.ones(3), np.ones(4))


def test_log_non_positive_raises():
    with pytest.raises(ValueError):
        dc.log([1.0, 0.0])


def test_div_by_zero_raises():
    with pytest.raises(ZeroDivisionError):
        dc.div([1.0, 2.0], [1.0, 0.0])


def test_unknown_elementwise_kind():
    with pytest.raises(ValueError):
        dc.elementwise("tan", [1.0])


def test_pow_log_exp_values():
    x = np.array([0.5, 2.0, 3.0])
    assert np.allclose(dc.elementwise("pow_const", x, p=3.0).data, x**3, rtol=0, atol=1e-15)
    assert np.allclose(dc.log(x).data, np.log(x))
    assert np.allclose(dc.exp(x).data, np.exp(x))
    assert dc.max_const([-1.0, 2.0], 0.5).data.tolist() == [0.5, 2.0]


def test_nonfinite_detected():
    t = Tensor([1.0, np.inf])
    with pytest.raises(dc.NonFiniteError):
        t.check_finite()


# -- matmul --------------------------------------------------------------------


def test_matmul_identity():
    m = np.random.default_rng(1).normal(size=(3, 3))
    assert np.array_equal(dc.matmul(np.eye(3), m).data, m)


def test_matmul_small_example():
    assert dc.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]]).data.tolist() == [[3.0], [7.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
    ref = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(dc.matmul(a, b).data - ref)) < 1e-12


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradients_are_g_bt_and_at_g():
    rng = np.random.default_rng(3)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    dc.sum_all(dc.mul(dc.matmul(a, b), w)).backward()
    assert np.allclose(a.grad, w @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ w)


# -- softmax -------------------------------------------------------------------


def test_softmax_uniform_row():
    assert np.allclose(dc.softmax_rows([[0.0, 0.0, 0.0]]).data, 1 / 3, atol=1e-15)


def test_softmax_no_overflow():
    out = dc.softmax_rows([[1000.0, 1000.0, 0.0]]).data[0]
    assert np.allclose(out[:2], 0.5) and out[2] < 1e-300 + 1e-12


def test_softmax_decreasing_row():
    x = np.array([-1.0, -2.0, -3.0, -4.0])
    ref = np.exp(x) / np.exp(x).sum()
    out = dc.softmax_rows(x[None]).data[0]
    assert np.allclose(out, ref, atol=1e-12)
    assert np.allclose(out, [0.6439, 0.2369, 0.0871, 0.0321], atol=1e-4)


def test_softmax_rejects_nonfinite():
    with pytest.raises(dc.NonFiniteError):
        dc.softmax_rows([[np.nan, 0.0]])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    out = dc.softmax_rows(x).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-9, rtol=0)


# -- relu / dropout ------------------------------------------------------------


@pytest.mark.parametrize("p", [0.0, 0.25, 0.9])
def test_dropout_eval_is_plain_relu(p):
    x = np.random.default_rng(4).normal(size=(5, 7))
    assert np.array_equal(dc.relu_dropout(x, p, training=False, rng_seed=3).data, np.maximum(x, 0))


def test_dropout_negative_input_gives_zeros():
    x = -np.abs(np.random.default_rng(5).normal(size=100)) - 0.1
    assert np.all(dc.relu_dropout(x, 0.3, training=True, rng_seed=1).data == 0)


def test_dropout_preserves_mean_in_expectation():
    out = dc.relu_dropout(np.ones(100_000), 0.5, training=True, rng_seed=7).data
    assert 0.99 <= out.mean() <= 1.01
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_seeded_and_seed_sensitive():
    x = np.ones(1000)
    a = dc.relu_dropout(x, 0.5, True, (1, 2)).data
    b = dc.relu_dropout(x, 0.5, True, (1, 2)).data
    c = dc.relu_dropout(x, 0.5, True, (1, 3)).data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_probability_range(p):
    with pytest.raises(ValueError):
        dc.relu_dropout(np.ones(3), p, True, 0)


def test_relu_gradient_at_zero_is_zero():
    x = leaf([0.0, 1.0, -1.0])
    dc.sum_all(dc.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


# -- backward / tape -----------------------------------------------------------


def test_backward_sum_gives_ones():
    x = leaf(np.arange(5.0))
    dc.sum_all(x).backward()
    assert np.array_equal(x.grad, np.ones(5))


def test_backward_square():
    x = leaf([1.0, 2.0])
    dc.sum_all(dc.mul(x, x)).backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_accumulates_without_reset():
    x = leaf([1.0, 2.0])
    dc.sum_all(dc.mul(x, 3.0)).backward()
    dc.sum_all(dc.mul(x, 3.0)).backward()
    assert x.grad.tolist() == [6.0, 6.0]
    x.zero_grad()
    assert x.grad is None


def test_backward_needs_scalar_root():
    with pytest.raises(ValueError):
        dc.mul(leaf([1.0, 2.0]), 2.0).backward()


def test_tape_is_topological():
    x = leaf([1.0, 2.0])
    y = dc.mul(x, x)
    z = dc.sum_all(dc.add(y, dc.exp(y)))
    tape = dc.Tape(z)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_tape_replay_matches_fresh_forward():
    rng = np.random.default_rng(6)
    w = leaf(rng.normal(size=(3, 2)))
    x = rng.normal(size=(4, 3))

    def build():
        return dc.sum_all(dc.exp(dc.mul(dc.matmul(x, w), 0.1)))

    tape = dc.Tape(build())
    w.data = w.data + 0.5
    assert tape.replay().item() == build().item()


# -- gradient checks -----------------------------------------------------------


def _composite(rng):
    a = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
    b = leaf(rng.normal(size=(4, 2)))
    v = leaf(rng.normal(size=2))

    def f():
        h = dc.add_rowvec(dc.matmul(dc.log(a), b), v)
        s = dc.softmax_rows(dc.leaky_relu(h, 0.2))
        return dc.mean_all(dc.pow_const(dc.add(s, 0.5), 1.5))

    return f, [a, b, v]


@pytest.mark.parametrize("seed", range(20))
def test_composite_gradcheck(seed):
    f, leaves = _composite(np.random.default_rng(seed))
    assert dc.gradcheck(f, leaves) < 1e-4


def _op_cases(rng):
    """(name, scalar function, leaves) for every differentiable primitive."""
    x = leaf(away_from_zero(rng, (3, 4)))
    y = leaf(away_from_zero(rng, (3, 4)))
    pos = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
    v = leaf(rng.normal(size=4))
    w = rng.normal(size=(3, 4))
    wsum = lambda t: dc.sum_all(dc.mul(t, w))  # noqa: E731
    idx = np.array([2, 0, 0, 1, 2])
    seg = dc.Segments(np.array([0, 0, 1, 2, 2]), 3)
    g5 = rng.normal(size=(5, 4))
    return [
        ("add", lambda: wsum(dc.add(x, y)), [x, y]),
        ("sub", lambda: wsum(dc.sub(x, y)), [x, y]),
        ("mul", lambda: wsum(dc.mul(x, y)), [x, y]),
        ("div", lambda: wsum(dc.div(x, pos)), [x, pos]),
        ("neg", lambda: wsum(dc.neg(x)), [x]),
        ("pow", lambda: wsum(dc.pow_const(pos, 2.5)), [pos]),
        ("log", lambda: wsum(dc.log(pos)), [pos]),
        ("exp", lambda: wsum(dc.exp(x)), [x]),
        ("clamp", lambda: wsum(dc.clamp(x, -0.5, 0.5)), [x]),
        ("max_const", lambda: wsum(dc.max_const(x, 0.1)), [x]),
        ("where", lambda: wsum(dc.where(w > 0, x, y)), [x, y]),
        ("relu", lambda: wsum(dc.relu(x)), [x]),
        ("leaky", lambda: wsum(dc.leaky_relu(x, 0.2)), [x]),
        ("dropout", lambda: wsum(dc.relu_dropout(x, 0.3, True, 5)), [x]),
        ("softmax", lambda: wsum(dc.softmax_rows(x)), [x]),
        ("add_rowvec", lambda: wsum(dc.add_rowvec(x, v)), [x, v]),
        ("transpose", lambda: dc.sum_all(dc.mul(dc.transpose(x), w.T)), [x]),
        ("reshape", lambda: dc.sum_all(dc.mul(dc.reshape(x, (4, 3)), w.reshape(4, 3))), [x]),
        ("sum_rows", lambda: dc.sum_all(dc.mul(dc.sum_rows(x), w[:, 0])), [x]),
        ("mean_all", lambda: dc.mean_all(dc.mul(x, y)), [x, y]),
        ("concat", lambda: dc.sum_all(dc.mul(dc.concat([x, y]), np.vstack([w, w]))), [x, y]),
        ("gather", lambda: dc.sum_all(dc.mul(dc.gather_rows(x, idx), g5)), [x]),
        ("scatter", lambda: wsum(dc.scatter_add_rows(dc.gather_rows(x, idx), idx, 3)), [x]),
        ("segment_softmax", lambda: dc.sum_all(dc.mul(dc.segment_softmax(dc.gather_rows(x, idx), seg), g5)), [x]),
        ("repeat_cols", lambda: dc.sum_all(dc.mul(dc.repeat_cols(x, 2), np.repeat(w, 2, axis=1))), [x]),
        ("stack", lambda: dc.sum_all(dc.mul(dc.stack_scalars([dc.sum_all(x), dc.mean_all(y)]), [0.3, -2.0])), [x, y]),
    ]


@pytest.mark.parametrize("seed", range(20))
def test_every_op_gradcheck(seed):
    for name, f, leaves in _op_cases(np.random.default_rng(100 + seed)):
        err = dc.gradcheck(f, leaves)
        assert err < 1e-4, f"{name}: relative error {err}"


def test_forward_deterministic():
    f1, l1 = _composite(np.random.default_rng(9))
    f2, l2 = _composite(np.random.default_rng(9))
    assert f1().item() == f2().item()


# -- segments ------------------------------------------------------------------


def test_scatter_gather_match_numpy():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(4, 3))
    idx = np.array([3, 1, 1, 0, 3, 3])
    assert np.array_equal(dc.gather_rows(x, idx).data, x[idx])
    src = rng.normal(size=(6, 3))
    ref = np.zeros((4, 3))
    np.add.at(ref, idx, src)
    assert np.allclose(dc.scatter_add_rows(src, idx, 4).data, ref, atol=1e-14)


def test_segment_softmax_sums_to_one_per_bucket():
    seg = dc.Segments(np.array([0, 0, 0, 1, 2, 2]), 3)
    out = dc.segment_softmax(np.random.default_rng(11).normal(size=(6, 2)), seg).data
    for b in range(3):
        assert np.allclose(out[seg.index == b].sum(axis=0), 1.0, atol=1e-12)


def test_segment_softmax_rejects_unsorted_or_empty():
    with pytest.raises(ValueError):
        dc.segment_softmax(np.zeros((3, 1)), dc.Segments(np.array([1, 0, 1]), 2))
    with pytest.raises(ValueError):
        dc.segment_softmax(np.zeros((2, 1)), dc.Segments(np.array([0, 2]), 3))


# -- adam ----------------------------------------------------------------------


def test_adam_zero_gradient_is_fixed_point():
    w = leaf([1.0, -2.0])
    state = dc.AdamState(learning_rate=0.1)
    dc.adam_step([w], [np.zeros(2)], state)
    assert w.data.tolist() == [1.0, -2.0] and state.step == 1


def test_adam_descends_on_square():
    w = leaf([1.0])
    opt = dc.Adam([w], lr=0.001)
    dc.sum_all(dc.mul(w, w)).backward()
    opt.step()
    assert w.data[0] < 1.0


def test_adam_converges_on_quadratic():
    w = leaf([0.0])
    opt = dc.Adam([w], lr=0.01)
    for _ in range(2000):
        opt.zero_grad()
        d = dc.sub(w, 3.0)
        dc.sum_all(dc.mul(d, d)).backward()
        opt.step()
    assert abs(w.data[0] - 3.0) < 1e-2


def test_adam_first_step_matches_closed_form():
    # with bias correction the first step is lr * sign(g)
    w = leaf([2.0, -1.0])
    state = dc.AdamState(learning_rate=0.01, weight_decay=0.5)
    g = np.array([0.3, 0.2])
    dc.adam_step([w], [g], state)
    eff = g + 0.5 * np.array([2.0, -1.0])
    assert np.allclose(w.data, np.array([2.0, -1.0]) - 0.01 * eff / (np.abs(eff) + 1e-8))


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        dc.adam_step([leaf([1.0, 2.0])], [np.zeros(3)], dc.AdamState())


def test_adam_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        dc.AdamState(learning_rate=-1.0)
    with pytest.raises(ValueError):
        dc.AdamState(beta1=1.0)


# -- rng -----------------------------------------------------------------------


def test_make_rng_keys():
    a = dc.make_rng(1, 2).random(4)
    assert np.array_equal(a, dc.make_rng(1, 2).random(4))
    assert not np.array_equal(a, dc.make_rng(2, 1).random(4))
