import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ontoscene import diffcore as dc
from ontoscene import fuzzy
from ontoscene.diffcore import Tensor

EPS = fuzzy.EPS
truths = hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(0.0, 1.0))


def val(t):
    return t.data if t.data.ndim else float(t.data)


def test_not_examples():
    assert val(fuzzy.not_std([0.0]))[0] == pytest.approx(1.0, abs=2 * EPS)
    assert val(fuzzy.not_std([0.3]))[0] == pytest.approx(0.7, abs=1e-15)
    a = np.random.default_rng(0).random(50)
    assert np.allclose(val(fuzzy.not_std(fuzzy.not_std(a))), a, atol=2 * EPS)


def test_and_or_examples():
    assert val(fuzzy.and_prod([0.5], [0.5]))[0] == pytest.approx(0.25, abs=1e-15)
    a = np.random.default_rng(1).random(20)
    assert np.allclose(val(fuzzy.or_probsum(a, np.zeros(20))), a, atol=2 * EPS)


def test_de_morgan():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(0.01, 0.99, 100), rng.uniform(0.01, 0.99, 100)
    lhs = val(fuzzy.not_std(fuzzy.or_probsum(a, b)))
    rhs = val(fuzzy.and_prod(fuzzy.not_std(a), fuzzy.not_std(b)))
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_lukasiewicz():
    assert val(fuzzy.lukasiewicz([0.7], [0.6], "and"))[0] == pytest.approx(0.3, abs=1e-12)
    a = np.random.default_rng(3).uniform(0.01, 0.99, 10)
    assert np.allclose(val(fuzzy.lukasiewicz(a, np.ones(10), "and")), a, atol=2 * EPS)
    assert val(fuzzy.lukasiewicz([0.7], [0.6], "or"))[0] == 1.0
    with pytest.raises(ValueError):
        fuzzy.lukasiewicz([0.1], [0.2], "xor")


def test_goguen_examples():
    assert val(fuzzy.implies_goguen([0.0], [0.3]))[0] == 1.0
    assert val(fuzzy.implies_goguen([0.8], [0.4]))[0] == pytest.approx(0.5, abs=1e-15)
    a = np.random.default_rng(4).random(30)
    assert np.all(val(fuzzy.implies_goguen(a, a)) == 1.0)


def test_goguen_tie_takes_constant_branch():
    a = Tensor([0.5], requires_grad=True)
    b = Tensor([0.5], requires_grad=True)
    dc.sum_all(fuzzy.implies_goguen(a, b)).backward()
    assert a.grad is None or a.grad[0] == 0.0
    assert b.grad is None or b.grad[0] == 0.0


def test_reichenbach():
    assert val(fuzzy.implies_reichenbach([0.8], [0.4]))[0] == pytest.approx(1 - 0.8 + 0.32)


def test_forall_examples():
    assert fuzzy.forall_pme(np.ones(5), 2).item() == pytest.approx(1.0, abs=1e-6)
    assert fuzzy.forall_pme([1.0, 0.0], 2).item() == pytest.approx(1 - math.sqrt(0.5), abs=1e-6)
    a = np.random.default_rng(5).uniform(0.01, 0.99, 40)
    assert fuzzy.forall_pme(a, 1).item() == pytest.approx(a.mean(), abs=1e-12)


def test_forall_errors():
    with pytest.raises(ValueError):
        fuzzy.forall_pme([], 2)
    with pytest.raises(ValueError):
        fuzzy.forall_pme([0.5], 0.5)


def test_sat_agg_examples():
    assert fuzzy.sat_agg([Tensor(0.42)], 2).item() == pytest.approx(0.42, abs=1e-12)
    assert fuzzy.sat_agg([Tensor(1.0), Tensor(1.0)], 2).item() == pytest.approx(1.0, abs=1e-6)
    expected = 1 - math.sqrt((0.01 + 0.25) / 2)
    assert fuzzy.sat_agg([Tensor(0.9), Tensor(0.5)], 2).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.6394, abs=1e-4)
    with pytest.raises(ValueError):
        fuzzy.sat_agg([], 2)


def test_truth_validation():
    with pytest.raises(ValueError):
        fuzzy.as_truth([0.5, 1.5])
    with pytest.raises(ValueError):
        fuzzy.as_truth([np.nan])
    out = fuzzy.as_truth([0.0, 1.0]).data
    assert out.tolist() == [EPS, 1 - EPS]


def test_shape_mismatch():
    for op in (fuzzy.and_prod, fuzzy.or_probsum, fuzzy.implies_goguen):
        with pytest.raises(ValueError):
            op(np.ones(2) * 0.5, np.ones(3) * 0.5)


def test_aggregator_config_validation():
    assert fuzzy.AggregatorConfig() == fuzzy.AggregatorConfig(2.0, 4.0, 2.0)
    with pytest.raises(ValueError):
        fuzzy.AggregatorConfig(p_forall_incl=0.5)


# -- properties ----------------------------------------------------------------


def test_range_closure_on_random_tensors():
    rng = np.random.default_rng(6)
    a, b = rng.random(10_000), rng.random(10_000)
    outs = [
        fuzzy.not_std(a),
        fuzzy.and_prod(a, b),
        fuzzy.or_probsum(a, b),
        fuzzy.lukasiewicz(a, b, "and"),
        fuzzy.lukasiewicz(a, b, "or"),
        fuzzy.implies_goguen(a, b),
        fuzzy.implies_reichenbach(a, b),
        fuzzy.forall_pme(a, 2),
        fuzzy.forall_pme(a, 4),
    ]
    for t in outs:
        assert np.all(t.data >= 0.0) and np.all(t.data <= 1.0)


@settings(max_examples=100, deadline=None)
@given(truths, st.data())
def test_monotonicity(a, data):
    b = data.draw(hnp.arrays(np.float64, a.shape, elements=st.floats(0.0, 1.0)))
    i = data.draw(st.integers(0, a.size - 1))
    delta = 1e-3
    up_a = a.copy()
    up_a[i] = min(1.0, a[i] + delta)
    up_b = b.copy()
    up_b[i] = min(1.0, b[i] + delta)
    tol = 1e-12
    for op in (fuzzy.and_prod, fuzzy.or_probsum):
        assert np.all(op(up_a, b).data >= op(a, b).data - tol)
        assert np.all(op(a, up_b).data >= op(a, b).data - tol)
    assert np.all(fuzzy.implies_goguen(up_a, b).data <= fuzzy.implies_goguen(a, b).data + tol)
    assert np.all(fuzzy.implies_goguen(a, up_b).data >= fuzzy.implies_goguen(a, b).data - tol)
    for p in (1.0, 2.0, 4.0):
        assert fuzzy.forall_pme(up_a, p).item() >= fuzzy.forall_pme(a, p).item() - tol


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.0, 1.0))
def test_goguen_gradient_flows_to_consequent(a, frac):
    b = frac * (a - 1e-3)
    bt = Tensor([b], requires_grad=True)
    dc.sum_all(fuzzy.implies_goguen([a], bt)).backward()
    if b > EPS:
        assert bt.grad[0] > 0


def test_large_p_approaches_min():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a = rng.uniform(0.0, 1.0, 25)
        assert abs(fuzzy.forall_pme(a, 64).item() - a.min()) < 0.05


@pytest.mark.parametrize("seed", range(20))
def test_connective_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.uniform(0.05, 0.95, 6), requires_grad=True)
    b = Tensor(rng.uniform(0.05, 0.95, 6), requires_grad=True)
    # keep Goguen and Lukasiewicz inputs off their kinks
    b.data = np.where(np.abs(a.data - b.data) < 1e-2, np.clip(b.data + 0.05, 0, 0.99), b.data)
    b.data = np.where(np.abs(a.data + b.data - 1.0) < 1e-2, b.data * 0.9, b.data)
    w = rng.normal(size=6)
    funcs = {
        "not": lambda: dc.sum_all(dc.mul(fuzzy.not_std(a), w)),
        "and": lambda: dc.sum_all(dc.mul(fuzzy.and_prod(a, b), w)),
        "or": lambda: dc.sum_all(dc.mul(fuzzy.or_probsum(a, b), w)),
        "luk_and": lambda: dc.sum_all(dc.mul(fuzzy.lukasiewicz(a, b, "and"), w)),
        "luk_or": lambda: dc.sum_all(dc.mul(fuzzy.lukasiewicz(a, b, "or"), w)),
        "goguen": lambda: dc.sum_all(dc.mul(fuzzy.implies_goguen(a, b), w)),
        "reichenbach": lambda: dc.sum_all(dc.mul(fuzzy.implies_reichenbach(a, b), w)),
        "forall2": lambda: fuzzy.forall_pme(a, 2),
        "forall4": lambda: fuzzy.forall_pme(a, 4),
        "sat_agg": lambda: fuzzy.sat_agg([fuzzy.forall_pme(a, 2), fuzzy.forall_pme(b, 4)], 2),
    }
    for name, f in funcs.items():
        err = dc.gradcheck(f, [a, b])
        assert err < 1e-4, f"{name}: {err}"
