import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gradcheck
from vared import ops
from vared.errors import ShapeError
from vared.gate import PolicyVector, SoftGate, active_branch_set, largest_active_index
from vared.models import get_spec, model_flops
from vared import cost
from vared.tensor import Tape, Tensor, precision


def zero_gate(beta, s_t=2, s_c=2):
    g = SoftGate(2, 3, s_t, s_c, hidden=4)
    g.w1.data[:] = 0
    g.w2.data[:] = 0
    g.beta.data[:] = beta
    return g


def test_zero_gate_zero_bias_gives_zero_policies():
    v_t, v_c = zero_gate(0.0).forward(Tensor(np.ones((1, 2, 3, 4, 4))), "eval")
    assert np.all(v_t.data == 0) and np.all(v_c.data == 0)


def test_large_bias_saturates_below_one():
    v_t, v_c = zero_gate([10.0, -10.0, 10.0, -10.0]).forward(Tensor(np.ones((1, 2, 3, 4, 4))), "eval")
    for v in (v_t.data[0], v_c.data[0]):
        assert v[0] == pytest.approx(0.99999, abs=1e-5) and v[0] < 1
        assert v[1] == 0


def test_random_gate_ranges_and_split():
    rng = np.random.default_rng(0)
    g = SoftGate(3, 4, 2, 2, rng=rng, w2_std=1.0)
    v_t, v_c = g.forward(Tensor(rng.normal(size=(5, 3, 4, 6, 6))), "train")
    assert v_t.shape == (5, 2) and v_c.shape == (5, 2)
    both = np.concatenate([v_t.data, v_c.data], axis=1)
    assert np.all(both >= 0) and np.all(both < 1)


def test_split_sizes_follow_search_space():
    g = SoftGate(2, 2, s_t=3, s_c=1)
    v_t, v_c = g.forward(Tensor(np.ones((2, 2, 2, 3, 3))), "train")
    assert v_t.shape == (2, 3) and v_c.shape == (2, 1)


def test_width_mismatch_is_structured_error():
    with pytest.raises(ShapeError, match="C_in\\*T"):
        SoftGate(2, 3).forward(Tensor(np.ones((1, 2, 4, 3, 3))), "eval")


def test_invalid_search_space_rejected():
    with pytest.raises(ValueError):
        SoftGate(2, 2, s_t=0)


def test_initial_bias_layout():
    g = SoftGate(2, 2, s_t=2, s_c=3)
    np.testing.assert_array_equal(g.beta.data, [1, 0, 1, 0, 0])


@pytest.mark.parametrize("seed", range(20))
def test_gate_gradcheck(seed):
    rng = np.random.default_rng(seed)
    with precision("float64"):
        g = SoftGate(2, 3, 2, 2, hidden=5, rng=rng, w2_std=0.5)
        x = Tensor(rng.normal(size=(4, 2, 3, 3, 3)))
        weights = Tensor(rng.normal(size=4))

        def loss():
            v_t, v_c = g.forward(x, "train")
            return (ops.concat([v_t, v_c], axis=1) * weights).sum()

        err = gradcheck(loss, [g.w1, g.w2, g.beta, g.bn_gamma, g.bn_beta])
    assert err < 1e-4


@pytest.mark.parametrize("v,expected", [([0.7, 0.0], 1), ([0.0, 0.3], 2), ([0.0, 0.0], 1)])
def test_largest_active_index_examples(v, expected):
    assert largest_active_index(v) == expected


def test_largest_active_respects_eps():
    assert largest_active_index([0.05, 0.4], eps=0.1) == 2


def test_active_branch_set_examples():
    assert active_branch_set([0.5, 0.2]) == [(1, 0.5), (2, 0.2)]
    assert active_branch_set([0.0, 0.9]) == [(2, pytest.approx(0.9))]
    assert active_branch_set([0.0, 0.0]) == [(1, 1.0)]


@given(st.lists(st.floats(0, 0.999), min_size=1, max_size=4), st.floats(0, 0.5))
def test_largest_active_is_min_of_active_set(v, eps):
    active = active_branch_set(v, eps)
    if any(x > eps for x in v):
        assert largest_active_index(v, eps) == min(i for i, _ in active)
    else:
        assert largest_active_index(v, eps) == 1 and active == [(1, 1.0)]


def test_policy_vector_factors():
    assert PolicyVector(np.zeros(3), "temporal").factor(3) == 4
    assert PolicyVector(np.zeros(3), "channel").factor(3) == 0.25


@pytest.mark.parametrize("arch", ["toy3d", "r2plus1d_tiny", "r2plus1d18"])
def test_gate_cost_below_one_percent_of_layer(arch):
    spec = get_spec(arch)
    for ls in spec.shapes():
        if ls.spec.dynamic:
            g = cost.gate_flops(ls.in_shape[0], ls.in_shape[1], spec.gate_hidden, ls.s_t, ls.s_c)
            assert g / cost.conv_flops(ls.cost_spec) < 0.01, ls.spec.name
