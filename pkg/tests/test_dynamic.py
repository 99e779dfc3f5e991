import numpy as np
import pytest

from oracles import gradcheck, naive_conv3d, naive_depthwise2d_frame
from vared import cost, ops
from vared.dynamic import CheapOp, DynamicConv3d, DynamicConvConfig, channel_reconstruct, temporal_reconstruct
from vared.errors import ShapeError, SpecError
from vared.tensor import Tensor, precision


def normalized(v: np.ndarray) -> np.ndarray:
    """Reference policy normalization: divide by the row sum, one-hot on branch 1 when it is zero."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros_like(v)
    for k, row in enumerate(v):
        s = row.sum()
        if s > 0:
            out[k] = row / s
        else:
            out[k, 0] = 1.0
    return out


def make_layer(rng, c_in=3, c_out=8, dims=(8, 6, 6), kernel=(3, 3, 3), stride=(1, 1, 1), padding=(1, 1, 1),
               s_t=2, s_c=2, cheap="depthwise", randomize_cheap=True, bias=False):
    cfg = DynamicConvConfig(c_in, c_out, kernel, stride, padding, s_t, s_c, cheap, cheap, bias=bias)
    layer = DynamicConv3d(cfg, dims, rng, name="L")
    if randomize_cheap:
        for op in (layer.cheap_c, layer.cheap_t):
            if op.weight is not None:
                op.weight.data[:] = rng.normal(0, 0.5, op.weight.shape)
    if bias:
        layer.bias.data[:] = rng.normal(size=c_out)
    return layer


# --------------------------------------------------------- reconstruction

def test_temporal_identity_duplicates_frames():
    a, b = np.full((1, 1, 1, 2, 2), 1.0), np.full((1, 1, 1, 2, 2), 2.0)
    y = temporal_reconstruct(Tensor(np.concatenate([a, b], axis=2)), 2, CheapOp("identity", 1))
    np.testing.assert_array_equal(y.data[0, 0, :, 0, 0], [1, 1, 2, 2])


def test_temporal_r1_is_unchanged():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 3, 2, 2)))
    assert temporal_reconstruct(x, 1, CheapOp("depthwise", 2)) is x


def test_temporal_depthwise_matches_oracle():
    rng = np.random.default_rng(1)
    cheap = CheapOp("depthwise", 3)
    cheap.weight.data[:] = rng.normal(size=cheap.weight.shape)
    y_prime = rng.normal(size=(1, 3, 2, 5, 5)).astype(np.float32)
    y = temporal_reconstruct(Tensor(y_prime), 2, cheap)
    np.testing.assert_array_equal(y.data[0, :, 0], y_prime[0, :, 0])
    ref = naive_depthwise2d_frame(y_prime[0, :, 0], cheap.weight.data)
    np.testing.assert_allclose(y.data[0, :, 1], ref, atol=1e-5)
    np.testing.assert_allclose(y.data[0, :, 3], naive_depthwise2d_frame(y_prime[0, :, 1], cheap.weight.data),
                               atol=1e-5)


def test_channel_examples():
    x = Tensor(np.arange(2, dtype=np.float32).reshape(1, 2, 1, 1, 1))
    assert channel_reconstruct(x, 2, CheapOp("identity", 2)) is x
    y = channel_reconstruct(x, 4, CheapOp("identity", 4))
    np.testing.assert_array_equal(y.data.reshape(-1), [0, 1, 0, 1])


def test_channel_depthwise_matches_oracle():
    rng = np.random.default_rng(2)
    cheap = CheapOp("depthwise", 6)
    cheap.weight.data[:] = rng.normal(size=cheap.weight.shape)
    y_prime = rng.normal(size=(1, 3, 2, 4, 4)).astype(np.float32)
    y = channel_reconstruct(Tensor(y_prime), 6, cheap)
    np.testing.assert_array_equal(y.data[:, :3], y_prime)
    for t in range(2):
        ref = naive_depthwise2d_frame(y_prime[0, [0, 1, 2], t], cheap.weight.data[3:6])
        np.testing.assert_allclose(y.data[0, 3:, t], ref, atol=1e-5)


def test_channel_round_robin_with_odd_counts():
    x = Tensor(np.arange(3, dtype=np.float32).reshape(1, 3, 1, 1, 1))
    y = channel_reconstruct(x, 7, CheapOp("identity", 7))
    np.testing.assert_array_equal(y.data.reshape(-1), [0, 1, 2, 0, 1, 2, 0])


def test_temporal_cheap_op_too_small():
    with pytest.raises(ShapeError):
        temporal_reconstruct(Tensor(np.ones((1, 4, 2, 2, 2))), 2, CheapOp("depthwise", 2))


def test_non_divisible_length_names_layer():
    cfg = DynamicConvConfig(2, 4, (3, 3, 3), (1, 1, 1), (1, 1, 1), s_t=2)
    with pytest.raises(SpecError, match="blockX"):
        DynamicConv3d(cfg, (5, 4, 4), name="blockX")


# --------------------------------------------------------- branch forward

def test_branch_11_equals_plain_conv():
    rng = np.random.default_rng(0)
    layer = make_layer(rng)
    x = Tensor(rng.normal(size=(2, 3, 8, 6, 6)))
    assert np.array_equal(layer.branch_forward(x, 1, 1).data, layer.plain_forward(x).data)
    np.testing.assert_allclose(layer.plain_forward(x).data,
                               naive_conv3d(x.data, layer.weight.data, padding=(1, 1, 1)), atol=1e-4)


def test_branch_channel_half_slices_prefix():
    rng = np.random.default_rng(1)
    layer = make_layer(rng)
    x = Tensor(rng.normal(size=(1, 3, 8, 6, 6)))
    full = layer.plain_forward(x).data
    # a separate, narrower matmul may round differently in float32
    np.testing.assert_allclose(layer.branch_forward(x, 2, 1).data[:, :4], full[:, :4], atol=1e-5)
    # the shared-weight path slices the full result, so its prefix is exact
    shared = layer.shared_weight_forward(x, np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), "train").data
    assert np.array_equal(shared[:, :4], full[:, :4])


def test_branch_temporal_half_computes_strided_frames():
    rng = np.random.default_rng(2)
    layer = make_layer(rng)
    x = Tensor(rng.normal(size=(1, 3, 8, 6, 6)))
    full = layer.plain_forward(x).data
    y = layer.branch_forward(x, 1, 2).data
    np.testing.assert_allclose(y[:, :, ::2], full[:, :, ::2], atol=1e-5)


def test_branch_outside_search_space():
    layer = make_layer(np.random.default_rng(0))
    with pytest.raises(ShapeError):
        layer.branch_forward(Tensor(np.zeros((1, 3, 8, 6, 6))), 3, 1)


def test_branch_22_cost_matches_formula():
    layer = make_layer(np.random.default_rng(0))
    full = cost.conv_flops(layer.cost_spec)
    realized = layer.realized_flops(2, 2, [2], [2])
    cheap = cost.cheap_op_flops(layer.cost_spec, [2], [2])
    assert realized == full // 4 + cheap


# ------------------------------------------------------ shared-weight path

def test_one_hot_full_policy_equals_plain_conv():
    rng = np.random.default_rng(3)
    layer = make_layer(rng)
    x = Tensor(rng.normal(size=(2, 3, 8, 6, 6)).astype(np.float32))
    v = np.array([[1.0, 0.0], [1.0, 0.0]], dtype=np.float32)
    for mode in ("train", "eval"):
        assert np.array_equal(layer.shared_weight_forward(x, v, v, mode).data, layer.plain_forward(x).data)


def _random_case(rng, k):
    """One randomized (layer, x, V_t, V_c) case; shapes stay within [2, 8, 8, 12, 12]."""
    s_t, s_c = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    c_out = int(rng.choice([4, 8]))  # divisible by 2^(S_c - 1) for S_c <= 3
    c_in = int(rng.integers(1, 5))
    t = int(rng.choice([4, 8]))
    h = int(rng.integers(4, 13))
    w = int(rng.integers(4, 13))
    kind = ["depthwise", "pointwise", "identity"][k % 3]
    layer = make_layer(rng, c_in, c_out, (t, h, w), (3, 3, 3), (1, int(rng.integers(1, 3)), 1), (1, 1, 1),
                       s_t, s_c, kind, bias=bool(k % 2))
    n = int(rng.integers(1, 3))
    x = Tensor(rng.normal(size=(n, c_in, t, h, w)).astype(np.float32))
    style = k % 5
    if style == 0:  # one-hot
        v_t = np.eye(s_t)[rng.integers(0, s_t, n)]
        v_c = np.eye(s_c)[rng.integers(0, s_c, n)]
    elif style == 1:  # all-zero fallback
        v_t, v_c = np.zeros((n, s_t)), np.zeros((n, s_c))
    else:
        v_t = rng.uniform(0, 1, (n, s_t)) * (rng.random((n, s_t)) > 0.3)
        v_c = rng.uniform(0, 1, (n, s_c)) * (rng.random((n, s_c)) > 0.3)
    return layer, x, v_t.astype(np.float32), v_c.astype(np.float32)


def weighted_branch_sum(layer, x, v_t, v_c):
    wt, wc = normalized(v_t), normalized(v_c)
    out = np.zeros(layer.plain_forward(x).shape)
    for n in range(x.shape[0]):
        xn = Tensor(x.data[n:n + 1])
        for j in range(v_t.shape[1]):
            for i in range(v_c.shape[1]):
                if wt[n, j] and wc[n, i]:
                    out[n] += wt[n, j] * wc[n, i] * layer.branch_forward(xn, i + 1, j + 1).data[0]
    return out


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_shared_weight_equivalence_50_cases(mode):
    rng = np.random.default_rng(1234)
    worst = 0.0
    for k in range(50):
        layer, x, v_t, v_c = _random_case(rng, k)
        got = layer.shared_weight_forward(x, v_t, v_c, mode).data
        ref = weighted_branch_sum(layer, x, v_t, v_c)
        assert got.shape == layer.plain_forward(x).shape
        worst = max(worst, float(np.max(np.abs(got - ref))))
    assert worst < 1e-5, worst


def test_shared_weight_equivalence_float64():
    rng = np.random.default_rng(7)
    with precision("float64"):
        for k in range(10):
            layer, x, v_t, v_c = _random_case(rng, k)
            x = Tensor(x.data.astype(np.float64))
            got = layer.shared_weight_forward(x, v_t.astype(np.float64), v_c.astype(np.float64), "train").data
            assert np.max(np.abs(got - weighted_branch_sum(layer, x, v_t, v_c))) < 1e-10


def test_policy_length_mismatch():
    layer = make_layer(np.random.default_rng(0))
    x = Tensor(np.zeros((1, 3, 8, 6, 6), dtype=np.float32))
    with pytest.raises(ShapeError):
        layer.shared_weight_forward(x, np.ones((1, 3)), np.ones((1, 2)))


def test_eval_trace_cost_example():
    """V_c = [0, 0.6], V_t = [0, 0.4] -> a quarter of the layer plus cheap ops."""
    rng = np.random.default_rng(4)
    layer = make_layer(rng, c_in=4, c_out=8)
    x = Tensor(rng.normal(size=(1, 4, 8, 6, 6)).astype(np.float32))
    trace = []
    layer.shared_weight_forward(x, np.array([[0.0, 0.4]]), np.array([[0.0, 0.6]]), "eval", trace=trace)
    d = trace[0]
    assert (d.i_s_t, d.i_s_c) == (2, 2)
    full = cost.conv_flops(layer.cost_spec)
    assert d.flops == full // 4 + cost.cheap_op_flops(layer.cost_spec, [2], [2])


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_through_shared_weight(seed):
    rng = np.random.default_rng(seed)
    with precision("float64"):
        layer = make_layer(rng, c_in=2, c_out=4, dims=(4, 4, 4), s_t=2, s_c=2)
        x = Tensor(rng.normal(size=(2, 2, 4, 4, 4)))
        v_t = Tensor(rng.uniform(0.2, 1.0, (2, 2)), requires_grad=True)
        v_c = Tensor(rng.uniform(0.2, 1.0, (2, 2)), requires_grad=True)
        target = Tensor(rng.normal(size=(2, 4, 4, 4, 4)))

        def loss():
            return ((layer.shared_weight_forward(x, v_t, v_c, "train") - target) ** 2).mean()

        err = gradcheck(loss, [layer.weight, layer.cheap_c.weight, layer.cheap_t.weight, v_t, v_c])
    assert err < 1e-4


def test_every_active_branch_sends_gradient_to_kernel():
    rng = np.random.default_rng(0)
    layer = make_layer(rng, c_in=2, c_out=4, dims=(4, 4, 4))
    from vared.tensor import Tape

    x = Tensor(rng.normal(size=(1, 2, 4, 4, 4)).astype(np.float32))
    with Tape([layer.weight]) as tape:
        y = layer.shared_weight_forward(x, np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]]), "train")
        loss = (y * y).sum()
    g = tape.backward(loss)[layer.weight]
    # only the first half of the output filters feed branch (2, 2)
    assert np.abs(g[:2]).sum() > 0 and np.all(g[2:] == 0)


@pytest.mark.parametrize("seed", range(10))
def test_output_shape_preserved_every_branch(seed):
    rng = np.random.default_rng(seed)
    layer, x, _, _ = _random_case(rng, seed)
    shape = layer.plain_forward(x).shape
    for i in range(1, layer.cfg.s_c + 1):
        for j in range(1, layer.cfg.s_t + 1):
            assert layer.branch_forward(x, i, j).shape == shape
