import time

import numpy as np
import pytest

from oracles import gradcheck
from vared import cost, ops
from vared.checkpoint import load_checkpoint, save_checkpoint
from vared.errors import BadMagicError, ShapeError, SpecError, TruncatedFileError
from vared.models import (LayerSpec, ModelSpec, PolicyTrace, build_model, gate_flops_total, get_spec,
                          model_flops)
from vared.tensor import precision


def clips(n=3, seed=0, shape=(3, 8, 32, 32)):
    return np.random.default_rng(seed).uniform(0, 1, (n, *shape)).astype(np.float32)


def test_toy3d_builds_and_runs():
    m = build_model(get_spec("toy3d"), seed=0)
    assert [c.cfg.c_out for c in m.dynamic_layers] == [8, 16, 32, 64]
    logits, traces = m.forward(clips(2), "dynamic_eval")
    assert logits.shape == (2, 4) and len(traces) == 2
    assert all(len(t.layers) == 4 for t in traces)


def test_r2plus1d_tiny_only_spatial_dynamic():
    spec = get_spec("r2plus1d_tiny")
    for ls in spec.shapes():
        assert ls.spec.dynamic == (ls.spec.role == "spatial"), ls.spec.name
    m = build_model(spec, seed=0)
    logits, _ = m.forward(clips(1), "dynamic_eval")
    assert logits.shape == (1, 4)


def test_invalid_temporal_length_names_layer_3():
    layers = [LayerSpec(f"l{k}", 4, (1, 1, 1)) for k in range(3)]
    layers.append(LayerSpec("l3", 4, (1, 1, 1), stride=(2, 1, 1), dynamic=True))
    with pytest.raises(SpecError, match="layer 3"):
        ModelSpec("bad", (3, 6, 8, 8), 2, layers).validate()


def test_cost_only_spec_not_buildable():
    with pytest.raises(SpecError):
        build_model(get_spec("r2plus1d18"))


def test_unknown_arch_lists_known():
    with pytest.raises(SpecError, match="toy3d"):
        get_spec("resnet50")


def test_input_contract_checked():
    m = build_model(get_spec("toy3d"))
    with pytest.raises(ShapeError):
        m.forward(clips(1, shape=(3, 8, 16, 16)))


def test_fresh_model_eval_close_to_base():
    m = build_model(get_spec("toy3d"), seed=3)
    x = clips(4, seed=1)
    base, _ = m.forward(x, "base")
    dyn, _ = m.forward(x, "dynamic_eval")
    np.testing.assert_allclose(dyn.data, base.data, atol=1e-3)


def test_forced_full_equals_base_bitwise():
    for arch in ("toy3d", "r2plus1d_tiny"):
        m = build_model(get_spec(arch), seed=1)
        x = clips(2, seed=2)
        base, _ = m.forward(x, "base")
        full, traces = m.forward(x, "dynamic_eval", force="full")
        assert np.array_equal(base.data, full.data)
        for t in traces:
            assert t.flops == m.static_flops() + gate_flops_total(m.spec)


@pytest.mark.parametrize("arch", ["toy3d", "r2plus1d_tiny"])
def test_trace_flops_match_model_flops(arch):
    m = build_model(get_spec(arch), seed=0)
    rng = np.random.default_rng(0)
    for conv in m.dynamic_layers:
        conv.gate.w2.data[:] = rng.normal(0, 1.0, conv.gate.w2.shape)
    _, traces = m.forward(clips(4, seed=5), "dynamic_eval")
    for t in traces:
        assert t.flops == model_flops(m.spec, t)
        assert model_flops(m.spec, PolicyTrace.from_dict(t.to_dict())) == t.flops


def test_trace_length_mismatch_rejected():
    m = build_model(get_spec("toy3d"))
    _, traces = m.forward(clips(1), "dynamic_eval")
    traces[0].layers.pop()
    with pytest.raises(SpecError):
        model_flops(m.spec, traces[0])


@pytest.mark.parametrize("force", [(1, 1), (1, 2), (2, 1), (2, 2)])
def test_single_branch_cost_bounded_by_static_plus_gate(force):
    m = build_model(get_spec("toy3d"), seed=0)
    _, traces = m.forward(clips(2), "dynamic_eval", force=force)
    bound = m.static_flops() + gate_flops_total(m.spec)
    for t in traces:
        assert t.flops <= bound
        if force != (1, 1):
            assert t.flops < m.static_flops()


def test_forward_deterministic():
    x = clips(2)
    a = build_model(get_spec("toy3d"), seed=4).forward(x, "dynamic_eval")[0].data
    b = build_model(get_spec("toy3d"), seed=4).forward(x, "dynamic_eval")[0].data
    assert np.array_equal(a, b)


def _tiny_spec():
    # no ReLU: a finite-difference step straddling its kink would swamp the check
    return ModelSpec("tiny", (4, 4, 4, 4), 3,
                     [LayerSpec("dyn", 4, (3, 3, 3), padding=(1, 1, 1), dynamic=True, bn=False, relu=False)], gate_hidden=4)


@pytest.mark.parametrize("seed", range(20))
def test_gate_to_loss_chain_gradcheck(seed):
    rng = np.random.default_rng(seed)
    with precision("float64"):
        m = build_model(_tiny_spec(), seed=seed)
        conv = m.dynamic_layers[0]
        conv.gate.w2.data[:] = rng.normal(0, 0.5, conv.gate.w2.shape)
        x = rng.normal(size=(3, 4, 4, 4, 4))
        y = rng.integers(0, 3, size=3)

        def loss():
            logits, policies = m.forward(x, "dynamic_train")
            l_e = cost.efficiency_loss([1.0], [policies[0][0]], [policies[0][1]], [True, True, False])
            return cost.total_loss(ops.softmax_cross_entropy(logits, y), l_e, 0.8)

        params = m.named_parameters()
        err = gradcheck(loss, list(params.values()))
    assert err < 1e-4


def test_r2plus1d18_flops_near_published_and_linear():
    t0 = time.perf_counter()
    g = {f: model_flops(get_spec("r2plus1d18", frames=f, res=128)) / 1e9 for f in (8, 16, 32)}
    assert time.perf_counter() - t0 < 1.0
    for f, ref in ((8, 27.7), (16, 55.2), (32, 110.5)):
        assert abs(g[f] - ref) / ref < 0.10
    assert g[8] * 2 == g[16] and g[16] * 2 == g[32]


def test_r2plus1d18_rejects_other_lengths():
    with pytest.raises(SpecError):
        get_spec("r2plus1d18", frames=12)


def test_spec_json_round_trip():
    spec = get_spec("r2plus1d_tiny")
    again = ModelSpec.from_json(spec.to_json())
    assert again == spec


def test_state_dict_checkpoint_round_trip(tmp_path):
    m = build_model(get_spec("toy3d"), seed=7)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m.state_dict(), {"phase": "init"})
    arrays, meta = load_checkpoint(path)
    other = build_model(get_spec("toy3d"), seed=8)
    other.load_state_dict(arrays)
    x = clips(2)
    assert np.array_equal(m.forward(x, "dynamic_eval")[0].data, other.forward(x, "dynamic_eval")[0].data)
    assert meta == {"phase": "init"}
    assert path.read_bytes()[:4] == b"VRCK"


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + b"\0" * 20)
    with pytest.raises(BadMagicError):
        load_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, {"w": np.ones((4, 4))})
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(cut)


def test_load_state_dict_rejects_missing_and_mismatched():
    m = build_model(get_spec("toy3d"))
    state = m.state_dict()
    with pytest.raises(SpecError):
        m.load_state_dict({k: v for k, v in state.items() if k != "head.bias"})
    state = dict(state)
    state["head.bias"] = np.zeros(5)
    with pytest.raises(ShapeError):
        m.load_state_dict(state)
