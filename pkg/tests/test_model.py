import numpy as np
import pytest
from hypothesis import given, strategies as st

from photoxform.errors import ContractError
from photoxform.lightstage import LayoutConfig, encode_view
from photoxform.model import (FeatureNet, ModelConfig, forward_combined, forward_insensitive,
                              forward_sensitive, layout_config_from_manifest, load_checkpoint,
                              renormalize_patterns, save_checkpoint)


def make_net(dtype=np.float64, seed=0, **kw):
    return FeatureNet(ModelConfig(**kw), rng=np.random.default_rng(seed), dtype=dtype)


def batch(rng, n=6, inputs=384):
    return rng.uniform(0, 0.05, size=(n, inputs)), encode_view(rng.uniform(0, 2 * np.pi, n))


def test_parameter_shapes():
    shapes = ModelConfig().shapes()
    assert shapes["sens.pattern"] == (3, 384)
    assert shapes["insens.pattern"] == (5, 384)
    assert shapes["sens.fc0.W"] == (32, 5)  # measurements + view encoding
    assert shapes["insens.fc0.W"] == (32, 5)
    assert shapes["insens.fc5.W"] == (64, 66)  # view enters the insensitive branch late
    assert shapes["sens.fc8.W"] == (6, 32)
    assert shapes["insens.fc8.W"] == (10, 32)
    assert shapes["combine.W"] == (16, 16)
    assert "combine.b" in shapes


def test_pointlight_shapes():
    cfg = ModelConfig(mode="pointlight", inputs=96)
    shapes = cfg.shapes()
    assert not any(k.endswith("pattern") for k in shapes)
    assert shapes["sens.fc0.W"] == (32, 98)
    assert cfg.branch_features == (8, 8)


def test_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(mode="laser")
    with pytest.raises(ContractError):
        ModelConfig(branches="neither")
    with pytest.raises(ContractError):
        ModelConfig(hidden=(8, 8))


def test_config_dict_round_trip():
    cfg = ModelConfig(m_s=5, m_i=5, branches="sens")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_patterns_renormalized_at_init():
    net = make_net()
    for b in ("sens", "insens"):
        np.testing.assert_allclose(np.max(np.abs(net.patterns(b)), axis=1), 1.0)


def test_dead_pattern_row_is_redrawn():
    net = make_net()
    net.store["sens.pattern"][1] = 0.0
    reset = renormalize_patterns(net.store, np.random.default_rng(0))
    assert reset == [("sens.pattern", 1)]
    np.testing.assert_allclose(np.max(np.abs(net.patterns("sens")), axis=1), 1.0)


def test_forward_shapes_and_unit_branches(rng):
    net = make_net()
    x, v = batch(rng)
    out, tape = net.forward(x, v, tape=True)
    assert out.shape == (6, 16)
    for b, length in (("sens", 6), ("insens", 10)):
        assert tape.unit[b].shape == (6, length)
        np.testing.assert_allclose(np.linalg.norm(tape.unit[b], axis=1), 1.0)
    np.testing.assert_allclose(forward_combined(x, v, net), out)
    np.testing.assert_allclose(forward_sensitive(x, v, net), tape.unit["sens"])


@given(st.floats(-3, 3))
def test_insensitive_branch_ignores_input_scale(log_s):
    rng = np.random.default_rng(1)
    net = make_net(np.float32)
    x, v = batch(rng)
    a = forward_insensitive(x, v, net)
    b = forward_insensitive(x * 10.0**log_s, v, net)
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_sensitive_branch_sees_input_scale(rng):
    net = make_net()
    x, v = batch(rng)
    assert not np.allclose(forward_sensitive(x, v, net), forward_sensitive(3 * x, v, net), atol=1e-3)


def test_view_encoding_matters(rng):
    net = make_net()
    x, v = batch(rng)
    assert not np.allclose(net.forward(x, v), net.forward(x, -v))


def test_noise_multiplies_measurements(rng):
    net = make_net()
    x, v = batch(rng)
    noise = {"sens": np.full((6, 3), 2.0), "insens": np.ones((6, 5))}
    _, tape = net.forward(x, v, noise, tape=True)
    np.testing.assert_allclose(tape.meas["sens"], 2.0 * net.measure(x, "sens"))


def test_input_gradient_matches_finite_differences(rng):
    net = make_net()
    x, v = batch(rng, n=3)
    c = rng.normal(size=(3, 16))
    _, tape = net.forward(x, v, tape=True)
    dx = net.backward(tape, c, input_grad=True)
    h = 1e-6
    for idx in [(0, 0), (1, 100), (2, 383)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (np.sum(c * net.forward(xp, v)) - np.sum(c * net.forward(xm, v))) / (2 * h)
        assert dx[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_backward_accumulates(rng):
    net = make_net()
    x, v = batch(rng, n=2)
    c = rng.normal(size=(2, 16))
    _, tape = net.forward(x, v, tape=True)
    net.backward(tape, c)
    once = net.store.grad_flat.copy()
    net.backward(tape, c, accumulate=True)
    np.testing.assert_allclose(net.store.grad_flat, 2 * once)


def test_zero_input_flags_invalid(rng):
    net = make_net()
    x, v = batch(rng, n=2)
    x[1] = 0.0
    _, tape = net.forward(x, v, tape=True)
    assert tape.invalid.tolist() == [False, True]


def test_contract_errors(rng):
    net = make_net()
    with pytest.raises(ContractError):
        net.forward(np.zeros((1, 100)), np.zeros((1, 2)))
    with pytest.raises(ContractError):
        net.forward_measurements({"sens": np.zeros((1, 4)), "insens": np.zeros((1, 5))}, np.zeros((1, 2)))
    sens = make_net(branches="sens")
    x, v = batch(rng)
    assert sens.forward(x, v).shape == (6, 6)
    with pytest.raises(ContractError):
        forward_combined(x, v, sens)
    with pytest.raises(ContractError):
        forward_insensitive(x, v, sens)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net = make_net(np.float32, seed=3)
    path = tmp_path / "m.pftc"
    save_checkpoint(path, net, LayoutConfig(), {"note": "x"})
    back, manifest = load_checkpoint(path)
    np.testing.assert_array_equal(back.store.flat, net.store.flat)
    assert back.config == net.config
    assert manifest["note"] == "x"
    assert layout_config_from_manifest(manifest) == LayoutConfig()
    save_checkpoint(tmp_path / "n.pftc", back, LayoutConfig(), {"note": "x"})
    assert (tmp_path / "n.pftc").read_bytes() == path.read_bytes()


def test_checkpoint_kind_checked(tmp_path):
    from photoxform.netcore import save_tensors

    save_tensors(tmp_path / "x.pftc", {"a": np.zeros(2)}, {"kind": "other"})
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "x.pftc")
