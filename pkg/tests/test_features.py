import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from photoxform import features as ft
from photoxform.errors import ContractError, FormatError
from photoxform.lightstage import encode_view
from photoxform.model import FeatureNet, ModelConfig


@pytest.fixture(scope="module")
def net():
    return FeatureNet(ModelConfig(), rng=np.random.default_rng(0))


def make_stack(rng, H=6, W=7, M=8, C=1):
    data = rng.uniform(-0.05, 0.1, size=(H, W, M, C))
    mask = rng.random((H, W)) > 0.3
    return ft.MeasurementStack(data, mask, 0.4)


def test_extract_matches_network(net, rng):
    stack = make_stack(rng)
    fmap = ft.extract(stack, net)
    assert fmap.data.shape == (6, 7, 16)
    np.testing.assert_array_equal(fmap.mask, stack.mask)
    r, c = np.argwhere(stack.mask)[0]
    meas = stack.data[r, c, :, 0][None]
    expected = net.forward_measurements({"sens": meas[:, :3], "insens": meas[:, 3:]},
                                        encode_view(0.4)[None])
    np.testing.assert_allclose(fmap.data[r, c], expected[0], rtol=1e-5, atol=1e-6)
    assert not fmap.data[~fmap.mask].any()


def test_extract_concatenates_channels(net, rng):
    stack = make_stack(rng, C=3)
    fmap = ft.extract(stack, net)
    assert fmap.dim == 48
    single = ft.extract(ft.MeasurementStack(stack.data[..., 1:2], stack.mask, 0.4), net)
    np.testing.assert_array_equal(fmap.data[..., 16:32], single.data)


def test_extract_threads_do_not_change_result(net, rng):
    stack = make_stack(rng, H=20, W=20)
    a = ft.extract(stack, net, threads=1, chunk=37)
    b = ft.extract(stack, net, threads=4, chunk=37)
    np.testing.assert_array_equal(a.data, b.data)


def test_zero_measurements_become_invalid(net, rng):
    stack = make_stack(rng)
    stack.mask[0, 0] = True
    stack.data[0, 0] = 0.0
    assert not ft.extract(stack, net).mask[0, 0]


def test_extract_checks_measurement_count(net, rng):
    with pytest.raises(ContractError):
        ft.extract(make_stack(rng, M=5), net)


def test_stack_validation():
    with pytest.raises(ContractError):
        ft.MeasurementStack(np.zeros((2, 2, 3)), np.ones((2, 2)), 0.0)
    bad = np.zeros((2, 2, 3, 1))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ContractError):
        ft.MeasurementStack(bad, np.ones((2, 2)), 0.0)


@given(st.integers(1, 6), st.integers(0, 1000))
def test_pca_components_orthonormal_and_sorted(dim, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(200, 6)) @ rng.normal(size=(6, 6))
    pca = ft.fit_pca(X, dim)
    np.testing.assert_allclose(pca.components @ pca.components.T, np.eye(dim), atol=1e-5)
    assert np.all(np.diff(pca.explained) <= 1e-12)
    peak = np.argmax(np.abs(pca.components), axis=1)
    assert np.all(pca.components[np.arange(dim), peak] > 0)


def test_pca_matches_svd(rng):
    X = rng.normal(size=(300, 5)) * [5, 3, 2, 1, 0.5]
    pca = ft.fit_pca(X, 3)
    _, s, vt = np.linalg.svd(X - X.mean(axis=0), full_matrices=False)
    np.testing.assert_allclose(np.abs(pca.components), np.abs(vt[:3]), atol=1e-10)
    np.testing.assert_allclose(pca.explained, s[:3] ** 2 / 299, rtol=1e-10)


def test_full_projection_preserves_distances(rng):
    X = rng.normal(size=(50, 8))
    Y = ft.project(X, ft.fit_pca(X, 8))
    dx = np.linalg.norm(X[:, None] - X[None], axis=-1)
    dy = np.linalg.norm(Y[:, None] - Y[None], axis=-1)
    np.testing.assert_allclose(dx, dy, atol=1e-5)


def test_pca_rank_and_dimension_errors(rng):
    X = np.zeros((20, 4))
    X[:, 0] = rng.normal(size=20)
    with pytest.raises(ContractError, match="rank 1"):
        ft.fit_pca(X, 2)
    assert ft.fit_pca(X, 2, allow_deficient=True).output_dim == 2
    with pytest.raises(ContractError):
        ft.fit_pca(X, 5)
    with pytest.raises(ContractError):
        ft.fit_pca(X[:2], 2)


def test_pca_over_feature_maps(net, rng):
    maps = [ft.extract(make_stack(rng, H=10, W=10), net) for _ in range(2)]
    pca = ft.fit_pca(maps, 4)
    reduced = ft.project(maps[0], pca)
    assert reduced.dim == 4
    np.testing.assert_array_equal(reduced.mask, maps[0].mask)
    with pytest.raises(ContractError):
        ft.project(reduced, pca)


def test_visualize(rng):
    data = rng.normal(size=(5, 5, 6))
    data[..., 5] = 0.0
    mask = np.ones((5, 5), bool)
    mask[0, 0] = False
    img = ft.visualize(ft.FeatureMap(data, mask, 0.0))
    assert img.shape == (5, 5, 3) and img.dtype == np.uint8
    assert img[0, 0].tolist() == [0, 0, 0]
    assert img[mask].max() == 255
    flat = ft.visualize(ft.FeatureMap(np.ones((3, 3, 2)), np.ones((3, 3), bool), 0.0))
    assert np.all(flat == 128)


def test_png_written(tmp_path, rng):
    img = ft.visualize(ft.FeatureMap(rng.normal(size=(4, 4, 3)), np.ones((4, 4), bool), 0.0))
    ft.save_png(tmp_path / "a.png", img)
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "a.png")), img)


def test_feature_map_round_trip(tmp_path, rng):
    fmap = ft.FeatureMap(rng.normal(size=(3, 4, 5)), rng.random((3, 4)) > 0.5, 0.7)
    path = tmp_path / "a.fmap"
    ft.write_feature_map(path, fmap)
    raw = path.read_bytes()
    assert raw[:4] == b"FMAP" and len(raw) == 24 + 4 * 60 + 12
    back = ft.read_feature_map(path)
    np.testing.assert_array_equal(back.data, fmap.data)
    np.testing.assert_array_equal(back.mask, fmap.mask)
    ft.write_feature_map(tmp_path / "b.fmap", back)
    assert (tmp_path / "b.fmap").read_bytes() == raw


def test_pca_file_round_trip(tmp_path, rng):
    pca = ft.fit_pca(rng.normal(size=(40, 6)), 3)
    ft.write_pca(tmp_path / "p.pcam", pca)
    back = ft.read_pca(tmp_path / "p.pcam")
    np.testing.assert_array_equal(back.components, pca.components)
    np.testing.assert_array_equal(back.mean, pca.mean)
    np.testing.assert_array_equal(back.explained, pca.explained)


def test_stack_round_trip(tmp_path, rng):
    stack = make_stack(rng, C=2)
    ft.write_stack(tmp_path / "s.mstk", stack)
    back = ft.read_stack(tmp_path / "s.mstk")
    np.testing.assert_array_equal(back.data, stack.data)
    np.testing.assert_array_equal(back.mask, stack.mask)
    assert back.theta == stack.theta


def test_containers_reject_wrong_magic(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"PCAM" + bytes(20))
    with pytest.raises(FormatError):
        ft.read_feature_map(p)
