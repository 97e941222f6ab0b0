import numpy as np
import pytest
from conftest import bilinear_point

from staf import numeric_core as nc
from staf.body_model import PAPER_TEMPLATE, TemplateConfig, lbs_forward, make_mini_template, split_params
from staf.pyramid import (
    PAPER_PYRAMID,
    DeconvLayer,
    PyramidConfig,
    deconv_apply,
    grid_points,
    grid_sample_features,
    init_deconv,
    mesh_projection,
    project_sample_features,
)


def scatter_deconv(x, w, b):
    """Direct scatter-add transposed convolution, kernel 4, stride 2, padding 1."""
    Cin, H, W = x.shape
    Cout = w.shape[0]
    full = np.zeros((Cout, 2 * H + 2, 2 * W + 2))
    for ci in range(Cin):
        for i in range(H):
            for j in range(W):
                for co in range(Cout):
                    full[co, 2 * i:2 * i + 4, 2 * j:2 * j + 4] += x[ci, i, j] * w[co, ci]
    return full[:, 1:-1, 1:-1] + b[:, None, None]


def test_pyramid_sizes_double():
    assert PAPER_PYRAMID.sizes == [(7, 7), (14, 14), (28, 28), (56, 56)]
    assert PAPER_PYRAMID.level_channels == [2048] * 4
    assert (PAPER_PYRAMID.c_m, PAPER_PYRAMID.grid_side) == (5, 21)
    with pytest.raises(ValueError):
        PyramidConfig(c_m=0)


def test_paper_feature_lengths():
    assert PAPER_PYRAMID.grid_feature_len() == 2205
    assert PAPER_TEMPLATE.n_down == 431
    assert PAPER_PYRAMID.mesh_feature_len(PAPER_TEMPLATE.n_down) == 2155


def test_deconv_doubles_and_chains():
    rng = np.random.default_rng(0)
    layers = [init_deconv(rng, 3, 3) for _ in range(3)]
    x = rng.standard_normal((1, 3, 7, 7))
    sizes = []
    for layer in layers:
        x = deconv_apply(layer, x)
        sizes.append(x.shape[-2:])
    assert sizes == [(14, 14), (28, 28), (56, 56)]


def test_deconv_zero_kernel_gives_bias():
    layer = DeconvLayer(np.zeros((2, 3, 4, 4)), np.array([0.5, -2.0]))
    out = deconv_apply(layer, np.random.default_rng(1).standard_normal((3, 5, 4)))
    assert out.shape == (2, 10, 8)
    np.testing.assert_array_equal(out[0], 0.5)
    np.testing.assert_array_equal(out[1], -2.0)


def test_deconv_matches_scatter_oracle():
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.standard_normal((2, 3, 3))
        layer = DeconvLayer(rng.standard_normal((2, 2, 4, 4)), rng.standard_normal(2))
        np.testing.assert_allclose(deconv_apply(layer, x), scatter_deconv(x, layer.weight, layer.bias), atol=1e-12)


def test_deconv_rejects_channel_mismatch():
    layer = init_deconv(np.random.default_rng(3), 4, 2)
    with pytest.raises(ValueError):
        deconv_apply(layer, np.zeros((3, 5, 5)))


def test_grid_points_layout():
    p = grid_points(3)
    np.testing.assert_array_equal(p[:3], [[-1, -1], [0, -1], [1, -1]])
    np.testing.assert_array_equal(p[4], [0, 0])
    np.testing.assert_array_equal(grid_points(1), [[0, 0]])


def test_grid_features_constant_map():
    fmap = np.full((2, 3, 6, 6), 1.5)
    red = nc.LinearLayer(np.eye(3), np.zeros(3))
    out = grid_sample_features(fmap, red, 4)
    assert out.shape == (2, 16 * 3)
    np.testing.assert_allclose(out, 1.5, atol=1e-15)


def test_grid_features_match_point_oracle():
    rng = np.random.default_rng(4)
    fmap = rng.standard_normal((4, 5, 5))
    red = nc.LinearLayer(rng.standard_normal((2, 4)), rng.standard_normal(2))
    out = grid_sample_features(fmap, red, 3)
    ref = []
    for y in (-1.0, 0.0, 1.0):
        for x in (-1.0, 0.0, 1.0):
            ref.extend(red.weight @ bilinear_point(fmap, x, y) + red.bias)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_grid_features_reduce_mismatch():
    with pytest.raises(ValueError):
        grid_sample_features(np.zeros((3, 4, 4)), nc.LinearLayer(np.zeros((2, 5)), np.zeros(2)), 3)


@pytest.fixture(scope="module")
def tiny():
    return make_mini_template(TemplateConfig(n_verts=40, n_joints=4, n_down=8), 0)


def _random_params(rng, tpl):
    J1 = tpl.n_joints_total
    return np.concatenate([0.4 * rng.standard_normal(3 * J1), 0.5 * rng.standard_normal(10),
                           [1.0 + 0.1 * rng.standard_normal()], 0.1 * rng.standard_normal(2)])


def test_mesh_features_constant_map_independent_of_pose(tiny):
    rng = np.random.default_rng(5)
    red = nc.LinearLayer(rng.standard_normal((3, 2)), rng.standard_normal(3))
    fmap = np.full((2, 6, 6), 0.25)
    outs = [project_sample_features(fmap, _random_params(rng, tiny), tiny, red) for _ in range(3)]
    assert outs[0].shape == (8 * 3,)
    for o in outs:
        np.testing.assert_allclose(o, outs[0], atol=1e-15)
        np.testing.assert_allclose(o.reshape(8, 3), np.broadcast_to(red.weight @ [0.25, 0.25] + red.bias, (8, 3)),
                                   atol=1e-14)


def test_mesh_features_match_per_vertex_oracle(tiny):
    rng = np.random.default_rng(6)
    fmap = rng.standard_normal((3, 7, 7))
    red = nc.LinearLayer(rng.standard_normal((2, 3)), rng.standard_normal(2))
    for _ in range(3):
        p = _random_params(rng, tiny)
        out = project_sample_features(fmap, p, tiny, red)
        theta, beta, s, t = split_params(p, tiny.n_joints_total)
        verts = lbs_forward(tiny, beta, theta)
        ref = []
        for row in tiny.downsample:
            v = row @ verts
            x, y = s * v[0] + t[0], s * v[1] + t[1]
            ref.extend(red.weight @ bilinear_point(fmap, x, y) + red.bias)
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_mesh_projection_shape(tiny):
    p = np.stack([_random_params(np.random.default_rng(i), tiny) for i in range(3)])
    assert mesh_projection(p, tiny).shape == (3, 8, 2)


def test_mesh_features_errors(tiny):
    red = nc.LinearLayer(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        project_sample_features(np.zeros((3, 4, 4)), np.zeros(tiny.param_dim + 1), tiny, red)
    with pytest.raises(ValueError):
        project_sample_features(np.zeros((2, 3, 4, 4)), np.zeros((3, tiny.param_dim)), tiny, red)
    with pytest.raises(ValueError):
        project_sample_features(np.zeros((4, 4, 4)), np.zeros(tiny.param_dim), tiny, red)
