import numpy as np
import pytest
from conftest import softmax_list
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from staf import numeric_core as nc
from staf.safm import attention_integrate, init_safm, pad_to_groups, safm_forward, write_alpha_csv

S, D_R = 8, 4


@pytest.fixture
def w():
    return init_safm(np.random.default_rng(0), S, D_R, (6, 5))


def direct_integrate(fs, w):
    """Direct formula: alpha = softmax(head(concat(reduce(f_i)))), output = sum alpha_i f_i."""
    h = np.concatenate([w.fc_reduce.weight @ f + w.fc_reduce.bias for f in fs])
    h = np.tanh(w.head[0].weight @ h + w.head[0].bias)
    h = np.tanh(w.head[1].weight @ h + w.head[1].bias)
    alpha = softmax_list(list(w.head[2].weight @ h + w.head[2].bias))
    return sum(a * f for a, f in zip(alpha, fs)), np.array(alpha)


def _uniform(w):
    w.head[2] = nc.LinearLayer(np.zeros_like(w.head[2].weight), np.full(3, 0.7))
    return w


def test_identical_inputs_return_input(w):
    f = np.random.default_rng(1).standard_normal(S)
    out, _ = attention_integrate(f, f, f, w)
    np.testing.assert_allclose(out, f, atol=1e-15)


def test_uniform_attention_is_mean(w):
    rng = np.random.default_rng(2)
    fs = rng.standard_normal((3, S))
    out, alpha = attention_integrate(*fs, _uniform(w))
    np.testing.assert_allclose(alpha, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(out, fs.mean(axis=0), atol=1e-15)


def test_integrate_matches_direct_formula(w):
    rng = np.random.default_rng(3)
    for _ in range(5):
        fs = rng.standard_normal((3, S))
        out, alpha = attention_integrate(*fs, w)
        ref, ref_alpha = direct_integrate(fs, w)
        np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)
        np.testing.assert_allclose(alpha, ref_alpha, atol=1e-12, rtol=0)


def test_two_level_composition_oracle(w):
    rng = np.random.default_rng(4)
    for _ in range(3):
        fs = rng.standard_normal((9, S))
        out, alphas = safm_forward(fs, w)
        level1 = [direct_integrate(fs[3 * g:3 * g + 3], w) for g in range(3)]
        ref, ref_alpha = direct_integrate([x for x, _ in level1], w)
        np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)
        np.testing.assert_allclose(alphas[0], [a for _, a in level1], atol=1e-12, rtol=0)
        np.testing.assert_allclose(alphas[1], [ref_alpha], atol=1e-12, rtol=0)


def test_constant_window_and_nested_means(w):
    rng = np.random.default_rng(5)
    f = rng.standard_normal(S)
    out, _ = safm_forward(np.tile(f, (9, 1)), w)
    np.testing.assert_allclose(out, f, atol=1e-14)
    fs = rng.standard_normal((9, S))
    out, _ = safm_forward(fs, _uniform(w))
    np.testing.assert_allclose(out, fs.mean(axis=0), atol=1e-14)


def test_count_and_width_errors(w):
    for n in (1, 2, 4, 6, 8, 10):
        with pytest.raises(ValueError):
            safm_forward(np.zeros((n, S)), w)
    with pytest.raises(ValueError):
        safm_forward(np.zeros((9, S + 1)), w)
    with pytest.raises(ValueError):
        attention_integrate(np.zeros(S), np.zeros(S), np.zeros(S - 1), w)


def test_three_and_twentyseven(w):
    rng = np.random.default_rng(6)
    out3, a3 = safm_forward(rng.standard_normal((2, 3, S)), w)
    assert out3.shape == (2, S) and len(a3) == 1
    out27, a27 = safm_forward(rng.standard_normal((27, S)), w)
    assert out27.shape == (S,) and [np.shape(a) for a in a27] == [(9, 3), (3, 3), (1, 3)]


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (9, S), elements=st.floats(-50, 50)), st.integers(0, 10))
def test_refined_feature_in_convex_hull(fs, seed):
    wt = init_safm(np.random.default_rng(seed), S, D_R)
    out, alphas = safm_forward(fs, wt)
    tol = 1e-9 * (1 + np.abs(fs).max())
    assert np.all(out >= fs.min(axis=0) - tol) and np.all(out <= fs.max(axis=0) + tol)
    for a in alphas:
        np.testing.assert_allclose(np.sum(a, axis=-1), 1.0, atol=1e-12)


def test_pad_to_groups():
    x = np.arange(5.0)[:, None] * np.ones((1, 2))
    np.testing.assert_array_equal(pad_to_groups(x)[:, 0], [0, 0, 0, 1, 2, 3, 4, 4, 4])
    assert pad_to_groups(np.zeros((9, 2))).shape == (9, 2)


def test_alpha_csv(tmp_path, w):
    _, alphas = safm_forward(np.random.default_rng(7).standard_normal((2, 9, S)), w)
    write_alpha_csv(tmp_path / "a.csv", alphas)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "frame,level,group,a1,a2,a3"
    assert len(lines) == 1 + 2 * (3 + 1)
