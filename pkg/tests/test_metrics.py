import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from staf.body_model import DESK_TEMPLATE, make_mini_template
from staf.metrics import (
    FrameAnnotation,
    LossWeights,
    accel_error,
    body_predictions,
    evaluate_arrays,
    evaluate_params,
    loss_total,
    mpjpe,
    pa_mpjpe,
    procrustes_align,
    pve,
)

LAM = LossWeights(0.7, 2e-3, 1.3)


@pytest.fixture(scope="module")
def tpl():
    return make_mini_template(DESK_TEMPLATE, 0)


def _params(rng, tpl, n):
    J1 = tpl.n_joints_total
    p = np.zeros((n, tpl.param_dim))
    p[:, :3 * J1] = 0.3 * rng.standard_normal((n, 3 * J1))
    p[:, 3 * J1:-3] = 0.5 * rng.standard_normal((n, 10))
    p[:, -3] = 1 + 0.1 * rng.standard_normal(n)
    p[:, -2:] = 0.1 * rng.standard_normal((n, 2))
    return p


# ---------------------------------------------------------------- loss


def test_loss_zero_for_perfect_prediction(tpl):
    p = _params(np.random.default_rng(0), tpl, 3)
    pred = body_predictions(p, tpl)
    ann = FrameAnnotation(p, pred["joints3d"], pred["joints2d"])
    np.testing.assert_array_equal(loss_total(pred, ann, LAM), 0.0)


def test_loss_only_2d_present(tpl):
    rng = np.random.default_rng(1)
    p = _params(rng, tpl, 2)
    pred = body_predictions(p, tpl)
    gt2 = pred["joints2d"] + 0.1 * rng.standard_normal(pred["joints2d"].shape)
    got = loss_total(pred, FrameAnnotation(gt_joints2d=gt2), LAM)
    want = LAM.j2d * np.linalg.norm((pred["joints2d"] - gt2).reshape(2, -1), axis=1)
    np.testing.assert_array_equal(got, want)


def test_loss_term_oracle_with_masks(tpl):
    rng = np.random.default_rng(2)
    p, g = _params(rng, tpl, 4), _params(rng, tpl, 4)
    pred = body_predictions(p, tpl)
    ref = body_predictions(g, tpl)
    j3 = ref["joints3d"] + rng.standard_normal(ref["joints3d"].shape)
    m3 = np.array([1.0, 0.0, 1.0, 1.0])
    got = loss_total(pred, FrameAnnotation(g, j3, ref["joints2d"], joints3d_mask=m3), LAM)
    for i in range(4):
        def norm(a, b):
            return np.sqrt(sum((x - y) ** 2 for x, y in zip(np.ravel(a), np.ravel(b))))
        want = (LAM.smpl * norm(p[i], g[i]) + LAM.j3d * m3[i] * norm(pred["joints3d"][i], j3[i])
                + LAM.j2d * norm(pred["joints2d"][i], ref["joints2d"][i]))
        assert abs(got[i] - want) <= 1e-12 * max(1.0, want)


def test_loss_no_annotations_and_errors(tpl):
    p = _params(np.random.default_rng(3), tpl, 2)
    pred = body_predictions(p, tpl)
    np.testing.assert_array_equal(loss_total(pred, FrameAnnotation()), [0.0, 0.0])
    with pytest.raises(ValueError):
        loss_total(pred, FrameAnnotation(gt_theta=p[:1]))
    with pytest.raises(ValueError):
        LossWeights(smpl=-1)
    with pytest.raises(ValueError):
        FrameAnnotation(gt_theta=np.array([np.nan]))


# ---------------------------------------------------------------- MPJPE


def test_mpjpe_examples():
    rng = np.random.default_rng(4)
    gt = rng.standard_normal((5, 6, 3)) * 100
    assert mpjpe(gt, gt)[1] == 0
    np.testing.assert_allclose(mpjpe(gt + [10.0, -3.0, 7.0], gt)[0], 0, atol=1e-12)
    g2 = np.zeros((2, 2, 3))
    p2 = g2.copy()
    p2[1, 1] += [3.0, 4.0, 0.0]
    per, mean = mpjpe(p2, g2)
    np.testing.assert_allclose(per, [0.0, 2.5])
    assert mean == 1.25


def test_mpjpe_double_loop_oracle():
    rng = np.random.default_rng(5)
    p, g = rng.standard_normal((4, 7, 3)), rng.standard_normal((4, 7, 3))
    per, _ = mpjpe(p, g)
    for t in range(4):
        d = [np.sqrt(sum(((p[t, j, c] - p[t, 0, c]) - (g[t, j, c] - g[t, 0, c])) ** 2 for c in range(3)))
             for j in range(7)]
        assert abs(per[t] - sum(d) / 7) < 1e-12


def test_metric_shape_errors():
    with pytest.raises(ValueError):
        mpjpe(np.zeros((2, 3, 3)), np.zeros((2, 4, 3)))
    with pytest.raises(ValueError):
        pve(np.zeros((2, 3, 2)), np.zeros((2, 3, 2)))
    with pytest.raises(ValueError):
        accel_error(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)))


# ---------------------------------------------------------------- Procrustes


def test_procrustes_identity():
    A = np.random.default_rng(6).standard_normal((8, 3))
    s, R, t = procrustes_align(A, A)
    assert abs(s - 1) < 1e-12
    np.testing.assert_allclose(R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t, 0, atol=1e-12)


def test_procrustes_recovers_similarity():
    rng = np.random.default_rng(7)
    for _ in range(20):
        A = rng.standard_normal((10, 3))
        Rot = Rotation.random(random_state=rng).as_matrix()
        c = rng.standard_normal(3) * 50
        B = 2.0 * A @ Rot.T + c
        s, R, t = procrustes_align(A, B)
        assert abs(s - 2) < 1e-9
        np.testing.assert_allclose(R, Rot, atol=1e-9)
        np.testing.assert_allclose(t, c, atol=1e-9)
        np.testing.assert_allclose(s * A @ R.T + t, B, atol=1e-9)


def test_procrustes_never_reflects():
    rng = np.random.default_rng(8)
    A = rng.standard_normal((6, 3))
    B = A * [1, 1, -1]  # a mirror image is not reachable by a rotation
    _, R, _ = procrustes_align(A, B)
    assert abs(np.linalg.det(R) - 1) < 1e-12


def _residual_for_rotation(A, B, rotvec):
    R = Rotation.from_rotvec(rotvec).as_matrix()
    a, b = A - A.mean(0), B - B.mean(0)
    ra = a @ R.T
    s = max(np.sum(ra * b) / np.sum(a * a), 0.0)
    return np.sum((s * ra - b) ** 2)


def test_procrustes_matches_rotation_grid_oracle():
    rng = np.random.default_rng(9)
    for _ in range(3):
        A = rng.standard_normal((4, 3))
        B = 1.3 * A @ Rotation.random(random_state=rng).as_matrix().T + rng.standard_normal((4, 3)) * 0.3
        # coarse scan of the rotation ball, then polish the best cells
        g = np.linspace(-np.pi, np.pi, 13)
        grid = np.array([[x, y, z] for x in g for y in g for z in g if x * x + y * y + z * z <= np.pi ** 2])
        vals = np.array([_residual_for_rotation(A, B, r) for r in grid])
        best = min(minimize(lambda r: _residual_for_rotation(A, B, r), grid[i], method="BFGS",
                            options={"gtol": 1e-12}).fun for i in np.argsort(vals)[:6])
        s, R, t = procrustes_align(A, B)
        res = np.sum((s * A @ R.T + t - B) ** 2)
        assert abs(res - best) < 1e-6


def test_procrustes_rejects_degenerate():
    with pytest.raises(ValueError):
        procrustes_align(np.ones((5, 3)), np.random.default_rng(0).standard_normal((5, 3)))
    with pytest.raises(ValueError):
        procrustes_align(np.eye(3)[:2], np.eye(3)[:2])


def test_pa_mpjpe_examples():
    rng = np.random.default_rng(10)
    gt = rng.standard_normal((4, 8, 3)) * 100
    assert pa_mpjpe(gt, gt)[1] < 1e-9
    pred = np.stack([0.7 * g @ Rotation.random(random_state=rng).as_matrix().T + 30 for g in gt])
    assert pa_mpjpe(pred, gt)[1] < 1e-6


def test_pa_mpjpe_below_mpjpe_on_random_perturbations():
    rng = np.random.default_rng(17)
    gt = rng.standard_normal((100, 14, 3)) * 200
    pred = gt + rng.standard_normal(gt.shape) * 30
    assert np.all(pa_mpjpe(pred, gt)[0] <= mpjpe(pred, gt)[0] + 1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 6, 3), elements=st.floats(-500, 500)),
       arrays(np.float64, (2, 6, 3), elements=st.floats(-50, 50)))
def test_procrustes_squared_error_never_exceeds_root_centering(gt, noise):
    pred = gt + noise
    spread = pred - pred.mean(axis=1, keepdims=True)
    if np.min(np.sum(spread ** 2, axis=(1, 2))) < 1e-6:
        return
    for p, g in zip(pred, gt):
        s, R, t = procrustes_align(p, g)
        aligned = np.sum((s * p @ R.T + t - g) ** 2)
        centered = np.sum(((p - p[0]) - (g - g[0])) ** 2)
        assert aligned <= centered * (1 + 1e-9) + 1e-9
    assert np.all(pa_mpjpe(pred, gt)[0] >= 0)


def test_mean_distance_ordering_can_fail_for_a_single_outlier():
    # least squares spreads one joint's error over all joints, which costs more in mean distance
    gt = np.ones((1, 6, 3))
    gt[0, 0, 0] = 0.0
    pred = gt.copy()
    pred[0, 1, 0] += 1.0
    assert pa_mpjpe(pred, gt)[1] > mpjpe(pred, gt)[1]


# ---------------------------------------------------------------- PVE and accel


def test_pve_examples():
    rng = np.random.default_rng(11)
    gt = rng.standard_normal((3, 20, 3)) * 100
    assert pve(gt, gt)[1] == 0
    shifted = gt + [0.0, 0.0, 5.0]
    np.testing.assert_allclose(pve(shifted, gt, shifted[:, 0], gt[:, 0])[0], 0, atol=1e-12)
    np.testing.assert_allclose(pve(shifted, gt)[0], 0, atol=1e-12)


def test_pve_double_loop_oracle():
    rng = np.random.default_rng(12)
    p, g = rng.standard_normal((2, 9, 3)), rng.standard_normal((2, 9, 3))
    pr, gr = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    per, _ = pve(p, g, pr, gr)
    for t in range(2):
        d = [np.sqrt(sum(((p[t, n, c] - pr[t, c]) - (g[t, n, c] - gr[t, c])) ** 2 for c in range(3)))
             for n in range(9)]
        assert abs(per[t] - sum(d) / 9) <= 1e-12


def test_accel_examples():
    rng = np.random.default_rng(13)
    gt = rng.standard_normal((7, 4, 3))
    assert accel_error(gt, gt)[1] == 0
    t = np.arange(7.0)[:, None, None]
    drift = gt + rng.standard_normal((1, 4, 3)) * t
    np.testing.assert_allclose(accel_error(drift, gt)[0], 0, atol=1e-12)
    a = -1.7
    quad = a * t[:, :, :1] ** 2 * np.ones((7, 1, 3))
    per, _ = accel_error(quad, np.zeros((7, 1, 3)))
    np.testing.assert_allclose(per, 2 * abs(a) * np.sqrt(3), atol=1e-12)
    per_s, _ = accel_error(quad, None, fps=25)
    np.testing.assert_allclose(per_s, 2 * abs(a) * np.sqrt(3) * 625, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 2, 3), elements=st.floats(-100, 100)),
       arrays(np.float64, (6, 2, 3), elements=st.floats(-100, 100)),
       arrays(np.float64, (2, 2, 3), elements=st.floats(-100, 100)))
def test_accel_invariant_to_affine_trajectories(p, g, ab):
    t = np.arange(6.0)[:, None, None]
    affine = ab[0] + ab[1] * t
    base, _ = accel_error(p, g)
    moved, _ = accel_error(p + affine, g + affine)
    np.testing.assert_allclose(moved, base, atol=1e-9)


# ---------------------------------------------------------------- reports


def test_report_self_comparison_is_zero(tpl, tmp_path):
    p = _params(np.random.default_rng(14), tpl, 5)
    rep = evaluate_params(p, p, tpl, fps=30)
    assert rep.accel_unit == "mm/s^2"
    for k in ("mpjpe", "pa_mpjpe", "pve", "accel"):
        assert rep.means[k] < 1e-6
    rep.to_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["frame", "mpjpe", "pa_mpjpe", "pve", "accel"]
    assert rows[1][4] == "" and rows[5][4] == "" and rows[-1][0] == "mean"
    assert len(rows) == 1 + 5 + 1


def test_report_short_sequence_has_no_accel():
    x = np.random.default_rng(15).standard_normal((2, 4, 3))
    rep = evaluate_arrays(x, x + 1, x, x + 1)
    assert np.all(np.isnan(rep.accel)) and np.isnan(rep.means["accel"])
    np.testing.assert_allclose(rep.mpjpe, 0, atol=1e-12)


def test_metrics_nonnegative():
    rng = np.random.default_rng(16)
    p, g = rng.standard_normal((5, 6, 3)), rng.standard_normal((5, 6, 3))
    rep = evaluate_arrays(p, g, p, g)
    for arr in (rep.mpjpe, rep.pa_mpjpe, rep.pve, rep.accel[1:-1]):
        assert np.all(arr >= 0)
