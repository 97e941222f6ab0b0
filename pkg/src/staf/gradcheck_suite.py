"""Registered gradient checks for every differentiable op and composite.

Each entry builds a small random case from a seeded generator; ``run_suite``
repeats every entry over a number of seeded trials and keeps the worst error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric_core as nc
from .body_model import (
    TemplateConfig,
    body_outputs,
    forward_kinematics,
    lbs_forward,
    make_mini_template,
    project_weak_perspective,
    rodrigues,
)
from .harness import SynthSpec, dataset_for_model
from .metrics import FrameAnnotation, LossWeights, body_predictions, loss_total
from .pipeline import apply_apm, desk_model, ief_regress, init_regressor, staf_forward
from .pyramid import grid_sample_features, project_sample_features
from .safm import attention_integrate, init_safm, safm_forward
from .tcfm import correlation_matrices, fuse_guidance, init_tcfm, tcfm_forward

TINY_TEMPLATE = TemplateConfig(n_verts=30, n_joints=3, n_down=6)
_tpl_cache: dict = {}


def _template(config=TINY_TEMPLATE):
    if config not in _tpl_cache:
        _tpl_cache[config] = make_mini_template(config, 0)
    return _tpl_cache[config]


def _leaves(obj):
    return [np.asarray(v) for _, v in nc.tree_leaves(obj)]


def _with_leaves(structure, fn):
    """Make ``f(x..., *leaves)`` from a weight structure and ``fn(x..., weights)``."""
    n = len(nc.tree_leaves(structure))

    def wrapped(*args):
        xs, ls = args[:len(args) - n], args[len(args) - n:]
        return fn(*xs, nc.tree_unflatten(structure, list(ls)))

    return wrapped


def _params(rng, n_joints_total, lead=()):
    D = 3 * n_joints_total + 13
    p = np.zeros(lead + (D,))
    p[..., :3 * n_joints_total] = 0.4 * rng.standard_normal(lead + (3 * n_joints_total,))
    p[..., 3 * n_joints_total:-3] = 0.5 * rng.standard_normal(lead + (10,))
    p[..., -3] = 1.0 + 0.1 * rng.standard_normal(lead)
    p[..., -2:] = 0.1 * rng.standard_normal(lead + (2,))
    return p


def _register_all():
    reg = nc.register
    N = lambda rng, *s: rng.standard_normal(s)  # noqa: E731

    # elementwise and shape plumbing
    reg("add", lambda r: [N(r, 3, 4), N(r, 4)], nc.add)
    reg("sub", lambda r: [N(r, 3, 1), N(r, 3, 4)], nc.sub)
    reg("mul", lambda r: [N(r, 2, 3), N(r, 2, 3)], nc.mul)
    reg("tanh", lambda r: [N(r, 5, 3)], nc.tanh)
    reg("reshape", lambda r: [N(r, 2, 6)], lambda x: nc.reshape(x, (3, 4)) * np.arange(12.0).reshape(3, 4))
    reg("transpose", lambda r: [N(r, 2, 3, 4)], lambda x: nc.transpose(x, (2, 0, 1)))
    reg("getitem", lambda r: [N(r, 4, 5)], lambda x: x[np.array([0, 2, 2, 3])][:, 1:4])
    reg("take_rows", lambda r: [N(r, 5, 3)], lambda x: nc.take_rows(x, np.array([[0, 4, 4], [1, 1, 2]])))
    reg("concat", lambda r: [N(r, 2, 3), N(r, 2, 2)], lambda a, b: nc.concat([a, b], axis=1))
    reg("stack", lambda r: [N(r, 2, 3), N(r, 2, 3)], lambda a, b: nc.stack([a, b], axis=-1))
    reg("sum", lambda r: [N(r, 3, 4, 2)], lambda x: nc.sum_(x, axis=1))
    reg("mean_axis", lambda r: [N(r, 3, 4, 2)], lambda x: nc.mean_axis(x, axis=1))
    reg("matmul", lambda r: [N(r, 2, 3, 4), N(r, 4, 5)], nc.matmul)
    reg("einsum", lambda r: [N(r, 2, 3, 4), N(r, 2, 4)], lambda a, b: nc.einsum("bij,bj->bi", a, b))
    reg("linear", lambda r: [N(r, 2, 3, 4), N(r, 5, 4), N(r, 5)], nc.linear)
    reg("softmax_rows", lambda r: [N(r, 3, 4) * 2], nc.softmax_rows)
    reg("norm", lambda r: [N(r, 3, 4)], lambda x: nc.norm(x, axis=-1))
    reg("bilinear_sample", lambda r: [N(r, 2, 3, 5, 6), r.uniform(-0.95, 0.95, (2, 7, 2))], nc.bilinear_sample)
    reg("deconv", lambda r: [N(r, 2, 3, 4, 3), N(r, 2, 3, 4, 4) * 0.5, N(r, 2)], nc.deconv)

    # body model
    reg("rodrigues", lambda r: [N(r, 4, 3) * 0.8], rodrigues)
    tpl = _template()
    reg("forward_kinematics",
        lambda r: [np.asarray(rodrigues(N(r, 2, tpl.n_joints_total, 3) * 0.5)), N(r, 2, tpl.n_joints_total, 3)],
        lambda R, j: forward_kinematics(R, j, tpl.parents))
    J1 = tpl.n_joints_total
    reg("lbs_forward", lambda r: [N(r, 2, 10) * 0.5, N(r, 2, 3 * J1) * 0.4],
        lambda b, t: lbs_forward(tpl, b, t))
    reg("project_weak_perspective", lambda r: [N(r, 2, 5, 3), 1 + 0.1 * N(r, 2), 0.1 * N(r, 2, 2)],
        project_weak_perspective)
    reg("body_outputs", lambda r: [_params(r, J1, (2,))], lambda p: body_outputs(tpl, p)[2])

    # pyramid sampling
    red = nc.init_linear(np.random.default_rng(0), 3, 2)
    reg("grid_sample_features", lambda r: [N(r, 2, 3, 5, 5)] + _leaves(red),
        _with_leaves(red, lambda f, w: grid_sample_features(f, w, 3)))
    reg("project_sample_features", lambda r: [N(r, 2, 3, 6, 6), _params(r, J1, (2,))] + _leaves(red),
        _with_leaves(red, lambda f, p, w: project_sample_features(f, p, tpl, w)))

    # temporal fusion, S=8, T=3
    tw = init_tcfm(np.random.default_rng(1), 8)
    tw.u = nc.init_linear(np.random.default_rng(2), 4, 8)
    reg("correlation_matrices", lambda r: [N(r, 2, 3, 8) * 0.5] + _leaves(tw),
        _with_leaves(tw, lambda z, w: nc.concat(list(correlation_matrices(z, w)), axis=-1)))
    reg("fuse_guidance", lambda r: [np.asarray(nc.softmax_rows(N(r, 3, 3))), np.asarray(nc.softmax_rows(N(r, 3, 3))),
                                    N(r, 1, 2), N(r, 1)],
        lambda a, b, W, bias: fuse_guidance(a, b, nc.LinearLayer(W, bias)))
    reg("tcfm_forward", lambda r: [N(r, 2, 3, 8) * 0.5] + _leaves(tw), _with_leaves(tw, tcfm_forward))

    # spatial fusion, S=8
    sw = init_safm(np.random.default_rng(3), 8, 4, (6, 5))
    reg("attention_integrate", lambda r: [N(r, 2, 8), N(r, 2, 8), N(r, 2, 8)] + _leaves(sw),
        _with_leaves(sw, lambda a, b, c, w: nc.concat(list(attention_integrate(a, b, c, w)), axis=-1)))
    reg("safm_forward", lambda r: [N(r, 2, 9, 8)] + _leaves(sw), _with_leaves(sw, lambda f, w: safm_forward(f, w)[0]))

    # pipeline pieces
    reg("apply_apm", lambda r: [N(r, 2, 3, 4)], lambda x: apply_apm(x, 1, axis=1))
    rw = init_regressor(np.random.default_rng(4), 9, (5, 4), 3, 0.5)
    reg("ief_regress", lambda r: [N(r, 2, 6), N(r, 2, 3)] + _leaves(rw), _with_leaves(rw, ief_regress))

    def _loss_case(r):
        p = _params(r, J1, (3,))
        gt = _params(r, J1, (3,))
        pr = body_predictions(gt, tpl)
        return [p, gt, pr["joints3d"] + 5 * N(r, 3, J1, 3), pr["joints2d"] + 0.05 * N(r, 3, J1, 2)]

    def _loss(p, gt, j3, j2):
        ann = FrameAnnotation(gt, j3, j2, joints3d_mask=np.array([1.0, 0.0, 1.0]))
        return loss_total(body_predictions(p, tpl), ann, LossWeights(1.0, 1e-2, 1.0))

    reg("loss_total", _loss_case, _loss)


_register_all()


# --------------------------------------------------------------------------
# end-to-end: desk-scale loss -> every weight tensor
# --------------------------------------------------------------------------


def _end_to_end_case(trial: int):
    model = desk_model(seed=trial)
    data = dataset_for_model(model, [SynthSpec(length=3, seed=trial)])
    leaves = _leaves(model.weights)

    def fn(*ls):
        w = nc.tree_unflatten(model.weights, list(ls))
        out = staf_forward(data.frames, model, weights=w, index=data.index)
        per = loss_total(body_predictions(out.theta3, model.template), data.annotation())
        return nc.mean_axis(per, axis=0)

    return fn, leaves


@dataclass
class SuiteResult:
    name: str
    trials: int
    max_relative_error: float
    verifiable: bool
    message: str = ""

    def passed(self, tol: float = 1e-4) -> bool:
        return self.verifiable and self.max_relative_error < tol


def check_entry(name: str, trials: int = 25) -> SuiteResult:
    entry = nc.REGISTRY[name]
    worst, msg = 0.0, ""
    for t in range(trials):
        rng = nc.rng_for(t, "gradcheck", name)
        rep = nc.vjp_check(entry["fn"], entry["make_case"](rng), seed=t, name=name)
        if not rep.verifiable:
            return SuiteResult(name, t + 1, float("nan"), False, rep.message)
        worst = max(worst, rep.max_relative_error)
    return SuiteResult(name, trials, worst, True, msg)


def check_end_to_end(trials: int = 25, coords_per_tensor: int = 3) -> SuiteResult:
    worst = 0.0
    for t in range(trials):
        fn, leaves = _end_to_end_case(t)
        rep = nc.vjp_check(fn, leaves, seed=t, max_coords=coords_per_tensor, name="end_to_end")
        if not rep.verifiable:
            return SuiteResult("end_to_end", t + 1, float("nan"), False, rep.message)
        worst = max(worst, rep.max_relative_error)
    return SuiteResult("end_to_end", trials, worst, True)


def run_suite(trials: int = 25, names=None, end_to_end: bool = True, log=None) -> list:
    results = []
    for name in (names if names is not None else list(nc.REGISTRY)):
        results.append(check_entry(name, trials))
        if log:
            log(_line(results[-1]))
    if end_to_end:
        results.append(check_end_to_end(trials))
        if log:
            log(_line(results[-1]))
    return results


def _line(r: SuiteResult) -> str:
    status = "ok" if r.passed() else "FAIL"
    return f"{status:4s} {r.name:28s} trials={r.trials:3d} max_rel_err={r.max_relative_error:.3e} {r.message}"
