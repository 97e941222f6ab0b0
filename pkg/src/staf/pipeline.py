"""End-to-end window model and sequence driver.

Stage 1: average-pool the target frame's base feature over the window,
upsample, grid-sample every frame, fuse temporally and regress per-frame
parameters from the mean.  Stage 2: upsample again, sample every frame at its
own projected mesh, fuse the window spatially and refine the target.  Stage 3:
upsample the target once more, sample at the refined mesh and regress the
final parameters.
"""
from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numeric_core as nc
from .body_model import (
    BodyTemplate,
    DESK_TEMPLATE,
    PAPER_TEMPLATE,
    TemplateConfig,
    make_mini_template,
    mean_params,
    template_from_tensors,
    template_header,
    template_tensors,
)
from .pyramid import PyramidConfig, DeconvLayer, deconv_apply, grid_sample_features, init_deconv, project_sample_features
from .safm import SafmWeights, init_safm, pad_to_groups, safm_forward
from .tcfm import TcfmWeights, bottleneck_width, init_tcfm, tcfm_forward
from .tensor_io import FormatError, read_container, write_container


@dataclass(frozen=True)
class ModelConfig:
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    window: int = 9
    d_r: int = 256
    safm_hidden: tuple = (256, 128)
    reg_hidden: tuple = (1024, 1024)
    head_gain: float = 0.01

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window length must be odd (target = middle frame)")

    @property
    def target(self) -> int:
        return self.window // 2

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        p = dict(d["pyramid"])
        p["channels"] = tuple(p["channels"])
        return cls(pyramid=PyramidConfig(**p), window=d["window"], d_r=d["d_r"],
                   safm_hidden=tuple(d["safm_hidden"]), reg_hidden=tuple(d["reg_hidden"]),
                   head_gain=d["head_gain"])


PAPER_CONFIG = ModelConfig()
DESK_CONFIG = ModelConfig(
    pyramid=PyramidConfig(c0=8, channels=(8, 8, 8), h0=4, w0=4, c_m=5, grid_side=7),
    window=9, d_r=16, safm_hidden=(16, 8), reg_hidden=(64, 64),
)


@dataclass
class RegressorWeights:
    layers: list  # [in -> h1, h1 -> h2, h2 -> D]


@dataclass
class ModelWeights:
    deconv: list      # 3 DeconvLayer
    reduce: list      # 3 LinearLayer, C_k -> C_m
    tcfm: TcfmWeights
    safm: SafmWeights
    regressors: list  # 3 RegressorWeights


@dataclass
class StafModel:
    config: ModelConfig
    template: BodyTemplate
    weights: ModelWeights
    mean_params: np.ndarray

    @property
    def feature_lengths(self) -> tuple:
        p = self.config.pyramid
        return p.grid_feature_len(), p.mesh_feature_len(self.template.n_down), p.mesh_feature_len(self.template.n_down)

    def with_weights(self, weights: ModelWeights) -> "StafModel":
        return StafModel(self.config, self.template, weights, self.mean_params)


def init_regressor(rng, in_dim: int, hidden, out_dim: int, head_gain: float) -> RegressorWeights:
    h1, h2 = hidden
    return RegressorWeights([nc.init_linear(rng, in_dim, h1), nc.init_linear(rng, h1, h2),
                             nc.init_linear(rng, h2, out_dim, gain=head_gain)])


def init_model(config: ModelConfig, template: BodyTemplate, seed: int = 0) -> StafModel:
    p = config.pyramid
    D = template.param_dim
    s1, s2, s3 = p.grid_feature_len(), p.mesh_feature_len(template.n_down), p.mesh_feature_len(template.n_down)
    chans = p.level_channels
    rng = lambda name: nc.rng_for(seed, "model", name)  # noqa: E731
    weights = ModelWeights(
        deconv=[init_deconv(rng(f"deconv{k}"), chans[k], chans[k + 1]) for k in range(3)],
        reduce=[nc.init_linear(rng(f"reduce{k}"), chans[k + 1], p.c_m) for k in range(3)],
        tcfm=init_tcfm(rng("tcfm"), s1, bottleneck_width(s1)),
        safm=init_safm(rng("safm"), s2, config.d_r, config.safm_hidden),
        regressors=[init_regressor(rng(f"reg{k}"), s + D, config.reg_hidden, D, config.head_gain)
                    for k, s in enumerate((s1, s2, s3))],
    )
    return StafModel(config, template, weights, mean_params(template.n_joints_total))


def desk_model(seed: int = 0, template_seed: int = 0, config: ModelConfig = DESK_CONFIG,
               template_config: TemplateConfig = DESK_TEMPLATE) -> StafModel:
    return init_model(config, make_mini_template(template_config, template_seed), seed)


def paper_model(seed: int = 0, template_seed: int = 0) -> StafModel:
    return init_model(PAPER_CONFIG, make_mini_template(PAPER_TEMPLATE, template_seed), seed)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def apm(frames, axis: int = 0):
    """Elementwise mean over the frames axis."""
    shapes = np.shape(nc.value_of(frames))
    if len(shapes) == 0 or shapes[axis] < 1:
        raise ValueError("apm needs at least one frame")
    return nc.mean_axis(frames, axis=axis)


def apply_apm(window, target: int, axis: int = 0):
    """Replace frame ``target`` of ``window`` by the window mean; other frames untouched."""
    mean = apm(window, axis)
    nd = len(np.shape(nc.value_of(window)))
    axis = axis % nd
    T = np.shape(nc.value_of(window))[axis]
    pre = (slice(None),) * axis
    parts = []
    if target > 0:
        parts.append(window[pre + (slice(0, target),)])
    parts.append(nc.reshape(mean, np.shape(nc.value_of(mean))[:axis] + (1,) + np.shape(nc.value_of(mean))[axis:]))
    if target < T - 1:
        parts.append(window[pre + (slice(target + 1, T),)])
    return nc.concat(parts, axis=axis)


def ief_regress(feature, theta_in, w: RegressorWeights):
    """One iterative-error-feedback update: theta_in + MLP([feature, theta_in])."""
    first = w.layers[0]
    fs, ts = np.shape(nc.value_of(feature)), np.shape(nc.value_of(theta_in))
    if fs[:-1] != ts[:-1] or fs[-1] + ts[-1] != first.in_dim or w.layers[-1].out_dim != ts[-1]:
        raise ValueError(f"regressor expects feature+params width {first.in_dim}, got {fs} + {ts}")
    h = nc.concat([feature, theta_in], axis=-1)
    h = nc.tanh(nc.linear_apply(w.layers[0], h))
    h = nc.tanh(nc.linear_apply(w.layers[1], h))
    return theta_in + nc.linear_apply(w.layers[2], h)


@dataclass
class StafOutput:
    theta1: object   # (B, T, D) per-frame stage-1 parameters
    theta2: object   # (B, D)
    theta3: object   # (B, D)
    diagnostics: dict


def _finite(x, stage: str):
    if not np.all(np.isfinite(nc.value_of(x))):
        raise nc.NumericError(f"non-finite values at stage {stage}")
    return x


def staf_forward(window, model: StafModel, use_apm: bool = True, weights: Optional[ModelWeights] = None,
                 index=None) -> StafOutput:
    """Run one window (T, C0, H0, W0) or a batch of windows (B, T, C0, H0, W0).

    With ``index`` (B, T) given, ``window`` is instead a stack of distinct
    frames (F, C0, H0, W0) and window ``b`` is ``window[index[b]]``.  Frames
    shared between windows then go through the first two upsampling levels
    once; the result equals running the materialized windows.
    """
    cfg, tpl = model.config, model.template
    w = model.weights if weights is None else weights
    p = cfg.pyramid
    T, tgt = cfg.window, cfg.target
    arr = np.shape(nc.value_of(window))
    single = index is None and len(arr) == 4
    if index is None:
        if single:
            arr = (1,) + arr
        if len(arr) != 5 or arr[1:] != (T, p.c0, p.h0, p.w0):
            raise ValueError(f"window must be (B, {T}, {p.c0}, {p.h0}, {p.w0}), got {np.shape(nc.value_of(window))}")
        frames = nc.reshape(window, (arr[0] * T,) + arr[2:])
        index = np.arange(arr[0] * T).reshape(arr[0], T)
    else:
        frames = window
        index = np.asarray(index, dtype=np.int64)
        if arr[1:] != (p.c0, p.h0, p.w0) or len(arr) != 4:
            raise ValueError(f"frames must be (F, {p.c0}, {p.h0}, {p.w0}), got {arr}")
        if index.ndim != 2 or index.shape[1] != T or index.size == 0 or index.min() < 0 or index.max() >= arr[0]:
            raise ValueError(f"index must be (B, {T}) with entries in [0, {arr[0]})")
    _finite(frames, "input")
    B, D = index.shape[0], tpl.param_dim
    F = np.shape(nc.value_of(frames))[0]
    diag = {"level_sizes": [(p.h0, p.w0)]}

    if use_apm:
        # the target slot of each window reads the window mean, appended after the frames
        means = apm(nc.take_rows(frames, index), axis=1)
        frames = nc.concat([frames, means], axis=0)
        index = index.copy()
        index[:, tgt] = F + np.arange(B)
    phi1_u = _finite(deconv_apply(w.deconv[0], frames), "deconv1")
    f1 = _finite(grid_sample_features(phi1_u, w.reduce[0], p.grid_side), "grid_sample")
    z_ref, mats = tcfm_forward(nc.take_rows(f1, index), w.tcfm, return_matrices=True)
    theta0 = np.broadcast_to(model.mean_params, (B, T, D))
    theta1 = _finite(ief_regress(_finite(z_ref, "tcfm"), theta0, w.regressors[0]), "regressor1")

    phi2_u = _finite(deconv_apply(w.deconv[1], phi1_u), "deconv2")
    f2 = _finite(project_sample_features(nc.take_rows(phi2_u, index), theta1, tpl, w.reduce[1]), "project_sample2")
    phi_ref, alphas = safm_forward(pad_to_groups(f2, axis=1), w.safm)
    theta2 = _finite(ief_regress(_finite(phi_ref, "safm"), theta1[:, tgt], w.regressors[1]), "regressor2")

    phi3 = _finite(deconv_apply(w.deconv[2], nc.take_rows(phi2_u, index[:, tgt])), "deconv3")
    f3 = _finite(project_sample_features(phi3, theta2, tpl, w.reduce[2]), "project_sample3")
    theta3 = _finite(ief_regress(f3, theta2, w.regressors[2]), "regressor3")

    diag["level_sizes"] += [tuple(np.shape(nc.value_of(x))[-2:]) for x in (phi1_u, phi2_u, phi3)]
    diag["feature_lengths"] = tuple(np.shape(nc.value_of(x))[-1] for x in (f1, f2, f3))
    diag["tcfm_bottleneck"] = w.tcfm.q.out_dim
    diag.update(mats)
    diag["alphas"] = alphas
    if single:
        theta1, theta2, theta3 = theta1[0], theta2[0], theta3[0]
    return StafOutput(theta1, theta2, theta3, diag)


# --------------------------------------------------------------------------
# sequences
# --------------------------------------------------------------------------


def window_indices(L: int, T: int = 9) -> np.ndarray:
    """(L, T) 0-based frame indices; edges replicated so every target stays centered."""
    if L < 1:
        raise ValueError("sequence must contain at least one frame")
    half = T // 2
    return np.clip(np.arange(L)[:, None] + np.arange(-half, half + 1)[None, :], 0, L - 1)


def _forward_chunk(model: StafModel, frames: np.ndarray, index: np.ndarray, use_apm: bool) -> np.ndarray:
    return np.asarray(staf_forward(frames, model, use_apm=use_apm, index=index).theta3)


def run_sequence(frames, model: StafModel, use_apm: bool = True, chunk: int = 16, workers: int = 1) -> np.ndarray:
    """Final parameters (L, D) for every frame of an (L, C0, H0, W0) sequence.

    Windows are evaluated in fixed chunks; with ``workers > 1`` the chunks run
    in separate processes and the result is identical to the sequential run.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise ValueError("frames must be a non-empty (L, C, H, W) stack")
    idx = window_indices(frames.shape[0], model.config.window)
    jobs = []
    for i in range(0, len(idx), chunk):
        used, local = np.unique(idx[i:i + chunk], return_inverse=True)
        jobs.append((frames[used], local.reshape(-1, idx.shape[1])))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_forward_chunk, [model] * len(jobs), *zip(*jobs), [use_apm] * len(jobs)))
    else:
        outs = [_forward_chunk(model, f, i, use_apm) for f, i in jobs]
    return np.concatenate(outs, axis=0)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_model(model: StafModel, path) -> None:
    tensors = {"mean_params": model.mean_params}
    tensors.update(template_tensors(model.template, prefix="template."))
    for name, leaf in nc.tree_leaves(model.weights, "weights"):
        tensors[name] = np.asarray(nc.value_of(leaf))
    header = {"format": "staf-model/1", "config": model.config.to_json(),
              "template": template_header(model.template)}
    write_container(path, header, tensors)


def load_model(path) -> StafModel:
    header, tensors = read_container(path)
    if header.get("format") != "staf-model/1":
        raise FormatError(f"{path}: not a model checkpoint")
    config = ModelConfig.from_json(header["config"])
    template = template_from_tensors(header["template"], tensors, prefix="template.")
    skeleton = init_model(config, template, seed=0)
    leaves = []
    for name, leaf in nc.tree_leaves(skeleton.weights, "weights"):
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name}")
        if tensors[name].shape != leaf.shape:
            raise FormatError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {leaf.shape}")
        leaves.append(tensors[name])
    weights = nc.tree_unflatten(skeleton.weights, leaves)
    return StafModel(config, template, weights, tensors["mean_params"])
