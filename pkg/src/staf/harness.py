"""Synthetic sequences with exact ground truth, training and the APM ablation.

The stub encoder stands in for an image backbone: a fixed seeded linear map
from the ground-truth parameters (plus slow time features) to a feature map,
with seeded additive noise.  It is linear on purpose so a model has something
learnable to fit.
"""
from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from . import numeric_core as nc
from .body_model import BodyTemplate, TemplateConfig, make_mini_template
from .metrics import FrameAnnotation, LossWeights, accel_error, body_predictions, loss_total, mpjpe
from .pipeline import StafModel, desk_model, run_sequence, staf_forward, window_indices
from .pyramid import PyramidConfig
from .tensor_io import FormatError, digest, read_container, write_container

SEQUENCE_FORMAT = "staf-seq/1"
TIME_PERIOD = 64.0  # frames per cycle of the encoder's time features


@dataclass(frozen=True)
class SynthSpec:
    length: int = 60
    keyframes: int = 5
    pose_amp: float = 0.3      # radians
    shape_amp: float = 0.5
    cam_jitter: float = 0.05
    noise_sigma: float = 0.01
    time_amp: float = 0.1
    seed: int = 0
    encoder_seed: int = 0

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("sequence length must be >= 1")
        if self.keyframes < 2:
            raise ValueError("need at least 2 keyframes")
        for name in ("pose_amp", "shape_amp", "cam_jitter", "noise_sigma", "time_amp"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be a finite value >= 0")


def time_features(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    w = 2 * np.pi * t / TIME_PERIOD
    return np.stack([np.sin(w), np.cos(w)], axis=-1)


@dataclass
class StubEncoder:
    weight: np.ndarray       # (C*H*W, D + 2)
    feature_shape: tuple     # (C, H, W)
    noise_sigma: float
    time_amp: float
    noise_seed: int

    @classmethod
    def create(cls, pyramid: PyramidConfig, param_dim: int, encoder_seed: int, noise_sigma: float,
               time_amp: float, noise_seed: int) -> "StubEncoder":
        shape = (pyramid.c0, pyramid.h0, pyramid.w0)
        rng = nc.rng_for(encoder_seed, "encoder")
        W = rng.standard_normal((int(np.prod(shape)), param_dim + 2)) / np.sqrt(param_dim)
        return cls(W, shape, noise_sigma, time_amp, noise_seed)

    def encode(self, theta: np.ndarray, t: np.ndarray) -> np.ndarray:
        """(L, D) parameters at frame indices t -> (L, C, H, W) feature maps."""
        x = np.concatenate([theta, self.time_amp * time_features(t)], axis=-1)
        out = (x @ self.weight.T).reshape((len(theta),) + self.feature_shape)
        if self.noise_sigma > 0:
            for i, ti in enumerate(np.asarray(t)):
                out[i] += self.noise_sigma * nc.rng_for(self.noise_seed, "noise", int(ti)).standard_normal(self.feature_shape)
        return out


@dataclass
class Sequence:
    spec: SynthSpec
    template_config: TemplateConfig
    template_seed: int
    template_hash: str
    theta: np.ndarray       # (L, D)
    phi0: np.ndarray        # (L, C0, H0, W0)
    joints3d: np.ndarray    # (L, J+1, 3) mm
    joints2d: np.ndarray    # (L, J+1, 2)
    vertices: np.ndarray    # (L, N, 3) mm

    @property
    def length(self) -> int:
        return len(self.theta)

    def template(self) -> BodyTemplate:
        tpl = make_mini_template(self.template_config, self.template_seed)
        if tpl.fingerprint() != self.template_hash:
            raise FormatError("template fingerprint does not match the sequence")
        return tpl


def gt_trajectory(spec: SynthSpec, n_joints_total: int) -> np.ndarray:
    """Smooth (L, D) ground truth: cubic interpolation between seeded keyframes."""
    rng = nc.rng_for(spec.seed, "keyframes")
    K, L = spec.keyframes, spec.length
    pose_keys = spec.pose_amp * rng.standard_normal((K, 3 * n_joints_total))
    beta = spec.shape_amp * rng.standard_normal(10)
    cam_keys = spec.cam_jitter * rng.standard_normal((K, 3))
    cam_keys[:, 0] += 1.0
    keys = np.concatenate([pose_keys, np.broadcast_to(beta, (K, 10)), cam_keys], axis=1)
    if L == 1:
        return keys[:1].copy()
    knots = np.linspace(0.0, L - 1, K)
    return CubicSpline(knots, keys, axis=0, bc_type="natural")(np.arange(L, dtype=np.float64))


def generate_synthetic(spec: SynthSpec, template_config: TemplateConfig, pyramid: PyramidConfig,
                       template_seed: int = 0) -> Sequence:
    template = make_mini_template(template_config, template_seed)
    theta = gt_trajectory(spec, template.n_joints_total)
    enc = StubEncoder.create(pyramid, template.param_dim, spec.encoder_seed, spec.noise_sigma,
                             spec.time_amp, noise_seed=spec.seed)
    phi0 = enc.encode(theta, np.arange(spec.length))
    pred = body_predictions(theta, template)
    return Sequence(spec, template_config, template_seed, template.fingerprint(), theta, phi0,
                    pred["joints3d"], pred["joints2d"], pred["verts"])


SEQUENCE_TENSORS = ("theta", "phi0", "joints3d", "joints2d", "vertices")


def save_sequence(seq: Sequence, path) -> None:
    header = {
        "format": SEQUENCE_FORMAT,
        "L": seq.length,
        "spec": dataclasses.asdict(seq.spec),
        "template": {"config": dataclasses.asdict(seq.template_config), "seed": seq.template_seed,
                     "hash": seq.template_hash},
        "feature_shape": list(seq.phi0.shape[1:]),
    }
    write_container(path, header, {k: getattr(seq, k) for k in SEQUENCE_TENSORS})


def load_sequence(path) -> Sequence:
    header, tensors = read_container(path)
    if header.get("format") != SEQUENCE_FORMAT:
        raise FormatError(f"{path}: not a sequence file")
    missing = [k for k in SEQUENCE_TENSORS if k not in tensors]
    if missing:
        raise FormatError(f"{path}: missing tensors {missing}")
    L = header["L"]
    if any(tensors[k].shape[0] != L for k in SEQUENCE_TENSORS):
        raise FormatError(f"{path}: tensor lengths disagree with L={L}")
    tpl = header["template"]
    return Sequence(SynthSpec(**header["spec"]), TemplateConfig(**tpl["config"]), tpl["seed"], tpl["hash"],
                    *(tensors[k] for k in SEQUENCE_TENSORS))


def sequence_digest(seq: Sequence) -> str:
    return digest(*(getattr(seq, k) for k in SEQUENCE_TENSORS))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class WindowDataset:
    frames: np.ndarray      # (F, C0, H0, W0) distinct frames of all sequences
    index: np.ndarray       # (B, T) window b reads frames[index[b]]
    theta: np.ndarray       # (B, D) target-frame ground truth
    joints3d: np.ndarray    # (B, J+1, 3) mm
    joints2d: np.ndarray    # (B, J+1, 2)

    def __len__(self) -> int:
        return len(self.index)

    def windows(self) -> np.ndarray:
        return self.frames[self.index]

    def annotation(self) -> FrameAnnotation:
        return FrameAnnotation(gt_theta=self.theta, gt_joints3d=self.joints3d, gt_joints2d=self.joints2d)


def make_dataset(sequences, T: int = 9) -> WindowDataset:
    """One window per frame of every sequence, target = the frame itself."""
    frames, index, theta, j3, j2 = [], [], [], [], []
    offset = 0
    for seq in sequences:
        frames.append(seq.phi0)
        index.append(window_indices(seq.length, T) + offset)
        offset += seq.length
        theta.append(seq.theta)
        j3.append(seq.joints3d)
        j2.append(seq.joints2d)
    cat = lambda xs: np.concatenate(xs, axis=0)  # noqa: E731
    return WindowDataset(cat(frames), cat(index), cat(theta), cat(j3), cat(j2))


def dataset_for_model(model: StafModel, specs) -> WindowDataset:
    """Generate one sequence per spec on the model's template and feature shape."""
    tpl = model.template
    tcfg = TemplateConfig(tpl.n_verts, tpl.n_joints_total - 1, tpl.n_down)
    seqs = [generate_synthetic(spec, tcfg, model.config.pyramid) for spec in specs]
    return make_dataset(seqs, model.config.window)


def desk_dataset(n_sequences: int = 5, length: int = 40, seed: int = 0, model: Optional[StafModel] = None,
                 **spec_kw) -> WindowDataset:
    """The overfit set: ``n_sequences`` x ``length`` windows (200 by default)."""
    model = desk_model() if model is None else model
    specs = [SynthSpec(length=length, seed=seed * 1000 + i, **spec_kw) for i in range(n_sequences)]
    return dataset_for_model(model, specs)


def dataset_loss(model: StafModel, data: WindowDataset, weights=None, lam: LossWeights = LossWeights(),
                 use_apm: bool = True):
    """Mean per-window loss of the final estimate; differentiable in ``weights``."""
    out = staf_forward(data.frames, model, use_apm=use_apm, weights=weights, index=data.index)
    pred = body_predictions(out.theta3, model.template)
    per = loss_total(pred, data.annotation(), lam)
    return nc.mean_axis(per, axis=0), out


def dataset_mpjpe(model: StafModel, data: WindowDataset, use_apm: bool = True) -> float:
    out = staf_forward(data.frames, model, use_apm=use_apm, index=data.index)
    pred = body_predictions(np.asarray(out.theta3), model.template)
    return mpjpe(pred["joints3d"], data.joints3d)[1]


@dataclass
class TrainResult:
    model: StafModel
    losses: list
    lrs: list
    mpjpe_initial: float = float("nan")
    mpjpe_final: float = float("nan")
    stopped_early: bool = False


def train_overfit(model: StafModel, data: WindowDataset, steps: int = 2000, lr: float = 1e-2, *,
                  lam: LossWeights = LossWeights(), patience: int = 50, min_lr: float = 0.0,
                  target_ratio: Optional[float] = None, use_apm: bool = True, optimizer: str = "gd",
                  log=None) -> TrainResult:
    """Full-batch descent on the mean window loss.

    ``optimizer`` is ``"gd"`` (plain gradient steps) or ``"adam"``.  The
    learning rate drops by 10x when the loss has not improved for ``patience``
    steps.  With ``target_ratio`` set, training stops once the loss falls below
    that fraction of its initial value.
    """
    if steps < 0 or lr < 0:
        raise ValueError("steps and lr must be >= 0")
    if optimizer not in ("gd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    leaves = [np.array(v, dtype=np.float64) for _, v in nc.tree_leaves(model.weights)]
    m1 = [np.zeros_like(v) for v in leaves]
    m2 = [np.zeros_like(v) for v in leaves]
    b1, b2, eps = 0.9, 0.999, 1e-8
    losses, lrs = [], []
    best, since = np.inf, 0
    mp0 = dataset_mpjpe(model, data, use_apm)
    stopped = False
    for step in range(steps + 1):
        params = [nc.Var(v) for v in leaves]
        w = nc.tree_unflatten(model.weights, params)
        loss, _ = dataset_loss(model, data, w, lam, use_apm)
        value = float(nc.value_of(loss))
        if not np.isfinite(value):
            raise nc.NumericError(f"non-finite loss at step {step}")
        losses.append(value)
        lrs.append(lr)
        if log is not None and (step % 100 == 0 or step == steps):
            log(f"step {step:5d}  loss {value:.6f}  lr {lr:.2e}")
        if step == steps or (target_ratio is not None and value < target_ratio * losses[0]):
            stopped = step < steps
            break
        if value < best * (1 - 1e-4):
            best, since = value, 0
        else:
            since += 1
            if since >= patience and lr > min_lr:
                lr *= 0.1
                since = 0
        if lr == 0:
            continue
        grads = nc.backward(loss, params)
        if optimizer == "gd":
            leaves = [v - lr * g for v, g in zip(leaves, grads)]
            continue
        k = step + 1
        for i, g in enumerate(grads):
            m1[i] = b1 * m1[i] + (1 - b1) * g
            m2[i] = b2 * m2[i] + (1 - b2) * g * g
            step_dir = (m1[i] / (1 - b1 ** k)) / (np.sqrt(m2[i] / (1 - b2 ** k)) + eps)
            leaves[i] = leaves[i] - lr * step_dir
    trained = model.with_weights(nc.tree_unflatten(model.weights, leaves))
    return TrainResult(trained, losses, lrs, mp0, dataset_mpjpe(trained, data, use_apm), stopped)


# --------------------------------------------------------------------------
# APM ablation
# --------------------------------------------------------------------------


@dataclass
class AblationReport:
    seeds: list
    accel_on: list
    accel_off: list
    median_on: float = field(init=False)
    median_off: float = field(init=False)

    def __post_init__(self):
        self.median_on = float(np.median(self.accel_on))
        self.median_off = float(np.median(self.accel_off))

    def rows(self):
        for s, a, b in zip(self.seeds, self.accel_on, self.accel_off):
            yield s, a, b


def _ablate_one(seed: int, length: int, fps: Optional[float], spec_kw: dict) -> tuple:
    model = desk_model(seed=seed)
    tcfg = TemplateConfig(model.template.n_verts, model.template.n_joints_total - 1, model.template.n_down)
    seq = generate_synthetic(SynthSpec(length=length, seed=seed, **spec_kw), tcfg, model.config.pyramid)
    res = []
    for use_apm in (True, False):
        theta = run_sequence(seq.phi0, model, use_apm=use_apm)
        joints = body_predictions(theta, model.template)["joints3d"]
        res.append(accel_error(joints, seq.joints3d, fps)[1])
    return tuple(res)


def ablate_apm(seeds, length: int = 60, fps: Optional[float] = None, workers: int = 1, **spec_kw) -> AblationReport:
    """Per seed: a fresh random model and sequence, accel error with APM on and off."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("ablation needs at least 2 seeds")
    args = [(s, length, fps, spec_kw) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_ablate_one, *zip(*args)))
    else:
        out = [_ablate_one(*a) for a in args]
    return AblationReport(seeds, [o[0] for o in out], [o[1] for o in out])
