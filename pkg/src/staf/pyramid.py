"""Deconvolution feature pyramid and the two point-sampling pathways.

Level 1 features are read on a regular grid; levels 2 and 3 are read at the
weak-perspective projections of the downsampled mesh.  Every sampled point is
reduced from ``C_k`` to ``C_m`` channels before concatenation, so the output
length is ``points * C_m`` in point-major order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric_core as nc
from .body_model import BodyTemplate, downsample_verts, lbs_forward, project_weak_perspective, split_params


@dataclass(frozen=True)
class PyramidConfig:
    c0: int = 2048
    channels: tuple = (2048, 2048, 2048)  # C_1..C_3
    h0: int = 7
    w0: int = 7
    c_m: int = 5
    grid_side: int = 21

    def __post_init__(self):
        if len(self.channels) != 3 or min((self.c0, self.h0, self.w0, self.c_m, self.grid_side) + tuple(self.channels)) < 1:
            raise ValueError(f"invalid pyramid config {self}")

    @property
    def sizes(self) -> list:
        """(H_k, W_k) for k = 0..3; each level doubles the previous one."""
        return [(self.h0 << k, self.w0 << k) for k in range(4)]

    @property
    def level_channels(self) -> list:
        return [self.c0, *self.channels]

    def grid_feature_len(self) -> int:
        return self.grid_side ** 2 * self.c_m

    def mesh_feature_len(self, n_down: int) -> int:
        return n_down * self.c_m


PAPER_PYRAMID = PyramidConfig()


@dataclass
class DeconvLayer:
    weight: object  # C_out x C_in x 4 x 4
    bias: object    # C_out

    @property
    def in_channels(self) -> int:
        return int(np.shape(nc.value_of(self.weight))[1])

    @property
    def out_channels(self) -> int:
        return int(np.shape(nc.value_of(self.weight))[0])


def init_deconv(rng: np.random.Generator, c_in: int, c_out: int) -> DeconvLayer:
    # each output pixel receives 4 kernel taps per input channel
    std = 1.0 / np.sqrt(4.0 * c_in)
    return DeconvLayer(rng.standard_normal((c_out, c_in, nc.KERNEL, nc.KERNEL)) * std, np.zeros(c_out))


def deconv_apply(layer: DeconvLayer, fmap):
    """Learned 2x upsampling: (..., C_in, H, W) -> (..., C_out, 2H, 2W)."""
    return nc.deconv(fmap, layer.weight, layer.bias)


def grid_points(side: int) -> np.ndarray:
    """``side**2`` points evenly covering [-1, 1]^2, row-major (y outer, x inner)."""
    lin = np.linspace(-1.0, 1.0, side) if side > 1 else np.zeros(1)
    ys, xs = np.meshgrid(lin, lin, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=-1)


def _sample_reduce(fmap, pts, reduce: nc.LinearLayer):
    """bilinear sample + per-point channel reduction, flattened point-major."""
    C = np.shape(nc.value_of(fmap))[-3]
    if reduce.in_dim != C:
        raise ValueError(f"reduce layer expects {reduce.in_dim} channels, map has {C}")
    sampled = nc.bilinear_sample(fmap, pts)
    reduced = nc.linear_apply(reduce, sampled)
    shape = np.shape(nc.value_of(reduced))
    return nc.reshape(reduced, shape[:-2] + (shape[-2] * shape[-1],))


def grid_sample_features(fmap, reduce: nc.LinearLayer, grid_side: int):
    """(..., C, H, W) -> (..., grid_side**2 * C_m)."""
    lead = np.shape(nc.value_of(fmap))[:-3]
    pts = np.broadcast_to(grid_points(grid_side), lead + (grid_side ** 2, 2))
    return _sample_reduce(fmap, pts, reduce)


def mesh_projection(params, template: BodyTemplate):
    """Projected downsampled vertices (..., Ñ, 2) in normalized image units."""
    theta, beta, s, t = split_params(params, template.n_joints_total)
    verts = lbs_forward(template, beta, theta)
    return project_weak_perspective(downsample_verts(template, verts), s, t)


def project_sample_features(fmap, params, template: BodyTemplate, reduce: nc.LinearLayer):
    """(..., C, H, W) sampled at the projected sparse mesh of (..., D) params -> (..., Ñ * C_m)."""
    D = np.shape(nc.value_of(params))[-1]
    if D != template.param_dim:
        raise ValueError(f"parameter length {D} does not match template ({template.param_dim})")
    if np.shape(nc.value_of(params))[:-1] != np.shape(nc.value_of(fmap))[:-3]:
        raise ValueError("params and feature maps must share leading dimensions")
    return _sample_reduce(fmap, mesh_projection(params, template), reduce)
