"""Spatial alignment fusion: shared three-way attention applied level by level.

A window of 3**n mesh-aligned features is integrated in groups of three
(past, current, future) until a single refined feature remains.  Every
integration uses the same weights.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import numeric_core as nc

GROUP = 3


@dataclass
class SafmWeights:
    fc_reduce: nc.LinearLayer       # S -> d_r, shared across the three inputs
    head: list                      # three LinearLayers, 3*d_r -> ... -> 3

    @property
    def width(self) -> int:
        return self.fc_reduce.in_dim


def init_safm(rng: np.random.Generator, S: int, d_r: int, hidden=None) -> SafmWeights:
    h1, h2 = hidden if hidden is not None else (d_r, max(d_r // 2, 1))
    return SafmWeights(
        fc_reduce=nc.init_linear(rng, S, d_r),
        head=[nc.init_linear(rng, GROUP * d_r, h1), nc.init_linear(rng, h1, h2), nc.init_linear(rng, h2, GROUP)],
    )


def _attention_weights(group, w: SafmWeights):
    """group (..., 3, S) -> alpha (..., 3)."""
    reduced = nc.linear_apply(w.fc_reduce, group)
    shape = np.shape(nc.value_of(reduced))
    h = nc.reshape(reduced, shape[:-2] + (shape[-2] * shape[-1],))
    h = nc.tanh(nc.linear_apply(w.head[0], h))
    h = nc.tanh(nc.linear_apply(w.head[1], h))
    return nc.softmax_rows(nc.linear_apply(w.head[2], h))


def _integrate_groups(group, w: SafmWeights):
    """(..., 3, S) -> ((..., S), alpha (..., 3))."""
    alpha = _attention_weights(group, w)
    shape = np.shape(nc.value_of(alpha))
    out = nc.sum_(nc.reshape(alpha, shape + (1,)) * group, axis=-2)
    return out, alpha


def attention_integrate(f1, f2, f3, w: SafmWeights):
    """Convex combination of three equal-length features; returns (feature, alpha)."""
    shapes = {np.shape(nc.value_of(f)) for f in (f1, f2, f3)}
    if len(shapes) != 1 or next(iter(shapes))[-1] != w.width:
        raise ValueError(f"attention inputs must all have width {w.width}")
    return _integrate_groups(nc.stack([f1, f2, f3], axis=-2), w)


def _levels(count: int) -> int:
    n, c = 0, count
    while c > 1 and c % GROUP == 0:
        c //= GROUP
        n += 1
    if c != 1 or n == 0:
        raise ValueError(f"SAFM needs 3**n features (n >= 1), got {count}")
    return n


def safm_forward(features, w: SafmWeights):
    """Refine a window of features (..., 3**n, S) (default 9) into (..., S).

    Returns ``(refined, alphas)``; ``alphas[l]`` holds the (..., groups, 3)
    attention weights of level ``l``.
    """
    shape = np.shape(nc.value_of(features))
    if len(shape) < 2 or shape[-1] != w.width:
        raise ValueError(f"SAFM expects (..., 3**n, {w.width}) features, got {shape}")
    levels = _levels(shape[-2])
    lead, S = shape[:-2], shape[-1]
    x = features
    alphas = []
    count = shape[-2]
    for _ in range(levels):
        count //= GROUP
        groups = nc.reshape(x, lead + (count, GROUP, S))
        x, alpha = _integrate_groups(groups, w)
        alphas.append(alpha)
    return nc.reshape(x, lead + (S,)), alphas


def pad_to_groups(features, axis: int = -2):
    """Edge-replicate a (..., T, S) window to the next power of three, target kept centered."""
    T = np.shape(nc.value_of(features))[axis]
    n = GROUP
    while n < T:
        n *= GROUP
    extra = n - T
    if extra == 0:
        return features
    left, right = extra // 2, extra - extra // 2
    idx = np.concatenate([np.zeros(left, dtype=np.int64), np.arange(T), np.full(right, T - 1)])
    index = [slice(None)] * len(np.shape(nc.value_of(features)))
    index[axis] = idx
    return nc.getitem(features, tuple(index))


def write_alpha_csv(path, alphas, frame_ids=None) -> None:
    """Rows ``frame,level,group,a1,a2,a3``; ``alphas`` as returned by safm_forward for (W, ...) batches."""
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["frame", "level", "group", "a1", "a2", "a3"])
        arrs = [np.asarray(nc.value_of(a)) for a in alphas]
        arrs = [a.reshape(-1, a.shape[-2], GROUP) for a in arrs]
        n = arrs[0].shape[0]
        ids = list(range(n)) if frame_ids is None else list(frame_ids)
        for wi in range(n):
            for lvl, a in enumerate(arrs):
                for g in range(a.shape[1]):
                    out.writerow([ids[wi], lvl + 1, g] + [repr(float(x)) for x in a[wi, g]])
