"""Temporal coherence fusion over a window of per-frame feature vectors.

Two T x T correlation matrices are built, a learned one from projected
queries/keys and a parameter-free one from raw feature similarity.  A per-entry
two-channel map fuses them into the guidance matrix that mixes the value
projections; the result is added back to the input.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import numeric_core as nc


@dataclass
class TcfmWeights:
    q: nc.LinearLayer
    k: nc.LinearLayer
    v: nc.LinearLayer
    fuse: nc.LinearLayer  # 2 -> 1, applied per matrix entry
    u: nc.LinearLayer

    @property
    def width(self) -> int:
        return self.q.in_dim


def bottleneck_width(S: int) -> int:
    return S // 2


def init_tcfm(rng: np.random.Generator, S: int, S_b: int | None = None) -> TcfmWeights:
    S_b = bottleneck_width(S) if S_b is None else S_b
    return TcfmWeights(
        q=nc.init_linear(rng, S, S_b),
        k=nc.init_linear(rng, S, S_b),
        v=nc.init_linear(rng, S, S_b),
        fuse=nc.LinearLayer(np.array([[1.0, 1.0]]), np.zeros(1)),
        u=nc.init_linear(rng, S_b, S, gain=0.1),
    )


def _check_width(z, w: TcfmWeights):
    S = np.shape(nc.value_of(z))[-1]
    if S != w.width:
        raise ValueError(f"TCFM expects feature width {w.width}, got {S}")


def correlation_matrices(z_inp, w: TcfmWeights):
    """(M_con, M_sim) for features (..., T, S); both row-stochastic (..., T, T)."""
    _check_width(z_inp, w)
    zq = nc.linear_apply(w.q, z_inp)
    zk = nc.linear_apply(w.k, z_inp)
    m_con = nc.softmax_rows(nc.matmul(zq, nc.swap_last(zk)))
    m_sim = nc.softmax_rows(nc.matmul(z_inp, nc.swap_last(z_inp)))
    return m_con, m_sim


def fuse_guidance(m_con, m_sim, fuse: nc.LinearLayer):
    """softmax_rows(F(stack(M_con, M_sim))) with F a 1x1 two-to-one channel map."""
    sc, ss = np.shape(nc.value_of(m_con)), np.shape(nc.value_of(m_sim))
    if sc != ss or sc[-1] != sc[-2]:
        raise ValueError(f"guidance inputs must be matching square matrices, got {sc} and {ss}")
    if (fuse.in_dim, fuse.out_dim) != (2, 1):
        raise ValueError("fusion map must be 2 -> 1")
    stacked = nc.stack([m_con, m_sim], axis=-1)
    logits = nc.reshape(nc.linear_apply(fuse, stacked), sc)
    return nc.softmax_rows(logits)


def tcfm_forward(z_inp, w: TcfmWeights, return_matrices: bool = False):
    """Z_ref = Z_inp + U(M_g V(Z_inp)) for features (..., T, S)."""
    m_con, m_sim = correlation_matrices(z_inp, w)
    m_g = fuse_guidance(m_con, m_sim, w.fuse)
    mixed = nc.matmul(m_g, nc.linear_apply(w.v, z_inp))
    z_ref = z_inp + nc.linear_apply(w.u, mixed)
    if return_matrices:
        return z_ref, {"m_con": m_con, "m_sim": m_sim, "m_g": m_g}
    return z_ref


def write_matrices_csv(path, matrices: dict, frame_ids=None) -> None:
    """Rows ``window,matrix,row,c0..c{T-1}`` for (W, T, T) or (T, T) matrices."""
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        first = np.asarray(nc.value_of(next(iter(matrices.values()))))
        T = first.shape[-1]
        out.writerow(["window", "matrix", "row"] + [f"c{j}" for j in range(T)])
        stacks = {k: np.asarray(nc.value_of(m)).reshape(-1, T, T) for k, m in matrices.items()}
        n = next(iter(stacks.values())).shape[0]
        ids = list(range(n)) if frame_ids is None else list(frame_ids)
        for wi in range(n):
            for name, m in stacks.items():
                for r in range(T):
                    out.writerow([ids[wi], name, r] + [repr(float(x)) for x in m[wi, r]])
