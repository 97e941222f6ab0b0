"""Parametric body: shape/pose -> skinned mesh, joints, sparse mesh, 2D projection.

Parameter vector layout (``D = 3 * (J + 1) + 13``)::

    [ theta (3 * (J + 1), axis-angle, root first) | beta (10) | s | t_x | t_y ]

The root rotation rotates the whole body about the origin, so
``lbs(beta, root + rest) == rodrigues(root) @ lbs(beta, rest)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numeric_core as nc
from .tensor_io import FormatError, digest, read_container, write_container

N_BETAS = 10


def param_dim(n_joints_total: int) -> int:
    return 3 * n_joints_total + N_BETAS + 3


@dataclass(frozen=True)
class TemplateConfig:
    n_verts: int = 120
    n_joints: int = 7  # J; the template has J + 1 joints including the root
    n_down: int = 24


PAPER_TEMPLATE = TemplateConfig(n_verts=6890, n_joints=23, n_down=431)
DESK_TEMPLATE = TemplateConfig(n_verts=120, n_joints=7, n_down=24)


@dataclass
class BodyTemplate:
    rest_vertices: np.ndarray      # N x 3, meters
    shape_dirs: np.ndarray         # N x 3 x 10
    joint_regressor: np.ndarray    # (J+1) x N
    skin_weights: np.ndarray       # N x (J+1)
    parents: tuple                 # J+1 ints, parents[0] == -1
    downsample: np.ndarray         # Ñ x N
    pose_dirs: Optional[np.ndarray] = None  # N x 3 x 9J, only for user-supplied full templates

    def __post_init__(self):
        self.parents = tuple(int(p) for p in self.parents)
        self.validate()

    @property
    def n_verts(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def n_joints_total(self) -> int:
        return len(self.parents)

    @property
    def n_down(self) -> int:
        return self.downsample.shape[0]

    @property
    def param_dim(self) -> int:
        return param_dim(self.n_joints_total)

    def validate(self) -> None:
        N = self.rest_vertices.shape[0]
        J1 = len(self.parents)
        checks = [
            (self.rest_vertices.shape == (N, 3), "rest_vertices must be N x 3"),
            (self.shape_dirs.shape == (N, 3, N_BETAS), "shape_dirs must be N x 3 x 10"),
            (self.joint_regressor.shape == (J1, N), "joint_regressor must be (J+1) x N"),
            (self.skin_weights.shape == (N, J1), "skin_weights must be N x (J+1)"),
            (self.downsample.ndim == 2 and self.downsample.shape[1] == N, "downsample must be Ñ x N"),
            (self.downsample.shape[0] <= N, "Ñ must not exceed N"),
            (self.parents[0] == -1, "joint 0 must be the root"),
            (all(0 <= p < i for i, p in enumerate(self.parents) if i > 0),
             "parents must precede children"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"invalid template: {msg}")
        for name in ("skin_weights", "joint_regressor", "downsample"):
            rows = getattr(self, name).sum(axis=1)
            if np.max(np.abs(rows - 1.0)) > 1e-9:
                raise ValueError(f"invalid template: {name} rows must sum to 1")
        arrays = [self.rest_vertices, self.shape_dirs, self.joint_regressor, self.skin_weights, self.downsample]
        if self.pose_dirs is not None:
            if self.pose_dirs.shape != (N, 3, 9 * (J1 - 1)):
                raise ValueError("invalid template: pose_dirs must be N x 3 x 9J")
            arrays.append(self.pose_dirs)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("invalid template: non-finite entries")

    def fingerprint(self) -> str:
        arrays = [self.rest_vertices, self.shape_dirs, self.joint_regressor, self.skin_weights,
                  self.downsample, np.asarray(self.parents, dtype=float)]
        if self.pose_dirs is not None:
            arrays.append(self.pose_dirs)
        return digest(*arrays)


@dataclass
class BodyParams:
    theta: np.ndarray   # 3 * (J+1)
    beta: np.ndarray    # 10
    cam_s: float
    cam_t: np.ndarray   # 2

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.theta), np.ravel(self.beta), [float(self.cam_s)],
                               np.ravel(self.cam_t)]).astype(np.float64)

    @classmethod
    def from_vector(cls, vec, n_joints_total: int) -> "BodyParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (param_dim(n_joints_total),):
            raise ValueError(f"parameter vector must have length {param_dim(n_joints_total)}")
        k = 3 * n_joints_total
        return cls(vec[:k].copy(), vec[k:k + N_BETAS].copy(), float(vec[k + N_BETAS]),
                   vec[k + N_BETAS + 1:].copy())

    @classmethod
    def mean(cls, n_joints_total: int) -> "BodyParams":
        return cls(np.zeros(3 * n_joints_total), np.zeros(N_BETAS), 1.0, np.zeros(2))


def mean_params(n_joints_total: int) -> np.ndarray:
    return BodyParams.mean(n_joints_total).to_vector()


def split_params(params, n_joints_total: int):
    """(theta, beta, s, t) views of a (..., D) parameter array or Var."""
    k = 3 * n_joints_total
    return (params[..., :k], params[..., k:k + N_BETAS], params[..., k + N_BETAS],
            params[..., k + N_BETAS + 1:k + N_BETAS + 3])


# --------------------------------------------------------------------------
# rotations
# --------------------------------------------------------------------------

_SMALL = 1e-8
_SERIES = 1e-2


def _skew(v):
    z = np.zeros(v.shape[:-1])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], -1),
        np.stack([v[..., 2], z, -v[..., 0]], -1),
        np.stack([-v[..., 1], v[..., 0], z], -1),
    ], -2)


def _unskew_adj(G):
    """s(G) such that <G, skew(v)> = s(G) . v"""
    return np.stack([G[..., 2, 1] - G[..., 1, 2], G[..., 0, 2] - G[..., 2, 0],
                     G[..., 1, 0] - G[..., 0, 1]], -1)


def _rodrigues_coeffs(th):
    """A = sin/th, B = (1-cos)/th^2 and their derivatives divided by th."""
    small = th < _SERIES
    ts = np.where(small, 1.0, th)
    t2 = th * th
    A = np.where(small, 1 - t2 / 6 + t2 * t2 / 120 - t2 ** 3 / 5040, np.sin(ts) / ts)
    B = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720 - t2 ** 3 / 40320, (1 - np.cos(ts)) / ts ** 2)
    dA = np.where(small, -1 / 3 + t2 / 30 - t2 * t2 / 840,
                  (ts * np.cos(ts) - np.sin(ts)) / ts ** 3)
    dB = np.where(small, -1 / 12 + t2 / 180 - t2 * t2 / 6720,
                  (ts * np.sin(ts) - 2 * (1 - np.cos(ts))) / ts ** 4)
    tiny = th < _SMALL
    # first-order expansion R = I + [aa]x below _SMALL
    A = np.where(tiny, 1.0, A)
    B = np.where(tiny, 0.0, B)
    dA = np.where(tiny, 0.0, dA)
    dB = np.where(tiny, 0.0, dB)
    return A, B, dA, dB


def _rodrigues_fwd(aa):
    aa = np.asarray(aa, dtype=np.float64)
    if aa.shape[-1] != 3:
        raise ValueError("rodrigues expects (..., 3) axis-angle vectors")
    th = np.sqrt(np.sum(aa * aa, axis=-1))
    A, B, dA, dB = _rodrigues_coeffs(th)
    K = _skew(aa)
    K2 = K @ K
    R = np.eye(3) + A[..., None, None] * K + B[..., None, None] * K2
    return R, (aa, K, K2, A, B, dA, dB)


def _rodrigues_bwd(ctx, G, needs):
    aa, K, K2, A, B, dA, dB = ctx
    KT = np.swapaxes(K, -1, -2)
    gK = np.sum(G * K, axis=(-2, -1))
    gK2 = np.sum(G * K2, axis=(-2, -1))
    g = (A[..., None] * _unskew_adj(G)
         + B[..., None] * _unskew_adj(G @ KT + KT @ G)
         + (dA * gK + dB * gK2)[..., None] * aa)
    return (g,)


RODRIGUES = nc.Op("rodrigues", _rodrigues_fwd, _rodrigues_bwd)


def rodrigues(aa):
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3)."""
    return nc.apply(RODRIGUES, aa)


def _fk_fwd(rots, joints, parents):
    # translations are built as A_i = A_p + Rw_p (I - R_i) j_i so an identity pose
    # yields exactly zero offsets (the root turns about the origin, A_0 = 0)
    M, J1 = rots.shape[:2]
    Rw = np.empty_like(rots)
    At = np.zeros((M, J1, 3))
    Rw[:, 0] = rots[:, 0]
    for i in range(1, J1):
        p = parents[i]
        Rw[:, i] = Rw[:, p] @ rots[:, i]
        off = joints[:, i] - np.einsum("mij,mj->mi", rots[:, i], joints[:, i])
        At[:, i] = At[:, p] + np.einsum("mij,mj->mi", Rw[:, p], off)
    A = np.empty((M, J1, 3, 4))
    A[..., :3] = Rw
    A[..., 3] = At
    return A, (rots, joints, Rw, parents)


def _fk_bwd(ctx, gA, needs):
    rots, joints, Rw, parents = ctx
    J1 = rots.shape[1]
    gRw = gA[..., :3].copy()
    gAt = gA[..., 3].copy()
    gj = np.zeros_like(joints)
    gR = np.zeros_like(rots)
    for i in range(J1 - 1, 0, -1):
        p = parents[i]
        g = gAt[:, i]
        gAt[:, p] += g
        outer = g[..., :, None] * joints[:, i][..., None, :]
        gRw[:, p] += outer
        gRw[:, i] -= outer
        gj[:, i] += np.einsum("mij,mi->mj", Rw[:, p] - Rw[:, i], g)
        gR[:, i] += np.swapaxes(Rw[:, p], -1, -2) @ gRw[:, i]
        gRw[:, p] += gRw[:, i] @ np.swapaxes(rots[:, i], -1, -2)
    gR[:, 0] += gRw[:, 0]
    return gR, gj


FORWARD_KINEMATICS = nc.Op("forward_kinematics", _fk_fwd, _fk_bwd)


def forward_kinematics(rots, joints, parents):
    """Relative skinning transforms (M, J+1, 3, 4) from local rotations and rest joints."""
    return nc.apply(FORWARD_KINEMATICS, rots, joints, parents=tuple(parents))


# --------------------------------------------------------------------------
# mesh
# --------------------------------------------------------------------------


_IDENTITY_34 = np.eye(3, 4)


def lbs_forward(template: BodyTemplate, beta, theta):
    """Skinned vertices (..., N, 3) for shape (..., 10) and pose (..., 3(J+1))."""
    N, J1 = template.n_verts, template.n_joints_total
    bshape, tshape = np.shape(nc.value_of(beta)), np.shape(nc.value_of(theta))
    if bshape[-1:] != (N_BETAS,) or tshape[-1:] != (3 * J1,) or bshape[:-1] != tshape[:-1]:
        raise ValueError(f"lbs_forward: beta {bshape} / theta {tshape} do not match template (J+1={J1})")
    lead = bshape[:-1]
    M = int(np.prod(lead, dtype=np.int64))
    b = nc.reshape(beta, (M, N_BETAS))
    rots = rodrigues(nc.reshape(theta, (M, J1, 3)))
    v_shaped = nc.linear(b, template.shape_dirs.reshape(N * 3, N_BETAS), template.rest_vertices.reshape(-1))
    v_shaped = nc.reshape(v_shaped, (M, N, 3))
    joints = nc.matmul(template.joint_regressor, v_shaped)
    v_posed = v_shaped
    if template.pose_dirs is not None:
        feat = nc.reshape(rots[:, 1:] - np.eye(3), (M, 9 * (J1 - 1)))
        offs = nc.linear(feat, template.pose_dirs.reshape(N * 3, -1), np.zeros(N * 3))
        v_posed = v_shaped + nc.reshape(offs, (M, N, 3))
    # skin the displacement from rest so the identity pose returns v_posed bit for bit
    A = forward_kinematics(rots, joints, template.parents) - _IDENTITY_34
    T = nc.matmul(template.skin_weights, nc.reshape(A, (M, J1, 12)))
    T = nc.reshape(T, (M, N, 3, 4))
    verts = v_posed + nc.einsum("mnij,mnj->mni", T[..., :3], v_posed) + T[..., 3]
    return nc.reshape(verts, lead + (N, 3))


def regress_joints(template: BodyTemplate, vertices):
    if np.shape(nc.value_of(vertices))[-2:] != (template.n_verts, 3):
        raise ValueError("regress_joints: vertices must be (..., N, 3)")
    return nc.matmul(template.joint_regressor, vertices)


def downsample_verts(template: BodyTemplate, vertices):
    if np.shape(nc.value_of(vertices))[-2:] != (template.n_verts, 3):
        raise ValueError("downsample_verts: vertices must be (..., N, 3)")
    return nc.matmul(template.downsample, vertices)


def project_weak_perspective(points3d, s, t, R_global=None):
    """``s * (R p)_xy + t`` for points (..., n, 3), scale (...), shift (..., 2)."""
    p = points3d
    if R_global is not None:
        p = nc.matmul(p, nc.swap_last(R_global))
    xy = p[..., :2]
    lead = np.shape(nc.value_of(s))
    s_ = nc.reshape(s, lead + (1, 1))
    t_ = nc.reshape(t, lead + (1, 2))
    return s_ * xy + t_


def global_rotation(params, n_joints_total: int):
    theta, _, _, _ = split_params(params, n_joints_total)
    return rodrigues(theta[..., :3])


def body_outputs(template: BodyTemplate, params):
    """Vertices, joints (meters) and projected 2D joints for (..., D) parameters."""
    theta, beta, s, t = split_params(params, template.n_joints_total)
    verts = lbs_forward(template, beta, theta)
    joints = regress_joints(template, verts)
    joints2d = project_weak_perspective(joints, s, t)
    return verts, joints, joints2d


# --------------------------------------------------------------------------
# synthetic template
# --------------------------------------------------------------------------


def make_mini_template(config: TemplateConfig, seed: int = 0) -> BodyTemplate:
    """Seeded capsule-limb body standing in for licensed model files."""
    N, J, Nd = config.n_verts, config.n_joints, config.n_down
    if J < 1 or Nd < 1 or N < Nd:
        raise ValueError(f"invalid template config {config}")
    rng = nc.rng_for(seed, "template", N, J, Nd)
    J1 = J + 1
    parents = [-1] + [int(rng.integers(max(0, i - 3), i)) for i in range(1, J1)]
    joints = np.zeros((J1, 3))
    for i in range(1, J1):
        d = rng.standard_normal(3)
        d[2] *= 0.3  # keep the body roughly planar, facing the camera
        d /= np.linalg.norm(d)
        joints[i] = joints[parents[i]] + d * rng.uniform(0.15, 0.3)
    joints -= joints.mean(axis=0)
    joints *= 0.7 / max(np.max(np.abs(joints[:, :2])), 1e-9)

    # vertices on capsules around each bone, bones assigned round-robin
    bone = 1 + np.arange(N) % J
    u = rng.uniform(0.0, 1.0, N)
    phi = rng.uniform(0.0, 2 * np.pi, N)
    radius = rng.uniform(0.03, 0.06, N)
    a, b = joints[np.asarray(parents)[bone]], joints[bone]
    axis = b - a
    axis /= np.maximum(np.linalg.norm(axis, axis=1, keepdims=True), 1e-12)
    ref = np.where(np.abs(axis[:, 2:3]) < 0.9, np.array([[0.0, 0.0, 1.0]]), np.array([[1.0, 0.0, 0.0]]))
    e1 = np.cross(axis, ref)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(axis, e1)
    rest = a + u[:, None] * (b - a) + radius[:, None] * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)

    dist = np.linalg.norm(rest[:, None, :] - joints[None, :, :], axis=-1)
    near = np.argsort(dist, axis=1, kind="stable")[:, :2]
    skin = np.zeros((N, J1))
    rows = np.arange(N)[:, None]
    inv = 1.0 / (dist[rows, near] + 1e-3)
    skin[rows, near] = inv / inv.sum(axis=1, keepdims=True)

    k = min(4, N)
    nearest_v = np.argsort(dist.T, axis=1, kind="stable")[:, :k]
    jreg = np.zeros((J1, N))
    jreg[np.arange(J1)[:, None], nearest_v] = 1.0 / k

    freq = rng.normal(0.0, 3.0, size=(N_BETAS, 3, 3))
    phase = rng.uniform(0, 2 * np.pi, size=(N_BETAS, 3))
    amp = rng.uniform(0.005, 0.02, size=(N_BETAS, 3))
    shape_dirs = np.empty((N, 3, N_BETAS))
    for c in range(N_BETAS):
        shape_dirs[:, :, c] = amp[c] * np.sin(rest @ freq[c] + phase[c])

    down = np.zeros((Nd, N))
    down[np.arange(Nd), (np.arange(Nd) * N) // Nd] = 1.0
    return BodyTemplate(rest, shape_dirs, jreg, skin, tuple(parents), down)


TEMPLATE_TENSORS = ("rest_vertices", "shape_dirs", "joint_regressor", "skin_weights", "downsample")


def template_header(template: BodyTemplate) -> dict:
    return {"N": template.n_verts, "J": template.n_joints_total - 1, "N_down": template.n_down,
            "parents": list(template.parents), "pose_dirs": template.pose_dirs is not None}


def template_tensors(template: BodyTemplate, prefix: str = "") -> dict:
    out = {prefix + name: getattr(template, name) for name in TEMPLATE_TENSORS}
    if template.pose_dirs is not None:
        out[prefix + "pose_dirs"] = template.pose_dirs
    return out


def template_from_tensors(header: dict, tensors: dict, prefix: str = "") -> BodyTemplate:
    try:
        kwargs = {name: tensors[prefix + name] for name in TEMPLATE_TENSORS}
    except KeyError as exc:
        raise FormatError(f"template tensor missing: {exc}") from exc
    if header.get("pose_dirs"):
        kwargs["pose_dirs"] = tensors[prefix + "pose_dirs"]
    t = BodyTemplate(parents=tuple(header["parents"]), **kwargs)
    if (t.n_verts, t.n_joints_total - 1, t.n_down) != (header["N"], header["J"], header["N_down"]):
        raise FormatError("template header does not match tensor shapes")
    return t


def save_template(template: BodyTemplate, path) -> None:
    write_container(path, template_header(template), template_tensors(template))


def load_template(path) -> BodyTemplate:
    header, tensors = read_container(path)
    return template_from_tensors(header, tensors)
