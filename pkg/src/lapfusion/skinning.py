"""Rigged templates, forward kinematics, linear blend skinning and per-point
pose features."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .mesh import SurfaceSample, TriangleMesh

WEIGHT_TOL = 1e-6


class RigError(ValueError):
    pass


@dataclass(frozen=True)
class RiggedTemplate:
    """Canonical (rest pose) mesh with a joint tree and skinning weights.

    ``parents[0] == -1`` and every other parent index precedes its child.
    ``association`` is the J x J joint association map: entry ``[j, i]``
    says how strongly joint ``j``'s angle matters for surface skinned to
    bone ``i``. An all-zero row removes joint ``j`` from every pose feature.
    """

    mesh: TriangleMesh
    parents: np.ndarray
    joints: np.ndarray
    skin_weights: np.ndarray
    association: np.ndarray
    joint_names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        joints = np.asarray(self.joints, dtype=np.float64)
        w = np.asarray(self.skin_weights, dtype=np.float64)
        W = np.asarray(self.association, dtype=np.float64)
        J = len(parents)
        if J == 0 or parents[0] != -1:
            raise RigError("joint 0 must be the root (parent -1)")
        if any(not 0 <= parents[j] < j for j in range(1, J)):
            raise RigError("parents must form a tree with each parent listed before its children")
        if joints.shape != (J, 3):
            raise RigError(f"joints must have shape ({J}, 3)")
        if w.shape != (self.mesh.n_vertices, J):
            raise RigError(f"skin_weights must have shape ({self.mesh.n_vertices}, {J})")
        check_weights(w)
        if W.shape != (J, J) or (W < 0).any() or (W > 1).any():
            raise RigError("association must be J x J with entries in [0, 1]")
        names = tuple(self.joint_names) or tuple(f"joint{j}" for j in range(J))
        if len(names) != J:
            raise RigError("one name per joint is required")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "skin_weights", w)
        object.__setattr__(self, "association", W)
        object.__setattr__(self, "joint_names", names)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def depth(self) -> int:
        """Number of joints on the longest root-to-leaf chain."""
        d = np.ones(self.n_joints, dtype=np.int64)
        for j in range(1, self.n_joints):
            d[j] = d[self.parents[j]] + 1
        return int(d.max())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.mesh.vertices, self.mesh.faces, self.parents, self.joints,
                  self.skin_weights, self.association):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Pose:
    """Per-joint axis-angle rotations (J, 3) in radians plus a root translation."""

    theta: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(t))):
            raise RigError("pose contains non-finite values")
        if (np.linalg.norm(theta, axis=1) >= 2 * np.pi).any():
            raise RigError("axis-angle magnitude must be below 2 pi")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, n_joints: int) -> Pose:
        return cls(np.zeros((n_joints, 3)))

    def interpolate(self, other: Pose, t: float) -> Pose:
        """Linear blend of the axis-angle parameters."""
        return Pose((1 - t) * self.theta + t * other.theta,
                    (1 - t) * self.translation + t * other.translation)


def check_weights(w: np.ndarray, tol: float = WEIGHT_TOL) -> None:
    if (w < -tol).any():
        raise RigError("skinning weights must be non-negative")
    s = w.sum(axis=1)
    if (np.abs(s - 1.0) > tol).any():
        i = int(np.argmax(np.abs(s - 1.0)))
        raise RigError(f"skinning weight row {i} sums to {s[i]:.9f}, not 1")


def rodrigues(aa: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    angle = np.linalg.norm(aa, axis=-1, keepdims=True)
    safe = np.where(angle > 0, angle, 1.0)
    k = aa / safe
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack([zero, -kz, ky, kz, zero, -kx, -ky, kx, zero], axis=-1).reshape(aa.shape[:-1] + (3, 3))
    s = np.sin(angle)[..., None]
    c = np.cos(angle)[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + s * K + (1 - c) * (K @ K)


def forward_kinematics(template: RiggedTemplate, pose: Pose) -> np.ndarray:
    """Per-joint 4x4 transforms mapping rest-pose space to posed space."""
    J = template.n_joints
    if pose.theta.shape != (J, 3):
        raise RigError(f"pose has {pose.theta.shape[0]} joints, rig has {J}")
    R = rodrigues(pose.theta)
    G = np.zeros((J, 4, 4))
    G[:, 3, 3] = 1.0
    rest = template.joints
    for j in range(J):
        local = np.eye(4)
        local[:3, :3] = R[j]
        p = template.parents[j]
        if p < 0:
            local[:3, 3] = rest[j] + pose.translation
            G[j] = local
        else:
            local[:3, 3] = rest[j] - rest[p]
            G[j] = G[p] @ local
    # remove the rest-pose joint location so T_j acts on rest-space points
    T = G.copy()
    T[:, :3, 3] -= np.einsum("jab,jb->ja", G[:, :3, :3], rest)
    return T


def _weights_of(template: RiggedTemplate, weights) -> np.ndarray:
    if weights is None:
        return template.skin_weights
    if isinstance(weights, SurfaceSample):
        if weights.skin_weights is None:
            return weights.with_skin_weights(template.skin_weights, template.mesh.faces).skin_weights
        return weights.skin_weights
    return np.asarray(weights, dtype=np.float64)


def blend_transforms(transforms: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-point blended 3x4 affine maps ``sum_j w_j T_j``."""
    return np.einsum("nj,jab->nab", weights, transforms[:, :3, :])


def lbs_apply(template: RiggedTemplate, pose: Pose, vertices=None, weights=None,
              *, transforms: np.ndarray | None = None) -> np.ndarray:
    """Linear blend skinning of rest-space points.

    ``weights`` defaults to the template's per-vertex weights; a
    :class:`SurfaceSample` supplies barycentric-interpolated weights.
    """
    w = _weights_of(template, weights)
    check_weights(w)
    v = template.mesh.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
    if v.shape[0] != w.shape[0]:
        raise RigError("one weight row per vertex is required")
    T = forward_kinematics(template, pose) if transforms is None else transforms
    A = blend_transforms(T, w)
    return np.einsum("nab,nb->na", A[:, :, :3], v) + A[:, :, 3]


def lbs_rotate(template: RiggedTemplate, pose: Pose, weights, vectors,
               *, transforms: np.ndarray | None = None) -> np.ndarray:
    """Apply only the blended linear 3x3 part of the skinning transform to vectors."""
    w = _weights_of(template, weights)
    check_weights(w)
    T = forward_kinematics(template, pose) if transforms is None else transforms
    A = np.einsum("nj,jab->nab", w, T[:, :3, :3])
    return np.einsum("nab,nb->na", A, np.asarray(vectors, dtype=np.float64))


def pose_feature(template: RiggedTemplate, weights, pose: Pose) -> np.ndarray:
    """Pose parameters masked to the joints associated with each point, (N, J, 3).

    Row ``j`` survives when ``(W w)_j > 0`` (the element-wise ceiling of an
    association value in [0, 1]).
    """
    w = _weights_of(template, weights)
    assoc = np.clip(w @ template.association.T, 0.0, 1.0)
    mask = np.ceil(assoc)
    return mask[:, :, None] * pose.theta[None]
