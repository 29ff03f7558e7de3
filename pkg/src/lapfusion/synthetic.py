"""Synthetic articulated subject: a capsule-shaped tube with a joint chain
along its axis, and scans of it wearing pose-dependent wrinkles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import TriangleMesh, build_mesh, midpoint_subdivide
from .pointcloud import PointCloudFrame
from .skinning import Pose, RigError, RiggedTemplate, forward_kinematics, lbs_apply


@dataclass(frozen=True)
class RigSpec:
    """Capsule rig parameters.

    The tube runs along +x from 0 to ``length`` with hemispherical caps.
    ``radial`` vertices per ring; rings are staggered and spaced so tube
    triangles are close to equilateral. Bone ``j`` covers
    ``[j, j + 1] * length / joints``; ``blend`` is the half-width of the
    weight transition at each inner joint as a fraction of bone length.
    """

    joints: int = 3
    radius: float = 0.1
    length: float = 0.6
    radial: int = 20
    blend: float = 0.3

    def validate(self):
        if self.joints < 1:
            raise RigError("need at least one joint")
        if self.radius <= 0 or self.length <= 0:
            raise RigError("radius and length must be positive")
        if self.radial < 6:
            raise RigError("radial resolution must be at least 6")
        if not 0 < self.blend < 0.5:
            raise RigError("blend must lie in (0, 0.5)")


def _stitch(a_idx, a_ang, b_idx, b_ang):
    """Triangulate the band between two closed rings by merging on angle."""
    na, nb = len(a_idx), len(b_idx)
    a_ang = np.asarray(a_ang)
    b_ang = np.asarray(b_ang)
    shift = int(np.argmin(np.abs(np.angle(np.exp(1j * (b_ang - a_ang[0]))))))
    b_idx = np.roll(b_idx, -shift)
    b_ang = np.roll(b_ang, -shift)
    b_ang = a_ang[0] + np.angle(np.exp(1j * (b_ang - a_ang[0])))
    b_ang = b_ang[0] + np.mod(b_ang - b_ang[0], 2 * np.pi)
    ua = np.append(a_ang, a_ang[0] + 2 * np.pi)
    ub = np.append(b_ang, b_ang[0] + 2 * np.pi)
    tris = []
    i = j = 0
    while i < na or j < nb:
        if i < na and (j == nb or ua[i + 1] <= ub[j + 1]):
            tris.append((a_idx[i % na], a_idx[(i + 1) % na], b_idx[j % nb]))
            i += 1
        else:
            tris.append((a_idx[i % na], b_idx[(j + 1) % nb], b_idx[j % nb]))
            j += 1
    return tris


def capsule_mesh(radius: float, length: float, radial: int) -> TriangleMesh:
    chord = 2 * radius * np.sin(np.pi / radial)
    h = chord * np.sqrt(3) / 2
    n_tube = max(2, int(round(length / h)) + 1)
    h = length / (n_tube - 1)

    rings = []  # (x, ring radius, count, angle offset)
    for i in range(n_tube):
        rings.append((i * h, radius, radial, 0.5 * (i % 2)))
    n_cap = max(1, int(round(0.5 * np.pi * radius / h)))
    left, right = [], []
    for i in range(1, n_cap):
        psi = 0.5 * np.pi * i / n_cap
        r = radius * np.cos(psi)
        count = max(6, int(round(radial * np.cos(psi))))
        left.append((-radius * np.sin(psi), r, count, 0.5 * (i % 2)))
        right.append((length + radius * np.sin(psi), r, count, 0.5 * ((n_tube - 1 + i) % 2)))
    ordered = left[::-1] + rings + right

    verts = [np.array([-radius, 0.0, 0.0])]
    ring_idx, ring_ang = [], []
    for x, r, count, off in ordered:
        ang = 2 * np.pi * (np.arange(count) + off) / count
        start = len(verts)
        verts.extend(np.stack([np.full(count, x), r * np.cos(ang), r * np.sin(ang)], 1))
        ring_idx.append(np.arange(start, start + count))
        ring_ang.append(ang)
    verts.append(np.array([length + radius, 0.0, 0.0]))
    verts = np.array(verts)
    south, north = 0, len(verts) - 1

    tris = []
    first = ring_idx[0]
    tris += [(south, first[(j + 1) % len(first)], first[j]) for j in range(len(first))]
    for k in range(len(ring_idx) - 1):
        tris += _stitch(ring_idx[k], ring_ang[k], ring_idx[k + 1], ring_ang[k + 1])
    last = ring_idx[-1]
    tris += [(last[j], last[(j + 1) % len(last)], north) for j in range(len(last))]
    faces = np.array(tris, dtype=np.int64)

    # orient outward: normal must point away from the axis segment
    v = verts[faces]
    nrm = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    c = v.mean(axis=1)
    axis_pt = np.stack([np.clip(c[:, 0], 0, length), np.zeros(len(c)), np.zeros(len(c))], 1)
    flip = np.einsum("ij,ij->i", nrm, c - axis_pt) < 0
    faces[flip] = faces[flip][:, ::-1]
    return build_mesh(verts, faces)


def capsule_project(points: np.ndarray, radius: float, length: float):
    """Closest points on the capsule surface and the outward unit normals there."""
    p = np.asarray(points, dtype=np.float64)
    axis_pt = np.zeros_like(p)
    axis_pt[:, 0] = np.clip(p[:, 0], 0.0, length)
    d = p - axis_pt
    n = d / np.linalg.norm(d, axis=1, keepdims=True)
    return axis_pt + radius * n, n


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def bone_weights(x: np.ndarray, spec: RigSpec) -> np.ndarray:
    """Piecewise-smooth partition of unity over bones as a function of axial position."""
    J = spec.joints
    seg = spec.length / J
    b = spec.blend * seg
    cum = np.zeros((len(x), J + 1))
    cum[:, 0] = 1.0
    for j in range(1, J):
        cum[:, j] = _smoothstep((x - (j * seg - b)) / (2 * b))
    w = cum[:, :J] - cum[:, 1:]
    w = np.clip(w, 0.0, None)
    return w / w.sum(1, keepdims=True)


def make_synthetic_rig(spec: RigSpec | None = None) -> RiggedTemplate:
    """Capsule template with a straight joint chain.

    The association map ties bone ``i`` to joints ``i - 1, i, i + 1``; the
    root (global orientation) row is zero so details ignore it.
    """
    spec = spec or RigSpec()
    spec.validate()
    mesh = capsule_mesh(spec.radius, spec.length, spec.radial)
    J = spec.joints
    seg = spec.length / J
    joints = np.stack([np.arange(J) * seg, np.zeros(J), np.zeros(J)], 1)
    parents = np.arange(-1, J - 1)
    weights = bone_weights(mesh.vertices[:, 0], spec)
    W = np.zeros((J, J))
    for j in range(1, J):
        for i in range(J):
            if abs(i - j) <= 1:
                W[j, i] = 1.0
    meta = {"kind": "capsule", "radius": spec.radius, "length": spec.length,
            "radial": spec.radial, "blend": spec.blend, "joints": J}
    return RiggedTemplate(mesh, parents, joints, weights, W, tuple(f"joint{j}" for j in range(J)), meta)


@dataclass(frozen=True)
class WrinkleSpec:
    """Clothing model used to synthesize scans (lengths in meters).

    ``offset`` is a uniform cloth gap and ``bulge`` a pose-driven swelling
    (per radian of bend) around inner joints: both are smooth, coarse
    deformations. Wrinkles are axial sinusoids of ``wavelength`` whose
    amplitude and phase follow the bends of the adjacent joints.
    """

    amplitude: float = 0.005
    wavelength: float = 0.08
    offset: float = 0.003
    bulge: float = 0.01
    bulge_width: float = 0.06
    phase_gain: float = 1.5
    min_gain: float = 0.3


@dataclass
class SyntheticScans:
    frames: list[PointCloudFrame]
    ground_truth: list[TriangleMesh]
    smooth: list[TriangleMesh]
    wrinkle: list[np.ndarray] = field(default_factory=list)

    def wrinkle_rms(self) -> float:
        return float(np.sqrt(np.mean(np.concatenate(self.wrinkle) ** 2)))


def _bend(theta: np.ndarray) -> np.ndarray:
    return np.linalg.norm(theta, axis=1)


def detail_fields(template: RiggedTemplate, canonical: np.ndarray, weights: np.ndarray,
                  pose: Pose, wrinkles: WrinkleSpec):
    """(coarse, wrinkle) normal displacements at canonical points for ``pose``."""
    meta = template.meta
    length = meta.get("length", float(np.ptp(template.mesh.vertices[:, 0])))
    J = template.n_joints
    x = canonical[:, 0]
    mag = _bend(pose.theta)
    mag[0] = 0.0
    signed = pose.theta[:, 2].copy()
    signed[0] = 0.0

    coarse = np.full(len(x), float(wrinkles.offset))
    for j in range(1, J):
        coarse += wrinkles.bulge * mag[j] * np.exp(-((x - template.joints[j, 0]) / wrinkles.bulge_width) ** 2)

    nxt = np.append(mag[1:], 0.0)
    gain = wrinkles.min_gain + (1 - wrinkles.min_gain) * np.minimum(1.0, mag + nxt)
    s_next = np.append(signed[1:], 0.0)
    phase = wrinkles.phase_gain * (weights @ (signed + s_next))
    margin = 0.5 * wrinkles.wavelength
    taper = _smoothstep(x / margin) * _smoothstep((length - x) / margin)
    wr = wrinkles.amplitude * taper * (weights @ gain) * np.sin(2 * np.pi * x / wrinkles.wavelength + phase)
    return coarse, wr


def make_synthetic_scans(template: RiggedTemplate, poses: list[Pose], wrinkles: WrinkleSpec | None = None,
                         noise: float = 0.0005, sample_count: int = 20000, seed: int = 0,
                         camera: np.ndarray | None = None, levels: int = 2) -> SyntheticScans:
    """Scans of the clothed subject in each pose plus the exact detailed meshes.

    The template is subdivided ``levels`` times, snapped to the analytic
    capsule when the rig is a capsule, displaced along the normal by the
    coarse and wrinkle fields in canonical space and posed with skinning.
    Points are drawn uniformly by area with isotropic Gaussian ``noise``.
    With a ``camera`` position only faces turned toward it are sampled and
    each point carries its distance to the camera as depth.
    """
    wrinkles = wrinkles or WrinkleSpec()
    rng = np.random.default_rng(seed)
    sub = midpoint_subdivide(template.mesh, template.skin_weights, normalize=True, levels=levels)
    weights = sub.attributes
    canon = sub.mesh.vertices
    meta = template.meta
    if meta.get("kind") == "capsule":
        canon, normals = capsule_project(canon, meta["radius"], meta["length"])
    else:
        normals = sub.mesh.vertex_normals
    faces = sub.mesh.faces

    frames, gts, smooths, wr_list = [], [], [], []
    for t, pose in enumerate(poses):
        coarse, wr = detail_fields(template, canon, weights, pose, wrinkles)
        T = forward_kinematics(template, pose)
        smooth = lbs_apply(template, pose, canon + normals * coarse[:, None], weights, transforms=T)
        posed = lbs_apply(template, pose, canon + normals * (coarse + wr)[:, None], weights, transforms=T)
        gt = TriangleMesh(posed, faces)
        tri = posed[faces]
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        if camera is not None:
            fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
            area = np.where(np.einsum("ij,ij->i", fn, np.asarray(camera) - tri.mean(1)) > 0, area, 0.0)
        fidx = rng.choice(len(faces), size=sample_count, p=area / area.sum())
        r1, r2 = rng.random(sample_count), rng.random(sample_count)
        s = np.sqrt(r1)
        bary = np.stack([1 - s, s * (1 - r2), s * r2], 1)
        pts = np.einsum("ni,nij->nj", bary, tri[fidx])
        pts = pts + rng.normal(scale=noise, size=pts.shape) if noise > 0 else pts
        depth = None if camera is None else np.linalg.norm(pts - np.asarray(camera), axis=1)
        frames.append(PointCloudFrame(pts, depth, t, None if camera is None else camera))
        gts.append(gt)
        smooths.append(TriangleMesh(smooth, faces))
        wr_list.append(wr)
    return SyntheticScans(frames, gts, smooths, wr_list)


def bend_sequence(n_joints: int, n_frames: int, seed: int = 0, max_angle: float = 1.0) -> list[Pose]:
    """Smoothly varying bends about z at the inner joints; root stays fixed."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, n_frames)
    poses = []
    freq = rng.uniform(0.6, 1.4, size=n_joints)
    ph = rng.uniform(0, 2 * np.pi, size=n_joints)
    for k in range(n_frames):
        theta = np.zeros((n_joints, 3))
        theta[1:, 2] = max_angle * np.sin(2 * np.pi * freq[1:] * t[k] + ph[1:])
        poses.append(Pose(theta))
    return poses
