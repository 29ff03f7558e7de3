"""Fitting pipeline: a pose-dependent base mesh, a neural field of Laplacian
coordinates on top of it, and Laplacian reconstruction of detailed meshes.

Typical use::

    base = train_base(template, frames, poses, config)
    pairs = build_training_pairs(base, frames, poses, k=config.k)
    detail = train_detail(base, pairs, config)
    mesh = reconstruct_frame(detail, pose)
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .laplacian import LaplacianSolver, scale_field, uniform_angle_laplacian, uniform_laplacian
from .mesh import SurfaceSample, TriangleMesh, midpoint_subdivide, project_points, sample_anchors
from .neural import Mlp, PositionalEncoding
from .pointcloud import DEFAULT_K, PointCloudFrame, approx_laplacian, selective_weight
from .skinning import Pose, RigError, RiggedTemplate, forward_kinematics, pose_feature

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LFDETAIL"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    """Hyperparameters of both training stages and of reconstruction.

    ``base_hidden`` / ``detail_hidden`` list hidden widths only; the input
    and output widths follow from the rig and the encoding.
    """

    frequencies: int = 10
    base_hidden: tuple[int, ...] = (600, 600, 600, 600)
    detail_hidden: tuple[int, ...] = (800, 800)
    base_epochs: int = 300
    detail_epochs: int = 100
    lr: float = 1e-3
    frame_batch: int = 10
    point_batch: int = 5000
    base_points: int = 0
    lam_r: float = 1.0
    lam_a: float = 2.0
    c: float = 2.0
    n_anchors: int = 800
    k: int = DEFAULT_K
    levels: int = 2
    anchor_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "base_hidden", tuple(int(w) for w in self.base_hidden))
        object.__setattr__(self, "detail_hidden", tuple(int(w) for w in self.detail_hidden))
        for name in ("base_epochs", "detail_epochs", "frame_batch", "point_batch", "n_anchors", "levels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("lr", "c", "anchor_weight"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lam_r < 0 or self.lam_a < 0 or self.base_points < 0:
            raise ValueError("lam_r, lam_a and base_points must be non-negative")
        if self.frequencies < 0 or self.k < 6:
            raise ValueError("frequencies must be >= 0 and k >= 6")

    def seeds(self) -> dict[str, np.random.Generator]:
        """Independent generators for every random consumer, all derived from ``seed``."""
        names = ("base_init", "detail_init", "anchors", "base_batches", "detail_batches")
        children = np.random.SeedSequence(self.seed).spawn(len(names))
        return {n: np.random.default_rng(s) for n, s in zip(names, children)}

    @classmethod
    def from_dict(cls, d: dict) -> FitConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)


class _Subdivider:
    """Sparse map from template vertices to the vertices of its ``levels``-fold
    midpoint subdivision (every subdivided vertex is a barycentric blend)."""

    def __init__(self, template: RiggedTemplate, levels: int):
        sub = midpoint_subdivide(template.mesh, template.skin_weights, normalize=True, levels=levels)
        s = sub.samples
        n = sub.mesh.n_vertices
        corners = template.mesh.faces[s.face]
        P = sparse.csr_matrix((s.bary.ravel(), (np.repeat(np.arange(n), 3), corners.ravel())),
                              shape=(n, template.mesh.n_vertices))
        P.sum_duplicates()
        P.eliminate_zeros()
        self.P = P
        self.faces = sub.mesh.faces
        self.samples = s.with_skin_weights(template.skin_weights, template.mesh.faces)
        self.canonical = sub.mesh
        self.skin_weights = self.samples.skin_weights

    def __call__(self, vertices: np.ndarray) -> TriangleMesh:
        return TriangleMesh(self.P @ vertices, self.faces)


@dataclass(eq=False)
class BaseMeshModel:
    """Skinned template plus the learned pose-dependent displacement ``f_d``.

    Query points are canonical template positions mapped into the unit box
    by ``center`` and ``extent`` before positional encoding. ``anchors``
    index the vertices of the subdivided template (the first
    ``template.mesh.n_vertices`` of which are the template vertices).
    """

    template: RiggedTemplate
    f_d: Mlp
    anchors: np.ndarray
    config: FitConfig
    center: np.ndarray
    extent: float
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        expect = self.feature_dim
        if self.f_d.widths[0] != expect or self.f_d.widths[-1] != 3:
            raise ValueError(f"f_d must map {expect} inputs to 3 outputs")

    @property
    def encoding(self) -> PositionalEncoding:
        return PositionalEncoding(self.config.frequencies)

    @property
    def feature_dim(self) -> int:
        return self.encoding.dim(3) + 3 * self.template.n_joints

    @property
    def subdivider(self) -> _Subdivider:
        sd = self.__dict__.get("_subdivider")
        if sd is None:
            sd = self.__dict__["_subdivider"] = _Subdivider(self.template, self.config.levels)
        return sd

    def query(self, canonical_points: np.ndarray) -> np.ndarray:
        return (np.asarray(canonical_points) - self.center) / self.extent

    def features(self, canonical_points: np.ndarray, weights: np.ndarray, pose: Pose) -> np.ndarray:
        """``encode(Q(p)) ++ flattened pose feature`` per point."""
        enc = self.encoding(self.query(canonical_points))
        pf = pose_feature(self.template, weights, pose).reshape(len(enc), -1)
        return np.concatenate([enc, pf], axis=1)

    def vertex_features(self, pose: Pose) -> np.ndarray:
        return self.features(self.template.mesh.vertices, self.template.skin_weights, pose)

    def displacement(self, pose: Pose) -> np.ndarray:
        return self.f_d(self.vertex_features(pose))

    def posed_vertices(self, pose: Pose, transforms: np.ndarray | None = None) -> np.ndarray:
        T = forward_kinematics(self.template, pose) if transforms is None else transforms
        v = self.template.mesh.vertices + self.displacement(pose)
        A = np.einsum("nj,jab->nab", self.template.skin_weights, T[:, :3, :])
        return np.einsum("nab,nb->na", A[:, :, :3], v) + A[:, :, 3]

    def build(self, pose: Pose) -> TriangleMesh:
        return self.template.mesh.with_vertices(self.posed_vertices(pose))

    def lbs_only(self, pose: Pose) -> TriangleMesh:
        T = forward_kinematics(self.template, pose)
        A = np.einsum("nj,jab->nab", self.template.skin_weights, T[:, :3, :])
        v = np.einsum("nab,nb->na", A[:, :, :3], self.template.mesh.vertices) + A[:, :, 3]
        return self.template.mesh.with_vertices(v)

    def subdivided(self, pose: Pose) -> TriangleMesh:
        """The base mesh after ``config.levels`` midpoint subdivisions."""
        return self.subdivider(self.posed_vertices(pose))


def build_base_mesh(model: BaseMeshModel, pose: Pose) -> TriangleMesh:
    """``LBS(v + f_d(Q(v), pose feature))`` on the template topology."""
    return model.build(pose)


def _rotations(template: RiggedTemplate, weights: np.ndarray, pose: Pose) -> np.ndarray:
    T = forward_kinematics(template, pose)
    return np.einsum("nj,jab->nab", weights, T[:, :3, :3])


def _query_frame(template: RiggedTemplate):
    v = template.mesh.vertices
    lo, hi = v.min(0), v.max(0)
    return 0.5 * (lo + hi), float(0.5 * (hi - lo).max())


def new_base_model(template: RiggedTemplate, config: FitConfig, rng=None) -> BaseMeshModel:
    """Base model with a zero-output ``f_d`` (the base mesh starts as pure LBS)."""
    gens = config.seeds()
    rng = gens["base_init"] if rng is None else rng
    center, extent = _query_frame(template)
    dim = PositionalEncoding(config.frequencies).dim(3) + 3 * template.n_joints
    f_d = Mlp([dim, *config.base_hidden, 3], rng, zero_last=True)
    sub = _Subdivider(template, config.levels)
    n = min(config.n_anchors, sub.canonical.n_vertices)
    if n < config.n_anchors:
        log.warning("only %d vertices available for %d anchors", n, config.n_anchors)
    anchors = sample_anchors(sub.canonical, n, seed=int(gens["anchors"].integers(2**31)))
    model = BaseMeshModel(template, f_d, anchors, config, center, extent)
    model.__dict__["_subdivider"] = sub
    return model


def visible_anchors(anchor_pos: np.ndarray, anchor_normals: np.ndarray, frame: PointCloudFrame,
                    tol: float | None = None) -> np.ndarray:
    """Boolean mask of anchors seen from ``frame.viewpoint``.

    An anchor is visible when its normal faces the camera and no scan point
    along nearly the same viewing ray is closer to the camera by more than
    ``tol`` (default: 2% of the scan's bounding-box diagonal).
    """
    if frame.viewpoint is None:
        return np.ones(len(anchor_pos), dtype=bool)
    cam = frame.viewpoint
    ray = anchor_pos - cam
    facing = np.einsum("ij,ij->i", anchor_normals, ray) < 0
    pts = frame.points
    if tol is None:
        tol = 0.02 * float(np.linalg.norm(pts.max(0) - pts.min(0)))
    depth = np.linalg.norm(pts - cam, axis=1) if frame.depth is None else frame.depth
    dirs = (pts - cam) / np.linalg.norm(pts - cam, axis=1, keepdims=True)
    ad = np.linalg.norm(ray, axis=1)
    _, nn = cKDTree(dirs).query(ray / ad[:, None])
    unoccluded = depth[nn] > ad - tol
    return facing & unoccluded


def _base_step(model: BaseMeshModel, frame: PointCloudFrame, pose: Pose, mu: np.ndarray, tree: cKDTree,
               point_idx: np.ndarray | None, L_u: sparse.csr_matrix):
    """Losses of one frame and their gradient w.r.t. the canonical displacement."""
    cfg = model.config
    tpl = model.template
    T = forward_kinematics(tpl, pose)
    feats = model.vertex_features(pose)
    d, cache = model.f_d.forward(feats)
    A = np.einsum("nj,jab->nab", tpl.skin_weights, T[:, :3, :])
    v = np.einsum("nab,nb->na", A[:, :, :3], tpl.mesh.vertices + d) + A[:, :, 3]
    if not np.all(np.isfinite(v)):
        raise FloatingPointError("non-finite base vertices")
    mesh = tpl.mesh.with_vertices(v)

    pts = frame.points if point_idx is None else frame.points[point_idx]
    w = mu if point_idx is None else mu[point_idx]
    gain = len(frame.points) / len(pts)
    sample, dist, closest = project_points(mesh, pts)
    e_d = gain * float(np.sum(w * dist ** 2))
    g = np.zeros_like(v)
    coef = (-2.0 * gain * w)[:, None] * (pts - closest)
    corners = mesh.faces[sample.face]
    for c in range(3):
        np.add.at(g, corners[:, c], sample.bary[:, c:c + 1] * coef)

    lv = L_u @ v
    e_r = float(np.sum(lv ** 2))
    g += cfg.lam_r * 2.0 * (L_u.T @ lv)

    e_a = 0.0
    if cfg.lam_a > 0 and len(model.anchors):
        P = model.subdivider.P[model.anchors]
        ua = P @ v
        if frame.depth is not None:
            normals = model.subdivider(v).vertex_normals[model.anchors]
            keep = visible_anchors(ua, normals, frame)
        else:
            keep = np.ones(len(ua), dtype=bool)
        if keep.any():
            dd, nn = tree.query(ua[keep])
            e_a = cfg.lam_a * float(np.sum(dd ** 2))
            ga = np.zeros_like(ua)
            ga[keep] = 2.0 * cfg.lam_a * (ua[keep] - frame.points[nn])
            g += P.T @ ga

    # back through the skinning transform into canonical space
    gd = np.einsum("nba,nb->na", A[:, :, :3], g)
    return e_d, e_r, e_a, gd, cache


def train_base(template: RiggedTemplate, frames: list[PointCloudFrame], poses: list[Pose],
               config: FitConfig | None = None, *, model: BaseMeshModel | None = None) -> BaseMeshModel:
    """Fit ``f_d`` by Adam on ``E_d + lam_r E_r + E_a`` over random frame batches.

    ``E_d`` is the weighted squared distance from scan points to the base
    surface, ``E_r`` the squared uniform Laplacian of the posed base
    vertices and ``E_a`` the squared distance from anchors to their
    nearest scan point. Sums run over points/vertices; each optimizer step
    averages them over the frames of its batch. ``config.base_points > 0``
    subsamples that many scan points per frame and step (rescaled to the
    full count).
    """
    config = config or FitConfig()
    if not frames:
        raise ValueError("no frames to fit")
    if len(frames) != len(poses):
        raise ValueError(f"{len(frames)} frames but {len(poses)} poses")
    gens = config.seeds()
    model = new_base_model(template, config) if model is None else model
    rng = gens["base_batches"]
    trees = [cKDTree(f.points) for f in frames]
    mus = [selective_weight(f.depth, config.c, n=len(f.points)) for f in frames]
    L_u = uniform_laplacian(template.mesh).matrix
    n_frames = len(frames)
    for epoch in range(config.base_epochs):
        order = rng.permutation(n_frames)
        tot = np.zeros(3)
        for s in range(0, n_frames, config.frame_batch):
            batch = order[s:s + config.frame_batch]
            grads = None
            for t in batch:
                idx = None
                if config.base_points and config.base_points < len(frames[t].points):
                    idx = np.sort(rng.choice(len(frames[t].points), config.base_points, replace=False))
                try:
                    e_d, e_r, e_a, gd, cache = _base_step(model, frames[t], poses[t], mus[t], trees[t], idx, L_u)
                except FloatingPointError:
                    raise TrainingError(f"base training diverged at epoch {epoch}") from None
                gp = model.f_d.backward(cache, gd / len(batch))
                grads = gp if grads is None else [a + b for a, b in zip(grads, gp)]
                tot += (e_d, e_r, e_a)
            model.f_d.adam_step(grads, config.lr)
        tot /= n_frames
        loss = tot[0] + config.lam_r * tot[1] + tot[2]
        if not np.isfinite(loss) or not all(np.all(np.isfinite(p)) for p in model.f_d.params()):
            raise TrainingError(f"base training diverged at epoch {epoch}")
        model.history.append({"epoch": epoch, "loss": float(loss), "e_d": float(tot[0]),
                              "e_r": float(tot[1]), "e_a": float(tot[2])})
        log.debug("base epoch %d loss %.6g", epoch, loss)
    return model


@dataclass(frozen=True)
class TrainingPair:
    """One localized scan point with its target Laplacian coordinate."""

    face: int
    bary: np.ndarray
    gt_laplacian: np.ndarray
    weight: float
    frame: int
    pose: Pose


@dataclass
class TrainingPairs:
    """All training pairs in struct-of-arrays form.

    ``sample`` holds the template-space location (face, barycentric and
    interpolated skin weights) of each projected scan point; ``projected``
    and ``points`` are the posed projection and the scan point itself.
    """

    sample: SurfaceSample
    gt_laplacian: np.ndarray
    weight: np.ndarray
    frame: np.ndarray
    poses: list[Pose]
    points: np.ndarray
    projected: np.ndarray
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.weight)

    def __getitem__(self, i: int) -> TrainingPair:
        t = int(self.frame[i])
        return TrainingPair(int(self.sample.face[i]), self.sample.bary[i], self.gt_laplacian[i],
                            float(self.weight[i]), t, self.poses[t])

    def subset(self, idx) -> TrainingPairs:
        return TrainingPairs(self.sample.subset(idx), self.gt_laplacian[idx], self.weight[idx], self.frame[idx],
                             self.poses, self.points[idx], self.projected[idx], self.skipped)


def build_training_pairs(model: BaseMeshModel, frames: list[PointCloudFrame], poses: list[Pose],
                         k: int = DEFAULT_K, c: float | None = None) -> TrainingPairs:
    """Localize every scan point on its frame's base mesh and attach its
    point-cloud Laplacian. Points whose quadric fit failed are skipped."""
    c = model.config.c if c is None else c
    tpl = model.template
    parts = []
    skipped = 0
    for t, (frame, pose) in enumerate(zip(frames, poses)):
        base = model.build(pose)
        sample, _, closest = project_points(base, frame.points)
        ref = base.vertex_normals[base.faces[sample.face]]
        ref = np.einsum("ni,nij->nj", sample.bary, ref)
        est = approx_laplacian(frame, k, reference_normals=ref)
        ok = est.ok & np.all(np.isfinite(est.delta), axis=1)
        skipped += int((~ok).sum())
        mu = selective_weight(frame.depth, c, n=len(frame.points))
        parts.append((sample.face[ok], sample.bary[ok], est.delta[ok], mu[ok], np.full(ok.sum(), t),
                      frame.points[ok], closest[ok]))
    if skipped:
        log.info("skipped %d points with degenerate neighborhoods", skipped)
    face, bary, delta, mu, fr, pts, proj = (np.concatenate(x) for x in zip(*parts))
    sample = SurfaceSample(face, bary).with_skin_weights(tpl.skin_weights, tpl.mesh.faces)
    return TrainingPairs(sample, delta, mu, fr, list(poses), pts, proj, skipped)


@dataclass(eq=False)
class DetailModel:
    """Neural field ``f_l`` of canonical Laplacian coordinates over a base model.

    ``target`` is ``"laplacian"`` (the method) or ``"displacement"`` (the
    ablation in which the field is an offset from the base surface).
    Network outputs are multiplied by ``output_scale``.
    """

    base: BaseMeshModel
    f_l: Mlp
    output_scale: float = 1.0
    target: str = "laplacian"
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.f_l.widths[0] != self.base.feature_dim or self.f_l.widths[-1] != 3:
            raise ValueError(f"f_l must map {self.base.feature_dim} inputs to 3 outputs")
        if self.target not in ("laplacian", "displacement"):
            raise ValueError(f"unknown target {self.target!r}")

    @property
    def levels(self) -> int:
        return self.base.config.levels

    def canonical_field(self, canonical_points: np.ndarray, weights: np.ndarray, pose: Pose) -> np.ndarray:
        return self.output_scale * self.f_l(self.base.features(canonical_points, weights, pose))

    def predict(self, sample: SurfaceSample, pose: Pose) -> np.ndarray:
        """Posed-space field at template-space samples (rotation only, no translation)."""
        tpl = self.base.template
        if sample.skin_weights is None:
            sample = sample.with_skin_weights(tpl.skin_weights, tpl.mesh.faces)
        q = sample.position(tpl.mesh)
        R = _rotations(tpl, sample.skin_weights, pose)
        return np.einsum("nab,nb->na", R, self.canonical_field(q, sample.skin_weights, pose))


def _pair_targets(pairs: TrainingPairs, target: str) -> np.ndarray:
    if target == "laplacian":
        return pairs.gt_laplacian
    return pairs.points - pairs.projected


def train_detail(model: BaseMeshModel, pairs: TrainingPairs, config: FitConfig | None = None,
                 *, target: str = "laplacian") -> DetailModel:
    """Fit ``f_l`` by Adam on ``sum mu |R f_l - delta|^2`` over random point batches.

    ``R`` is the blended skinning rotation at each point, so ``f_l``
    predicts in canonical space. With ``target="displacement"`` the same
    network and pairs regress the offset from the base surface to the scan
    point instead.
    """
    config = config or model.config
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    gens = config.seeds()
    rng = gens["detail_batches"]
    tpl = model.template
    y = _pair_targets(pairs, target)
    scale = float(np.sqrt(np.mean(np.sum(y ** 2, axis=1))))
    scale = scale if scale > 0 else 1.0
    # zero output layer: training starts from the detail-free base surface
    f_l = Mlp([model.feature_dim, *config.detail_hidden, 3], gens["detail_init"], zero_last=True)
    detail = DetailModel(model, f_l, scale, target)

    q = model.query(pairs.sample.position(tpl.mesh))
    enc = model.encoding
    sw = pairs.sample.skin_weights
    mask = np.ceil(np.clip(sw @ tpl.association.T, 0.0, 1.0))
    thetas = np.stack([p.theta for p in pairs.poses])
    Ts = np.stack([forward_kinematics(tpl, p) for p in pairs.poses])[:, :, :3, :3]
    mu = pairs.weight
    n = len(pairs)
    for epoch in range(config.detail_epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.point_batch):
            b = order[s:s + config.point_batch]
            b.sort()
            fr = pairs.frame[b]
            x = np.concatenate([enc(q[b]), (mask[b][:, :, None] * thetas[fr]).reshape(len(b), -1)], axis=1)
            R = np.einsum("nj,njab->nab", sw[b], Ts[fr])
            out, cache = f_l.forward(x)
            pred = np.einsum("nab,nb->na", R, out) * scale
            r = pred - y[b]
            total += float(np.sum(mu[b] * np.sum(r * r, axis=1)))
            gpred = (2.0 / len(b)) * mu[b][:, None] * r
            gout = np.einsum("nab,na->nb", R, gpred) * scale
            f_l.adam_step(f_l.backward(cache, gout), config.lr)
        loss = total / n
        if not np.isfinite(loss):
            raise TrainingError(f"detail training diverged at epoch {epoch}")
        detail.history.append({"epoch": epoch, "loss": loss})
        log.debug("detail epoch %d loss %.6g", epoch, loss)
    return detail


def _check_compatible(detail: DetailModel, base: BaseMeshModel):
    a, b = detail.base.template, base.template
    if a.n_joints != b.n_joints:
        raise RigError(f"joint counts differ ({a.n_joints} vs {b.n_joints})")
    if a.mesh.faces.shape != b.mesh.faces.shape or not np.array_equal(a.mesh.faces, b.mesh.faces):
        raise RigError("templates do not share topology")
    if detail.levels != base.config.levels:
        raise RigError("subdivision levels differ")


def _solver(base: BaseMeshModel, pose: Pose, mesh: TriangleMesh, anchor_weight: float) -> LaplacianSolver:
    # factorizations depend only on the base geometry, so reuse them across fields
    key = (pose.theta.tobytes(), pose.translation.tobytes(), float(anchor_weight))
    cache = base.__dict__.setdefault("_solvers", {})
    solver = cache.get(key)
    if solver is None:
        solver = LaplacianSolver(uniform_angle_laplacian(mesh), base.anchors, anchor_weight)
        if len(cache) >= 8:
            cache.pop(next(iter(cache)))
        cache[key] = solver
    return solver


def reconstruct_frame(detail: DetailModel, pose: Pose, *, scale: float = 1.0, base: BaseMeshModel | None = None,
                      anchor_weight: float | None = None) -> TriangleMesh:
    """Detailed mesh for ``pose``.

    The base mesh is subdivided, the field is evaluated at every subdivided
    vertex (queries come from the detail model's template at the same
    barycentric location), multiplied by ``scale`` and integrated with the
    uniform-angle operator of the subdivided base and its anchors.
    ``base`` swaps in another base model of the same topology.
    """
    base = detail.base if base is None else base
    if base is not detail.base:
        _check_compatible(detail, base)
    w = base.config.anchor_weight if anchor_weight is None else anchor_weight
    sd = base.subdivider
    B = sd(base.posed_vertices(pose))
    src = detail.base.subdivider
    q = src.canonical.vertices
    f = detail.canonical_field(q, src.skin_weights, pose)
    R = _rotations(base.template, sd.skin_weights, pose)
    field = scale_field(np.einsum("nab,nb->na", R, f), scale)
    if detail.target == "displacement":
        return B.with_vertices(B.vertices + field)
    solver = _solver(base, pose, B, w)
    rec = solver.solve(field, B.vertices[base.anchors])
    return B.with_vertices(rec.positions)


def transfer_details(detail: DetailModel, base: BaseMeshModel, pose: Pose, *, scale: float = 1.0) -> TriangleMesh:
    """Details of ``detail`` rebuilt on another subject's base mesh."""
    return reconstruct_frame(detail, pose, scale=scale, base=base)


def animate(detail: DetailModel, poses: list[Pose], *, scale: float = 1.0) -> list[TriangleMesh]:
    return [reconstruct_frame(detail, p, scale=scale) for p in poses]


# --- evaluation -------------------------------------------------------------

def surface_distances(mesh: TriangleMesh, points: np.ndarray) -> np.ndarray:
    return project_points(mesh, points)[1]


def rms_distance(a: TriangleMesh, b: TriangleMesh) -> float:
    """RMS distance from the vertices of ``a`` to the surface of ``b``."""
    d = surface_distances(b, a.vertices)
    return float(np.sqrt(np.mean(d ** 2)))


def normal_consistency(a: TriangleMesh, b: TriangleMesh) -> float:
    """Mean ``|n_a . n_b|`` between vertex normals of ``a`` and the interpolated
    vertex normal of ``b`` at each vertex's closest point."""
    sample, _, _ = project_points(b, a.vertices)
    nb = np.einsum("nk,nkd->nd", sample.bary, b.vertex_normals[b.faces[sample.face]])
    nb /= np.linalg.norm(nb, axis=1, keepdims=True)
    return float(np.mean(np.abs(np.einsum("ij,ij->i", a.vertex_normals, nb))))


def detail_amplitude(mesh: TriangleMesh, reference: TriangleMesh) -> float:
    """RMS height of ``mesh`` over the smooth ``reference`` of the same topology,
    measured along the reference normals with the per-mesh mean height removed."""
    h = np.einsum("ij,ij->i", mesh.vertices - reference.vertices, reference.vertex_normals)
    return float(np.sqrt(np.mean((h - h.mean()) ** 2)))


def max_edge_ratio(mesh: TriangleMesh) -> float:
    """Largest ratio between the longest and shortest edge of any one-ring."""
    e = mesh.edges
    ln = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    n = mesh.n_vertices
    hi = np.zeros(n)
    lo = np.full(n, np.inf)
    for c in (0, 1):
        np.maximum.at(hi, e[:, c], ln)
        np.minimum.at(lo, e[:, c], ln)
    return float(np.max(hi / lo))


# --- checkpoints ------------------------------------------------------------

def _config_json(cfg: FitConfig) -> dict:
    d = asdict(cfg)
    d["base_hidden"] = list(cfg.base_hidden)
    d["detail_hidden"] = list(cfg.detail_hidden)
    return d


def save_detail_model(detail: DetailModel, path) -> None:
    """Write a self-describing binary checkpoint.

    Layout: magic(8) | uint32 version | uint64 n_meta | meta JSON (sorted
    keys) | uint64 n_fd | f_d blob | uint64 n_fl | f_l blob.
    """
    base = detail.base
    meta = {
        "rig": base.template.fingerprint(),
        "anchors": [int(a) for a in base.anchors],
        "config": _config_json(base.config),
        "center": [float(x) for x in base.center],
        "extent": float(base.extent),
        "output_scale": float(detail.output_scale),
        "target": detail.target,
    }
    mj = json.dumps(meta, sort_keys=True).encode()
    fd = base.f_d.to_bytes()
    fl = detail.f_l.to_bytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
        for blob in (mj, fd, fl):
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def load_detail_model(path, template: RiggedTemplate) -> DetailModel:
    from .neural import CheckpointError

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a detail-model checkpoint")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    blobs = []
    for _ in range(3):
        (n,) = struct.unpack_from("<Q", data, off)
        blobs.append(data[off + 8:off + 8 + n])
        off += 8 + n
    meta = json.loads(blobs[0])
    if meta["rig"] != template.fingerprint():
        raise CheckpointError(f"{path}: checkpoint was trained on a different rig")
    cfg = FitConfig.from_dict(meta["config"])
    base = BaseMeshModel(template, Mlp.from_bytes(blobs[1]), np.array(meta["anchors"], dtype=np.int64), cfg,
                         np.array(meta["center"]), meta["extent"])
    return DetailModel(base, Mlp.from_bytes(blobs[2]), meta["output_scale"], meta["target"])


def with_config(model: BaseMeshModel, **changes) -> BaseMeshModel:
    """Copy of ``model`` sharing networks and anchors with some reconstruction settings changed."""
    out = BaseMeshModel(model.template, model.f_d, model.anchors, replace(model.config, **changes),
                        model.center, model.extent, model.history)
    if "levels" not in changes and "_subdivider" in model.__dict__:
        out.__dict__["_subdivider"] = model.__dict__["_subdivider"]
    return out
