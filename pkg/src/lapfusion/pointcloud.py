"""Point-cloud queries: k nearest neighbors, Chamfer distance, moving
least-squares quadric fits and the Laplace-Beltrami estimate built on them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriangleMesh, project_points

DEFAULT_K = 25


@dataclass(frozen=True)
class PointCloudFrame:
    """One scan: (N, 3) points in meters, optional per-point camera depth.

    ``viewpoint`` is the camera position for depth scans; it is needed only
    to decide which anchors are visible.
    """

    points: np.ndarray
    depth: np.ndarray | None = None
    frame_index: int = 0
    viewpoint: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.depth is not None:
            d = np.asarray(self.depth, dtype=np.float64).ravel()
            if d.shape[0] != pts.shape[0]:
                raise ValueError("depth must have one value per point")
            if (d < 0).any() or not np.all(np.isfinite(d)):
                raise ValueError("depth must be finite and non-negative")
            object.__setattr__(self, "depth", d)
        if self.viewpoint is not None:
            object.__setattr__(self, "viewpoint", np.asarray(self.viewpoint, dtype=np.float64).reshape(3))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def weights(self) -> np.ndarray:
        return selective_weight(self.depth, n=len(self.points))


def knn(points, query, k: int, *, tree: cKDTree | None = None):
    """Exact k nearest neighbors. Returns ``(indices, distances)``, each (Q, k), ascending."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("empty point cloud")
    if k > len(pts):
        raise ValueError(f"k={k} exceeds point count {len(pts)}")
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    tree = cKDTree(pts) if tree is None else tree
    dist, idx = tree.query(q, k=k)
    return idx.reshape(len(q), k), dist.reshape(len(q), k)


def selective_weight(depth=None, c: float = 2.0, *, n: int | None = None) -> np.ndarray | float:
    """Confidence ``exp(-c |z|)``; one everywhere when depth is unavailable."""
    if depth is None:
        return np.ones(n) if n is not None else 1.0
    return np.exp(-c * np.abs(np.asarray(depth, dtype=np.float64)))


@dataclass(frozen=True)
class LocalQuadric:
    """Height field ``f(u, v) = a u^2 + b uv + c v^2 + d u + e v`` over a tangent frame.

    ``frame`` rows are (t1, t2, n) with n the PCA minor axis.
    """

    origin: np.ndarray
    frame: np.ndarray
    coeffs: np.ndarray
    residual: float

    @property
    def mean_curvature_normal(self) -> np.ndarray:
        a, _, c, _, _ = self.coeffs
        return -2.0 * (a + c) * self.frame[2]


@dataclass(frozen=True)
class QuadricFits:
    """Batched fits: origins (N, 3), frames (N, 3, 3), coeffs (N, 5), residual (N,), ok (N,)."""

    origins: np.ndarray
    frames: np.ndarray
    coeffs: np.ndarray
    residual: np.ndarray
    ok: np.ndarray

    def __getitem__(self, i) -> LocalQuadric:
        return LocalQuadric(self.origins[i], self.frames[i], self.coeffs[i], float(self.residual[i]))


def fit_local_quadrics(points, k: int = DEFAULT_K, centers=None, *, tree: cKDTree | None = None,
                       rcond: float = 1e-10) -> QuadricFits:
    """Gaussian-weighted least-squares quadric at each center over its k-neighborhood.

    The neighborhood includes the center. Weights are ``exp(-d^2 / h^2)``
    with ``h`` the distance to the k-th neighbor. Fits whose weighted normal
    matrix is numerically rank deficient are flagged in ``ok``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if k < 6:
        raise ValueError("k must be at least 6 to fit a quadric")
    centers = np.arange(len(pts)) if centers is None else np.asarray(centers, dtype=np.int64)
    idx, dist = knn(pts, pts[centers], k, tree=tree)
    origin = pts[centers]
    nb = pts[idx] - origin[:, None, :]
    h = np.maximum(dist[:, -1], 1e-300)
    w = np.exp(-(dist / h[:, None]) ** 2)

    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, evecs = np.linalg.eigh(cov)
    # eigh sorts ascending: minor axis first
    normal = evecs[:, :, 0]
    t1 = evecs[:, :, 2]
    t2 = np.cross(normal, t1)
    frames = np.stack([t1, t2, normal], axis=1)

    local = np.einsum("nkj,nij->nki", nb, frames) / h[:, None, None]
    u, v, z = local[..., 0], local[..., 1], local[..., 2]
    X = np.stack([u * u, u * v, v * v, u, v], axis=-1)
    XtW = X * w[..., None]
    A = np.einsum("nki,nkj->nij", XtW, X)
    rhs = np.einsum("nki,nk->ni", XtW, z)
    ev = np.linalg.eigvalsh(A)
    ok = ev[:, 0] > rcond * np.maximum(ev[:, -1], 1e-300)
    A[~ok] = np.eye(5)
    rhs[~ok] = 0.0
    sol = np.linalg.solve(A, rhs[..., None])[..., 0]
    resid = z - np.einsum("nki,ni->nk", X, sol)
    residual = np.sqrt(np.sum(w * resid ** 2, axis=1) / np.sum(w, axis=1)) * h
    coeffs = sol.copy()
    coeffs[:, :3] /= h[:, None]
    coeffs[~ok] = np.nan
    return QuadricFits(origin, frames, coeffs, residual, ok)


def fit_local_quadric(points, center_index: int, k: int = DEFAULT_K) -> LocalQuadric:
    """Quadric fit at a single point; raises on a degenerate neighborhood."""
    fits = fit_local_quadrics(points, k, np.array([center_index]))
    if not fits.ok[0]:
        raise np.linalg.LinAlgError(f"degenerate neighborhood around point {center_index}")
    return fits[0]


@dataclass(frozen=True)
class LaplacianEstimate:
    """Per-point mean-curvature-normal vectors; ``ok`` is False for failed fits (delta is 0 there)."""

    delta: np.ndarray
    normals: np.ndarray
    ok: np.ndarray


def approx_laplacian(cloud, k: int = DEFAULT_K, *, reference_normals=None, viewpoint=None,
                     tree: cKDTree | None = None) -> LaplacianEstimate:
    """Laplace-Beltrami of the coordinate functions from local quadric fits.

    ``delta_i = -2 (a + c) n_i`` points outward on convex regions, the same
    sign as ``v_k - mean(neighbors)`` on a mesh. The vector does not depend
    on the orientation of ``n``; orientation only affects the returned
    normals: they agree with ``reference_normals`` if given, face
    ``viewpoint`` if given, and otherwise point away from the centroid.
    """
    pts = cloud.points if isinstance(cloud, PointCloudFrame) else np.asarray(cloud, dtype=np.float64)
    if not 6 <= k <= len(pts):
        raise ValueError(f"k must lie in [6, {len(pts)}]")
    fits = fit_local_quadrics(pts, k, tree=tree)
    n = fits.frames[:, 2].copy()
    if reference_normals is not None:
        flip = np.einsum("ij,ij->i", n, np.asarray(reference_normals)) < 0
    elif viewpoint is not None:
        flip = np.einsum("ij,ij->i", n, np.asarray(viewpoint, dtype=np.float64) - pts) < 0
    else:
        flip = np.einsum("ij,ij->i", n, pts - pts.mean(axis=0)) < 0
    n[flip] *= -1
    a, c = fits.coeffs[:, 0], fits.coeffs[:, 2]
    delta = -2.0 * (a + c)[:, None] * fits.frames[:, 2]
    delta[~fits.ok] = 0.0
    return LaplacianEstimate(delta, n, fits.ok)


def nearest_squared_distances(a, b, *, tree: cKDTree | None = None):
    """Squared distance from each point of ``a`` to ``b`` (points or a mesh surface)
    and the index of the nearest point (``None`` for meshes)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if isinstance(b, TriangleMesh):
        _, d, _ = project_points(b, a)
        return d * d, None
    tree = cKDTree(np.asarray(b, dtype=np.float64)) if tree is None else tree
    d, idx = tree.query(a)
    return d * d, idx


def chamfer(a, b, weights=None) -> float:
    """One-sided Chamfer distance: mean squared distance from ``a`` to ``b``.

    ``b`` may be a point array or a :class:`TriangleMesh` (point-to-surface).
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if len(a) == 0:
        raise ValueError("empty point set")
    if not isinstance(b, TriangleMesh) and len(b) == 0:
        raise ValueError("empty point set")
    d2, _ = nearest_squared_distances(a, b)
    if weights is None:
        return float(d2.mean())
    weights = np.asarray(weights, dtype=np.float64)
    return float(np.sum(weights * d2) / np.sum(weights))
