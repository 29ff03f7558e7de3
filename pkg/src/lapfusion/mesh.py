"""Indexed triangle meshes: adjacency, mixed Voronoi areas, midpoint
subdivision, closest-point projection and farthest-point anchor sampling."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree


class MeshError(ValueError):
    """Raised for invalid mesh input (bad indices, non-manifold edges, zero-area faces)."""


class TriangleMesh:
    """Immutable indexed triangle surface.

    Use :func:`build_mesh` to construct one; it validates the input.
    Adjacency is derived lazily and stored with sorted neighbor lists so
    reductions over one-rings run in ascending index order.
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        self.vertices.setflags(write=False)
        self.faces.setflags(write=False)

    def __repr__(self) -> str:
        return f"TriangleMesh(n_vertices={self.n_vertices}, n_faces={self.n_faces})"

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices: np.ndarray) -> TriangleMesh:
        """Same topology, new positions. Topology caches are shared."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshError(f"expected vertices of shape {self.vertices.shape}, got {vertices.shape}")
        out = TriangleMesh(vertices, self.faces)
        for name in ("edges", "edge_faces", "adjacency", "valence"):
            if name in self.__dict__:
                out.__dict__[name] = self.__dict__[name]
        return out

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges (E, 2), each row sorted, rows lexicographically sorted."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def edge_faces(self) -> np.ndarray:
        """(E, 2) incident face indices per edge in :attr:`edges`; -1 marks a boundary side."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        fid = np.tile(np.arange(self.n_faces), 3)
        key = e[:, 0] * self.n_vertices + e[:, 1]
        order = np.lexsort((fid, key))
        key, fid = key[order], fid[order]
        ukey, start, count = np.unique(key, return_index=True, return_counts=True)
        out = np.full((len(ukey), 2), -1, dtype=np.int64)
        out[:, 0] = fid[start]
        two = count == 2
        out[two, 1] = fid[start[two] + 1]
        return out

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric 0/1 vertex adjacency in CSR form with sorted column indices."""
        e = self.edges
        n = self.n_vertices
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        adj = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        adj.sort_indices()
        return adj

    @cached_property
    def valence(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def neighbors(self, k: int) -> np.ndarray:
        """Sorted one-ring N(k)."""
        adj = self.adjacency
        return adj.indices[adj.indptr[k]:adj.indptr[k + 1]]

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals_unnormalized, axis=1)

    @property
    def face_normals_unnormalized(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])

    @cached_property
    def face_normals(self) -> np.ndarray:
        n = self.face_normals_unnormalized
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals."""
        n = self.face_normals_unnormalized
        out = np.zeros_like(self.vertices)
        for c in range(3):
            np.add.at(out, self.faces[:, c], n)
        norm = np.linalg.norm(out, axis=1, keepdims=True)
        return out / np.where(norm > 0, norm, 1.0)

    @property
    def total_area(self) -> float:
        return float(self.face_areas.sum())

    @property
    def boundary_vertices(self) -> np.ndarray:
        ef = self.edge_faces
        b = self.edges[ef[:, 1] < 0]
        return np.unique(b)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


def build_mesh(vertices, faces, *, check_area: bool = True) -> TriangleMesh:
    """Validate and construct a :class:`TriangleMesh`.

    Rejects out-of-range indices, faces with repeated corners, edges shared
    by more than two faces and (when ``check_area``) zero-area faces.
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if v.ndim != 2 or v.shape[1] != 3:
        raise MeshError(f"vertices must have shape (K, 3), got {v.shape}")
    if f.ndim != 2 or f.shape[1] != 3:
        raise MeshError(f"faces must have shape (F, 3), got {f.shape}")
    if not np.all(np.isfinite(v)):
        raise MeshError("vertices contain non-finite values")
    if f.size:
        bad = np.flatnonzero((f < 0).any(1) | (f >= len(v)).any(1))
        if bad.size:
            raise MeshError(f"face {bad[0]} references vertex {f[bad[0]].tolist()} "
                            f"outside [0, {len(v)})")
        degenerate = np.flatnonzero((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2]))
        if degenerate.size:
            raise MeshError(f"face {degenerate[0]} has repeated vertex indices {f[degenerate[0]].tolist()}")
    mesh = TriangleMesh(v, f)
    if f.size:
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        ue, counts = np.unique(e, axis=0, return_counts=True)
        if (counts > 2).any():
            i = np.flatnonzero(counts > 2)[0]
            raise MeshError(f"non-manifold edge {tuple(ue[i].tolist())} shared by {counts[i]} faces")
        if check_area:
            scale = max(mesh.bbox_diagonal(), 1e-300)
            tiny = np.flatnonzero(mesh.face_areas <= 1e-14 * scale * scale)
            if tiny.size:
                raise MeshError(f"face {tiny[0]} has zero area")
    return mesh


def _corner_cotangents(mesh: TriangleMesh) -> np.ndarray:
    """(F, 3) cotangent of the interior angle at each face corner."""
    v = mesh.vertices
    f = mesh.faces
    out = np.empty(f.shape)
    for c in range(3):
        p = v[f[:, c]]
        a = v[f[:, (c + 1) % 3]] - p
        b = v[f[:, (c + 2) % 3]] - p
        out[:, c] = np.einsum("ij,ij->i", a, b) / np.linalg.norm(np.cross(a, b), axis=1)
    return out


def voronoi_areas(mesh: TriangleMesh) -> np.ndarray:
    """Mixed Voronoi area per vertex.

    Non-obtuse triangles contribute the exact Voronoi region of each corner;
    an obtuse triangle gives half its area to the obtuse corner and a quarter
    to each of the others. The areas partition the surface.
    """
    areas = mesh.face_areas
    if areas.size and (areas <= 0).any():
        raise MeshError(f"face {int(np.flatnonzero(areas <= 0)[0])} has zero area")
    v = mesh.vertices
    f = mesh.faces
    cot = _corner_cotangents(mesh)
    # squared length of the edge opposite each corner
    opp = np.empty(f.shape)
    for c in range(3):
        d = v[f[:, (c + 1) % 3]] - v[f[:, (c + 2) % 3]]
        opp[:, c] = np.einsum("ij,ij->i", d, d)
    obtuse = cot < 0
    any_obtuse = obtuse.any(1)
    contrib = np.empty(f.shape)
    for c in range(3):
        # corner c touches the two edges opposite the other corners
        c1, c2 = (c + 1) % 3, (c + 2) % 3
        contrib[:, c] = (opp[:, c1] * cot[:, c1] + opp[:, c2] * cot[:, c2]) / 8.0
    contrib[any_obtuse] = (areas[any_obtuse, None] / 4.0) * (1.0 + obtuse[any_obtuse])
    out = np.zeros(mesh.n_vertices)
    for c in range(3):
        np.add.at(out, f[:, c], contrib[:, c])
    return out


@dataclass(frozen=True)
class SurfaceSample:
    """Batch of surface locations given as (face, barycentric weights).

    ``face`` is (N,), ``bary`` is (N, 3). ``skin_weights`` (N, J) is filled
    in when the samples live on a rigged template.
    """

    face: np.ndarray
    bary: np.ndarray
    skin_weights: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.face)

    def position(self, mesh: TriangleMesh) -> np.ndarray:
        corners = mesh.vertices[mesh.faces[self.face]]
        return np.einsum("ni,nij->nj", self.bary, corners)

    def interpolate(self, mesh: TriangleMesh, values: np.ndarray) -> np.ndarray:
        """Barycentric interpolation of per-vertex ``values`` (K, ...)."""
        corners = values[mesh.faces[self.face]]
        return np.einsum("ni,ni...->n...", self.bary, corners)

    def subset(self, idx) -> SurfaceSample:
        sw = None if self.skin_weights is None else self.skin_weights[idx]
        return SurfaceSample(self.face[idx], self.bary[idx], sw)

    def with_skin_weights(self, vertex_weights: np.ndarray, faces: np.ndarray) -> SurfaceSample:
        w = np.einsum("ni,nij->nj", self.bary, vertex_weights[faces[self.face]])
        w = np.clip(w, 0.0, None)
        w /= w.sum(1, keepdims=True)
        return SurfaceSample(self.face, self.bary, w)


@dataclass(frozen=True)
class Subdivision:
    """Result of :func:`midpoint_subdivide`.

    ``samples`` locates every output vertex on the *input* mesh (face +
    barycentric weights), so repeated subdivision can be traced back to the
    coarsest mesh.
    """

    mesh: TriangleMesh
    attributes: np.ndarray | None
    samples: SurfaceSample
    face_parent: np.ndarray
    corner_bary: np.ndarray


def midpoint_subdivide(mesh: TriangleMesh, vertex_attributes: np.ndarray | None = None,
                       *, normalize: bool = False, levels: int = 1,
                       _face_parent=None, _corner_bary=None) -> Subdivision:
    """Split every triangle into four through its edge midpoints.

    Original vertices keep their index and position; edge ``i`` of
    ``mesh.edges`` becomes vertex ``K + i``. Attributes are averaged over the
    edge endpoints; with ``normalize`` each row is rescaled to sum to one
    (skinning weights).
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    K = mesh.n_vertices
    f = mesh.faces
    edges = mesh.edges
    face_parent = np.arange(mesh.n_faces) if _face_parent is None else _face_parent
    corner_bary = (np.broadcast_to(np.eye(3), (mesh.n_faces, 3, 3)).copy()
                   if _corner_bary is None else _corner_bary)

    # map each directed face edge to its midpoint vertex id
    key = edges[:, 0] * K + edges[:, 1]

    def mid(a, b):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return K + np.searchsorted(key, lo * K + hi)

    m01, m12, m20 = mid(f[:, 0], f[:, 1]), mid(f[:, 1], f[:, 2]), mid(f[:, 2], f[:, 0])
    new_faces = np.concatenate([
        np.stack([f[:, 0], m01, m20], 1),
        np.stack([m01, f[:, 1], m12], 1),
        np.stack([m20, m12, f[:, 2]], 1),
        np.stack([m01, m12, m20], 1),
    ])
    new_vertices = np.concatenate([mesh.vertices, 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])])

    attrs = None
    if vertex_attributes is not None:
        a = np.asarray(vertex_attributes, dtype=np.float64)
        if a.shape[0] != K:
            raise ValueError(f"attributes have {a.shape[0]} rows for {K} vertices")
        attrs = np.concatenate([a, 0.5 * (a[edges[:, 0]] + a[edges[:, 1]])])
        if normalize:
            attrs = attrs / attrs.sum(axis=1, keepdims=True)

    b0, b1, b2 = corner_bary[:, 0], corner_bary[:, 1], corner_bary[:, 2]
    h01, h12, h20 = 0.5 * (b0 + b1), 0.5 * (b1 + b2), 0.5 * (b2 + b0)
    new_corner = np.concatenate([
        np.stack([b0, h01, h20], 1),
        np.stack([h01, b1, h12], 1),
        np.stack([h20, h12, b2], 1),
        np.stack([h01, h12, h20], 1),
    ])
    new_parent = np.tile(face_parent, 4)
    out_mesh = TriangleMesh(new_vertices, new_faces)

    if levels > 1:
        return midpoint_subdivide(out_mesh, attrs, normalize=normalize, levels=levels - 1,
                                  _face_parent=new_parent, _corner_bary=new_corner)

    # each vertex is located through the lowest-index face that uses it
    nv = out_mesh.n_vertices
    flat = new_faces.ravel()
    order = np.argsort(flat, kind="stable")
    first = order[np.searchsorted(flat[order], np.arange(nv))]
    fi, ci = first // 3, first % 3
    samples = SurfaceSample(new_parent[fi], new_corner[fi, ci])
    return Subdivision(out_mesh, attrs, samples, new_parent, new_corner)


def closest_points_on_triangles(p, a, b, c):
    """Closest point on triangles (a, b, c) to points p, all (N, 3).

    Region-based search over vertices, edges and the face interior. Returns
    ``(closest, bary)`` with barycentric weights in [0, 1] summing to 1.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    # Voronoi regions in priority order: three vertices, three edges, interior
    regions = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
    bary = np.stack([
        np.select(regions, [1.0, 0.0, 1 - t_ab, 0.0, 1 - t_ac, 0.0], 1 - v - w),
        np.select(regions, [0.0, 1.0, t_ab, 0.0, 0.0, 1 - t_bc], v),
        np.select(regions, [0.0, 0.0, 0.0, 1.0, t_ac, t_bc], w),
    ], axis=1)
    closest = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return closest, bary


class _ProjectionIndex:
    def __init__(self, mesh: TriangleMesh):
        tri = mesh.vertices[mesh.faces]
        self.centroids = tri.mean(axis=1)
        self.face_radius = np.linalg.norm(tri - self.centroids[:, None], axis=2).max(axis=1)
        self.radius = float(self.face_radius.max())
        self.tree = cKDTree(self.centroids)
        self.tri = tri


def _projection_index(mesh: TriangleMesh) -> _ProjectionIndex:
    idx = mesh.__dict__.get("_projection_index")
    if idx is None:
        idx = _ProjectionIndex(mesh)
        mesh.__dict__["_projection_index"] = idx
    return idx


def _closest_among(index: _ProjectionIndex, q, qi, ci):
    tri = index.tri[ci]
    cp, bc = closest_points_on_triangles(q[qi], tri[:, 0], tri[:, 1], tri[:, 2])
    d2 = np.einsum("ij,ij->i", cp - q[qi], cp - q[qi])
    best = np.full(len(q), np.inf)
    np.minimum.at(best, qi, d2)
    # distances equal up to round-off count as ties; the lowest face index wins
    tie = d2 <= best[qi] * (1 + 1e-12) + 1e-300
    face = np.full(len(q), np.iinfo(np.int64).max)
    np.minimum.at(face, qi[tie], ci[tie])
    pick = np.flatnonzero(tie & (ci == face[qi]))
    pick = pick[np.unique(qi[pick], return_index=True)[1]]
    return ci[pick], bc[pick], d2[pick], cp[pick]


def project_points(mesh: TriangleMesh, points, *, chunk: int = 20000, width: int = 10):
    """Exact closest surface point for each query.

    Returns ``(SurfaceSample, distance, closest_points)``. The faces with the
    ``width`` nearest centroids are tested exactly; when a face outside that
    window could still be closer (its bounding sphere reaches inside the
    best distance found) every face in range is tested as well, so the
    result equals the exhaustive minimum.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if mesh.n_faces == 0:
        raise MeshError("cannot project onto a mesh without faces")
    index = _projection_index(mesh)
    if not np.isfinite(index.radius):
        raise FloatingPointError("mesh extent overflows")
    nf = mesh.n_faces
    faces = np.empty(len(pts), dtype=np.int64)
    bary = np.empty((len(pts), 3))
    dist = np.empty(len(pts))
    closest = np.empty((len(pts), 3))
    width = min(width, nf)
    for s in range(0, len(pts), chunk):
        q = pts[s:s + chunk]
        nq = len(q)
        dd, cc = index.tree.query(q, k=width)
        dd, cc = dd.reshape(nq, width), cc.reshape(nq, width)
        f, b, d2, cp = _closest_among(index, q, np.repeat(np.arange(nq), width), cc.ravel())
        if width < nf:
            upper = np.sqrt(d2) * (1 + 1e-12) + 1e-15
            redo = np.flatnonzero(dd[:, -1] - index.radius <= upper)
            if len(redo):
                balls = index.tree.query_ball_point(q[redo], upper[redo] + index.radius)
                qi = np.repeat(np.arange(len(redo)), [len(x) for x in balls])
                ci = np.fromiter((j for x in balls for j in x), dtype=np.int64, count=len(qi))
                f[redo], b[redo], d2[redo], cp[redo] = _closest_among(index, q[redo], qi, ci)
        faces[s:s + chunk] = f
        bary[s:s + chunk] = b
        dist[s:s + chunk] = np.sqrt(d2)
        closest[s:s + chunk] = cp
    return SurfaceSample(faces, bary), dist, closest


def project_point(mesh: TriangleMesh, p):
    """Single-point form of :func:`project_points`: ``(SurfaceSample, distance)``."""
    sample, dist, _ = project_points(mesh, np.asarray(p, dtype=np.float64)[None])
    return sample, float(dist[0])


def sample_anchors(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest-point selection of ``n`` vertex indices.

    The first index is drawn from ``seed``; every following pick maximizes
    the Euclidean distance to the already chosen set (ties go to the lowest
    index).
    """
    K = mesh.n_vertices
    if n > K:
        raise ValueError(f"cannot sample {n} anchors from {K} vertices")
    if n <= 0:
        return np.empty(0, dtype=np.int64)
    v = mesh.vertices
    rng = np.random.default_rng(seed)
    out = np.empty(n, dtype=np.int64)
    out[0] = rng.integers(K)
    mind = np.sum((v - v[out[0]]) ** 2, axis=1)
    for i in range(1, n):
        out[i] = int(np.argmax(mind))
        np.minimum(mind, np.sum((v - v[out[i]]) ** 2, axis=1), out=mind)
    return out


def icosphere(level: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron with vertices pushed onto the sphere."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    mesh = TriangleMesh(v / np.linalg.norm(v, axis=1, keepdims=True), f)
    for _ in range(level):
        mesh = midpoint_subdivide(mesh).mesh
        mesh = TriangleMesh(mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True), mesh.faces)
    return build_mesh(mesh.vertices * radius, mesh.faces)


def grid_mesh(nx: int, ny: int, spacing: float = 1.0, *, hexagonal: bool = True) -> TriangleMesh:
    """Planar triangulated grid in z = 0; ``hexagonal`` gives equilateral triangles."""
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    x = i * spacing + (0.5 * spacing * (j % 2) if hexagonal else 0.0)
    y = j * spacing * (np.sqrt(3) / 2 if hexagonal else 1.0)
    v = np.stack([x.ravel(), y.ravel(), np.zeros(x.size)], 1)
    faces = []
    for r in range(ny - 1):
        for c in range(nx - 1):
            a, b = r * nx + c, r * nx + c + 1
            d, e = (r + 1) * nx + c, (r + 1) * nx + c + 1
            if not hexagonal or r % 2 == 0:
                faces += [[a, b, d], [b, e, d]] if hexagonal else [[a, b, e], [a, e, d]]
            else:
                faces += [[a, b, e], [a, e, d]]
    return build_mesh(v, np.array(faces))
