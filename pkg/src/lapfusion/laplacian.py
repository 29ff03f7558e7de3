"""Discrete Laplacian operators and anchored Laplacian reconstruction."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .mesh import MeshError, TriangleMesh, _corner_cotangents, voronoi_areas

log = logging.getLogger(__name__)

COT_CLAMP = 1.0e4


class SolverError(RuntimeError):
    """The reconstruction system is singular or did not converge."""


@dataclass(frozen=True)
class LaplacianMatrix:
    """Sparse K x K operator. Rows annihilate constants.

    ``clamped`` counts cotangent edge weights clipped to +-``COT_CLAMP``
    (only meaningful for the cotangent kind).
    """

    matrix: sparse.csr_matrix
    kind: str
    clamped: int = 0

    def __matmul__(self, x):
        return self.matrix @ x

    @property
    def shape(self):
        return self.matrix.shape


def _assemble(n: int, rows, cols, w, diag) -> sparse.csr_matrix:
    # M[k, j] = -w_kj (j != k), M[k, k] = diag_k
    r = np.concatenate([rows, np.arange(n)])
    c = np.concatenate([cols, np.arange(n)])
    d = np.concatenate([-w, diag])
    m = sparse.csr_matrix((d, (r, c)), shape=(n, n))
    m.sum_duplicates()
    m.sort_indices()
    return m


def uniform_laplacian(mesh: TriangleMesh) -> LaplacianMatrix:
    """``(L v)_k = v_k - mean of the one-ring``."""
    val = mesh.valence
    if (val == 0).any():
        raise MeshError(f"vertex {int(np.flatnonzero(val == 0)[0])} is isolated")
    adj = mesh.adjacency.tocoo()
    w = 1.0 / val[adj.row]
    return LaplacianMatrix(_assemble(mesh.n_vertices, adj.row, adj.col, w, np.ones(mesh.n_vertices)), "uniform")


def cotangent_edge_weights(mesh: TriangleMesh) -> tuple[np.ndarray, int]:
    """Half the sum of the cotangents opposite each edge of ``mesh.edges``.

    Boundary edges use their single opposite angle. Returns the weights and
    the number clamped to +-``COT_CLAMP``.
    """
    cot = _corner_cotangents(mesh)
    f = mesh.faces
    K = mesh.n_vertices
    e = mesh.edges
    key = e[:, 0] * K + e[:, 1]
    w = np.zeros(len(e))
    for c in range(3):
        a, b = f[:, (c + 1) % 3], f[:, (c + 2) % 3]
        idx = np.searchsorted(key, np.minimum(a, b) * K + np.maximum(a, b))
        np.add.at(w, idx, 0.5 * cot[:, c])
    bad = ~np.isfinite(w) | (np.abs(w) > COT_CLAMP)
    n_clamped = int(bad.sum())
    if n_clamped:
        log.warning("clamped %d cotangent weights to +-%g", n_clamped, COT_CLAMP)
        w = np.clip(np.nan_to_num(w, nan=0.0, posinf=COT_CLAMP, neginf=-COT_CLAMP), -COT_CLAMP, COT_CLAMP)
    return w, n_clamped


def cotangent_laplacian(mesh: TriangleMesh, areas: np.ndarray | None = None) -> LaplacianMatrix:
    """Area-normalized cotangent Laplace-Beltrami operator.

    ``(L v)_k = 1/a_k * sum_j (cot a + cot b)/2 * (v_k - v_j)``, which maps
    vertex positions to the mean-curvature normal (outward on convex shapes).
    """
    a = voronoi_areas(mesh) if areas is None else np.asarray(areas, dtype=np.float64)
    w, n_clamped = cotangent_edge_weights(mesh)
    e = mesh.edges
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    ww = np.concatenate([w, w]) / a[rows]
    diag = np.zeros(mesh.n_vertices)
    np.add.at(diag, rows, ww)
    return LaplacianMatrix(_assemble(mesh.n_vertices, rows, cols, ww, diag), "cotangent", n_clamped)


def uniform_angle_laplacian(mesh: TriangleMesh, areas: np.ndarray | None = None) -> LaplacianMatrix:
    """Cotangent operator with both opposite angles replaced by pi/2 - pi/|N(k)|.

    Row k reads ``cot(alpha_k)/a_k * (|N(k)| u_k - sum_j u_j)``.
    """
    val = mesh.valence
    if (val <= 2).any():
        k = int(np.flatnonzero(val <= 2)[0])
        raise MeshError(f"vertex {k} has valence {val[k]}; uniform-angle weights need at least 3 neighbors")
    a = voronoi_areas(mesh) if areas is None else np.asarray(areas, dtype=np.float64)
    coef = 1.0 / np.tan(np.pi / 2 - np.pi / val) / a
    adj = mesh.adjacency.tocoo()
    return LaplacianMatrix(_assemble(mesh.n_vertices, adj.row, adj.col, coef[adj.row], coef * val), "uniform_angle")


OPERATORS = {
    "uniform": uniform_laplacian,
    "cotangent": cotangent_laplacian,
    "uniform_angle": uniform_angle_laplacian,
}


def scale_field(field: np.ndarray, s: float) -> np.ndarray:
    """Multiply a Laplacian field by ``s`` (s > 1 sharpens, s < 1 smooths)."""
    if not np.isfinite(s):
        raise ValueError("scale must be finite")
    field = np.asarray(field, dtype=np.float64)
    return field if s == 1 else s * field


class LaplacianSolver:
    """Factorized normal equations of the anchored Laplacian least-squares problem.

    Minimizes ``||L u - delta||^2 + w * sum_a ||u_a - c_a||^2`` for any number
    of right-hand sides. The factorization is immutable; :meth:`solve` may be
    called concurrently. Accuracy lost by squaring the system is recovered
    with iterative refinement on the unsquared residual.
    """

    def __init__(self, operator, anchors, anchor_weight: float = 1.0, *, refine: int = 8):
        L = operator.matrix if isinstance(operator, LaplacianMatrix) else sparse.csr_matrix(operator)
        anchors = np.asarray(anchors, dtype=np.int64).ravel()
        if anchors.size == 0:
            raise SolverError("at least one anchor is required; the Laplacian alone is singular")
        if anchor_weight <= 0 or not np.isfinite(anchor_weight):
            raise ValueError("anchor_weight must be positive")
        n = L.shape[0]
        if anchors.min() < 0 or anchors.max() >= n:
            raise ValueError("anchor index out of range")
        self.L = L.tocsr()
        self.anchors = anchors
        self.weight = float(anchor_weight)
        self.refine = refine
        self.S = sparse.csr_matrix((np.ones(anchors.size), (np.arange(anchors.size), anchors)),
                                   shape=(anchors.size, n))
        N = (self.L.T @ self.L + self.weight * (self.S.T @ self.S)).tocsc()
        self.normal = N
        self._chol = self._lu = None
        try:
            self._chol = _cholmod_factor(N)
        except (ImportError, ArithmeticError, ValueError) as exc:
            log.info("cholmod unavailable (%s); using SuperLU", exc)
            try:
                self._lu = splinalg.splu(N, permc_spec="COLAMD")
            except (RuntimeError, MemoryError) as exc:
                log.warning("sparse factorization failed (%s); falling back to conjugate gradient", exc)
                self._diag = N.diagonal()

    def _apply_inverse(self, g: np.ndarray) -> np.ndarray:
        if self._chol is not None:
            from cvxopt import cholmod, matrix
            b = matrix(np.asfortranarray(g))
            cholmod.solve(self._chol, b)
            return np.array(b).reshape(g.shape)
        if self._lu is not None:
            return self._lu.solve(g)
        out = np.empty_like(g)
        pre = splinalg.LinearOperator(self.normal.shape, matvec=lambda x: x / self._diag)
        for j in range(g.shape[1]):
            x, info = splinalg.cg(self.normal, g[:, j], M=pre, rtol=1e-12, maxiter=20 * g.shape[0])
            if info != 0:
                res = np.linalg.norm(self.normal @ x - g[:, j])
                raise SolverError(f"conjugate gradient did not converge (residual {res:.3e})")
            out[:, j] = x
        return out

    def _gradient(self, x, target, anchor_pos):
        r1 = target - self.L @ x
        r2 = anchor_pos - x[self.anchors]
        return self.L.T @ r1 + self.weight * (self.S.T @ r2), r1, r2

    def solve(self, target: np.ndarray, anchor_positions: np.ndarray) -> Reconstruction:
        target = np.asarray(target, dtype=np.float64)
        anchor_positions = np.asarray(anchor_positions, dtype=np.float64)
        if target.shape[0] != self.L.shape[0]:
            raise ValueError(f"target has {target.shape[0]} rows, operator has {self.L.shape[0]}")
        if anchor_positions.shape[0] != self.anchors.size:
            raise ValueError("one anchor position per anchor index is required")
        squeeze = target.ndim == 1
        t = target[:, None] if squeeze else target
        c = anchor_positions[:, None] if squeeze else anchor_positions
        g, _, _ = self._gradient(np.zeros_like(t), t, c)
        x = self._apply_inverse(g)
        scale = max(np.abs(x).max(), 1e-300)
        it, prev = 0, np.inf
        for it in range(1, self.refine + 1):
            g, _, _ = self._gradient(x, t, c)
            dx = self._apply_inverse(g)
            x = x + dx
            step = np.abs(dx).max()
            # stop at round-off level or once refinement stagnates
            if step <= 1e-14 * scale or step > 0.5 * prev:
                break
            prev = step
        if not np.all(np.isfinite(x)):
            raise SolverError("reconstruction produced non-finite values")
        _, r1, r2 = self._gradient(x, t, c)
        energy = float(np.sum(r1 ** 2) + self.weight * np.sum(r2 ** 2))
        return Reconstruction(x[:, 0] if squeeze else x, energy, it)


def _cholmod_factor(N: sparse.csc_matrix):
    from cvxopt import cholmod, matrix, spmatrix

    c = sparse.tril(N).tocoo()
    A = spmatrix(matrix(c.data), matrix(c.row.astype(np.int32), tc="i"),
                 matrix(c.col.astype(np.int32), tc="i"), size=N.shape)
    cholmod.options["supernodal"] = 2
    F = cholmod.symbolic(A, uplo="L")
    cholmod.numeric(A, F)
    return F


@dataclass(frozen=True)
class Reconstruction:
    positions: np.ndarray
    residual: float
    refinements: int


def reconstruct(base: TriangleMesh, target: np.ndarray, anchors, anchor_weight: float = 1.0,
                *, operator: LaplacianMatrix | str = "uniform_angle",
                anchor_positions: np.ndarray | None = None) -> Reconstruction:
    """Integrate a Laplacian field over ``base`` with soft positional anchors.

    The operator is built on ``base`` (uniform-angle by default). Anchors are
    held near their ``base`` positions unless ``anchor_positions`` is given.
    """
    if isinstance(operator, str):
        operator = OPERATORS[operator](base)
    anchors = np.asarray(anchors, dtype=np.int64)
    solver = LaplacianSolver(operator, anchors, anchor_weight)
    pos = base.vertices[anchors] if anchor_positions is None else anchor_positions
    return solver.solve(target, pos)
