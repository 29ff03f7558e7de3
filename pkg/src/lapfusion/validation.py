"""Self-checks of the geometric operators against closed-form or brute-force answers."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .laplacian import OPERATORS, cotangent_laplacian, reconstruct, uniform_angle_laplacian
from .mesh import TriangleMesh, build_mesh, closest_points_on_triangles, icosphere, project_points
from .neural import Mlp, gradient_check
from .pointcloud import approx_laplacian, chamfer, knn


@dataclass
class OracleResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _random_mesh(rng: np.random.Generator) -> TriangleMesh:
    base = icosphere(int(rng.integers(1, 3)), float(rng.uniform(0.5, 2.0)))
    v = base.vertices * (1 + 0.1 * rng.standard_normal((base.n_vertices, 1)))
    return build_mesh(v + rng.uniform(-1, 1, 3), base.faces)


def check_null_space(n_meshes: int = 20, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_meshes):
        mesh = _random_mesh(rng)
        for build in OPERATORS.values():
            worst = max(worst, float(np.abs(build(mesh) @ np.ones(mesh.n_vertices)).max()))
    return worst < 1e-9, f"max |M 1| = {worst:.2e}"


def check_sphere_curvature(radius: float = 1.0) -> tuple[bool, str]:
    mesh = icosphere(4, radius)
    d = cotangent_laplacian(mesh) @ mesh.vertices
    mag = np.linalg.norm(d, axis=1)
    cos = np.einsum("ij,ij->i", d, mesh.vertices) / (mag * np.linalg.norm(mesh.vertices, axis=1))
    rel = abs(np.median(mag) * radius / 2 - 1)
    return rel < 0.03 and cos.min() > 0.99, f"median |d| r/2 - 1 = {rel:.2e}, min cos = {cos.min():.5f}"


def check_cloud_curvature(n: int = 5000, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((n, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    est = approx_laplacian(p, 25)
    rel = np.median(np.abs(np.linalg.norm(est.delta, axis=1) / 2 - 1))
    return rel < 0.05, f"median relative error = {rel:.2e}"


def check_roundtrip(seed: int = 1) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    mesh = _random_mesh(rng)
    L = uniform_angle_laplacian(mesh)
    rec = reconstruct(mesh, L @ mesh.vertices, [0], operator=L)
    err = np.sqrt(np.mean(np.sum((rec.positions - mesh.vertices) ** 2, axis=1))) / mesh.bbox_diagonal()
    return err < 1e-8, f"relative RMSE = {err:.2e}"


def check_knn(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    pts = rng.random((10000, 3))
    q = rng.random((100, 3))
    idx, _ = knn(pts, q, 8)
    d = np.linalg.norm(pts[None] - q[:, None], axis=2)
    brute = np.argsort(d, axis=1, kind="stable")[:, :8]
    ok = np.array_equal(idx, brute)
    return ok, "matches exhaustive search" if ok else "mismatch against exhaustive search"


def check_projection(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    mesh = _random_mesh(rng)
    q = rng.uniform(-3, 3, (50, 3))
    _, dist, _ = project_points(mesh, q)
    tri = mesh.vertices[mesh.faces]
    worst = 0.0
    for i, p in enumerate(q):
        cp, _ = closest_points_on_triangles(np.broadcast_to(p, tri[:, 0].shape), tri[:, 0], tri[:, 1], tri[:, 2])
        worst = max(worst, abs(np.linalg.norm(cp - p, axis=1).min() - dist[i]))
    c = chamfer(q, mesh)
    ok = worst < 1e-9 and abs(c - np.mean(dist ** 2)) < 1e-12
    return ok, f"max deviation from exhaustive = {worst:.1e}"


def check_gradient(seed: int = 0, probes: int = 20) -> tuple[bool, str]:
    net = Mlp([7, 16, 16, 3], np.random.default_rng(seed))
    err = gradient_check(net, probes=probes, seed=seed)
    return err < 1e-4, f"max relative error = {err:.2e}"


ORACLES = {
    "operator null space": check_null_space,
    "sphere mean curvature (mesh)": check_sphere_curvature,
    "sphere mean curvature (cloud)": check_cloud_curvature,
    "exact reconstruction": check_roundtrip,
    "knn vs exhaustive": check_knn,
    "projection vs exhaustive": check_projection,
    "MLP gradient": check_gradient,
}


def run_oracles() -> list[OracleResult]:
    out = []
    for name, fn in ORACLES.items():
        t = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # report, don't abort the table
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(OracleResult(name, bool(ok), detail, time.perf_counter() - t))
    return out


def format_table(results: list[OracleResult]) -> str:
    w = max(len(r.name) for r in results)
    lines = [f"{'check':<{w}}  result  time    detail", "-" * (w + 40)]
    for r in results:
        lines.append(f"{r.name:<{w}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:5.2f}s  {r.detail}")
    return "\n".join(lines)
