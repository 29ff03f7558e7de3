import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lapfusion.mesh import (MeshError, build_mesh, closest_points_on_triangles, grid_mesh, icosphere,
                            midpoint_subdivide, project_point, project_points, sample_anchors, voronoi_areas)


def tetrahedron():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    f = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]])
    return build_mesh(v, f)


def brute_distance(mesh, p):
    tri = mesh.vertices[mesh.faces]
    cp, _ = closest_points_on_triangles(np.broadcast_to(p, tri[:, 0].shape), tri[:, 0], tri[:, 1], tri[:, 2])
    return np.linalg.norm(cp - p, axis=1).min()


def test_single_triangle_neighbors():
    m = build_mesh(np.eye(3), [[0, 1, 2]])
    assert m.neighbors(0).tolist() == [1, 2]


def test_tetrahedron_valence():
    assert tetrahedron().valence.tolist() == [3, 3, 3, 3]


def test_out_of_range_index():
    with pytest.raises(MeshError, match="outside"):
        build_mesh(np.zeros((4, 3)), [[0, 1, 7]])


def test_non_manifold_edge_named():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], float)
    with pytest.raises(MeshError, match=r"\(0, 1\)"):
        build_mesh(v, [[0, 1, 2], [1, 0, 3], [0, 1, 4]])


def test_repeated_corner_and_zero_area():
    with pytest.raises(MeshError):
        build_mesh(np.eye(3), [[0, 0, 1]])
    with pytest.raises(MeshError, match="zero area"):
        build_mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])


def test_adjacency_symmetric_and_sorted():
    m = icosphere(2)
    adj = m.adjacency
    assert (adj != adj.T).nnz == 0
    for k in range(m.n_vertices):
        nb = m.neighbors(k)
        assert np.all(np.diff(nb) > 0)


def test_edge_faces_closed_and_open():
    assert (icosphere(1).edge_faces >= 0).all()
    g = grid_mesh(4, 4)
    assert (g.edge_faces[:, 1] < 0).sum() == 2 * 3 + 2 * 3
    assert len(g.boundary_vertices) == 12


def test_voronoi_equilateral_triangle():
    v = np.array([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]])
    m = build_mesh(v, [[0, 1, 2]])
    np.testing.assert_allclose(voronoi_areas(m), m.total_area / 3, rtol=1e-12)


def test_voronoi_hex_grid_interior():
    g = grid_mesh(7, 7, 1.0)
    a = voronoi_areas(g)
    interior = np.flatnonzero(g.valence == 6)
    assert interior.size > 0
    # oracle: one third of each incident equilateral triangle
    np.testing.assert_allclose(a[interior], 6 * (np.sqrt(3) / 4) / 3, rtol=1e-12)
    np.testing.assert_allclose(a[interior], np.sqrt(3) / 2, rtol=1e-12)


def test_voronoi_icosphere_area():
    r = 1.7
    m = icosphere(3, r)
    assert abs(voronoi_areas(m).sum() / (4 * np.pi * r * r) - 1) < 0.02


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_voronoi_partition(seed):
    rng = np.random.default_rng(seed)
    base = icosphere(1)
    m = build_mesh(base.vertices + 0.15 * rng.standard_normal(base.vertices.shape), base.faces)
    a = voronoi_areas(m)
    assert (a > 0).all()
    assert abs(a.sum() - m.total_area) <= 1e-9 * m.total_area


def test_subdivide_one_triangle():
    m = build_mesh(np.eye(3), [[0, 1, 2]])
    s = midpoint_subdivide(m, np.array([[1.0, 0], [0, 1], [0.5, 0.5]]), normalize=True)
    assert s.mesh.n_faces == 4 and s.mesh.n_vertices == 6
    # edge (0, 1) becomes vertex 3
    np.testing.assert_allclose(s.attributes[3], [0.5, 0.5])


def test_subdivide_counts_two_levels():
    m = icosphere(2)
    s = midpoint_subdivide(m, levels=2)
    assert s.mesh.n_faces == 16 * m.n_faces
    # the paper-scale count: 13,776 faces become 220,416
    assert 13_776 * 16 == 220_416


def test_subdivide_preserves_surface():
    m = icosphere(1)
    s = midpoint_subdivide(m, levels=2)
    np.testing.assert_array_equal(s.mesh.vertices[:m.n_vertices], m.vertices)
    # every vertex is an exact barycentric point of an original face
    np.testing.assert_allclose(s.samples.position(m), s.mesh.vertices, atol=1e-15)
    one = midpoint_subdivide(m)
    e = m.edges
    np.testing.assert_allclose(one.mesh.vertices[m.n_vertices:], 0.5 * (m.vertices[e[:, 0]] + m.vertices[e[:, 1]]))
    assert (one.samples.bary >= 0).all()
    np.testing.assert_allclose(one.samples.bary.sum(1), 1.0, atol=1e-12)


def test_project_on_face_and_above_centroid():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
    m = build_mesh(v, [[0, 1, 2]])
    p = np.array([0.2, 0.3, 0.0])
    s, d = project_point(m, p)
    assert d < 1e-15
    np.testing.assert_allclose(s.position(m)[0], p, atol=1e-15)
    c = v.mean(0)
    s, d = project_point(m, c + [0, 0, 0.7])
    assert d == pytest.approx(0.7, abs=1e-15)
    np.testing.assert_allclose(s.bary[0], [1 / 3] * 3, atol=1e-12)


def test_closest_point_regions():
    a, b, c = np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]]), np.array([[0.0, 1, 0]])
    cases = {(-1.0, -1.0, 0.5): (0, 0, 0), (2.0, -0.5, 0): (1, 0, 0), (0.5, -2, 1): (0.5, 0, 0),
             (1, 1, -3): (0.5, 0.5, 0), (0.25, 0.25, 2): (0.25, 0.25, 0)}
    for p, expect in cases.items():
        cp, bary = closest_points_on_triangles(np.array([p]), a, b, c)
        np.testing.assert_allclose(cp[0], expect, atol=1e-15)
        np.testing.assert_allclose(bary[0] @ np.vstack([a, b, c]), expect, atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_projection_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    base = icosphere(3)  # 1280 faces; perturbed to get irregular triangles
    m = build_mesh(base.vertices * (1 + 0.05 * rng.standard_normal((base.n_vertices, 1))), base.faces)
    q = np.concatenate([rng.uniform(-1.5, 1.5, (200, 3)), m.vertices[:50] + 0.01 * rng.standard_normal((50, 3))])
    sample, dist, closest = project_points(m, q)
    brute = np.array([brute_distance(m, p) for p in q])
    np.testing.assert_allclose(dist, brute, atol=1e-9, rtol=0)
    np.testing.assert_allclose(sample.position(m), closest, atol=1e-12)


def test_sample_anchors_basic():
    m = icosphere(2)
    assert sorted(sample_anchors(m, m.n_vertices, 3).tolist()) == list(range(m.n_vertices))
    first = np.random.default_rng(5).integers(m.n_vertices)
    assert sample_anchors(m, 1, 5).tolist() == [first]
    a = sample_anchors(m, 40, 11)
    assert len(set(a.tolist())) == 40
    np.testing.assert_array_equal(a, sample_anchors(m, 40, 11))
    with pytest.raises(ValueError):
        sample_anchors(m, m.n_vertices + 1)


def _min_gap(v):
    from scipy.spatial import cKDTree

    d, _ = cKDTree(v).query(v, k=2)
    return d[:, 1].min()


def test_sample_anchors_spread_vs_random():
    from lapfusion.synthetic import make_synthetic_rig

    sub = midpoint_subdivide(make_synthetic_rig().mesh, levels=2).mesh
    fps, rnd = [], []
    for seed in range(10):
        fps.append(_min_gap(sub.vertices[sample_anchors(sub, 800, seed)]))
        idx = np.random.default_rng(seed).choice(sub.n_vertices, 800, replace=False)
        rnd.append(_min_gap(sub.vertices[idx]))
    assert np.median(fps) >= 0.5 * np.median(rnd)
    assert np.median(fps) > np.median(rnd)
