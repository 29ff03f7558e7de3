import numpy as np
import pytest

from lapfusion.fusion import (BaseMeshModel, DetailModel, FitConfig, TrainingError, TrainingPairs, animate,
                              build_base_mesh, build_training_pairs, detail_amplitude, load_detail_model,
                              max_edge_ratio, new_base_model, normal_consistency, reconstruct_frame, rms_distance,
                              save_detail_model, train_base, train_detail, transfer_details, visible_anchors,
                              with_config)
from lapfusion.laplacian import uniform_angle_laplacian
from lapfusion.mesh import SurfaceSample, grid_mesh, icosphere
from lapfusion.neural import CheckpointError, Mlp
from lapfusion.pointcloud import PointCloudFrame, chamfer
from lapfusion.skinning import Pose, RiggedTemplate, RigError, lbs_apply
from lapfusion.synthetic import RigSpec, WrinkleSpec, bend_sequence, make_synthetic_rig, make_synthetic_scans

SMALL = FitConfig(base_hidden=(32, 32), detail_hidden=(64, 64), base_epochs=20, detail_epochs=10, n_anchors=100,
                  anchor_weight=1e6, lam_r=10.0, frame_batch=2, point_batch=2000, seed=0)


def bent(angle, J=3):
    th = np.zeros((J, 3))
    th[1:, 2] = angle
    return Pose(th)


@pytest.fixture(scope="module")
def rig():
    return make_synthetic_rig(RigSpec(radial=12, blend=0.45))


@pytest.fixture(scope="module")
def data(rig):
    poses = bend_sequence(3, 4, seed=1, max_angle=0.5)
    scans = make_synthetic_scans(rig, poses, WrinkleSpec(amplitude=0.008, wavelength=0.1), noise=3e-4,
                                 sample_count=4000, seed=2)
    return poses, scans


@pytest.fixture(scope="module")
def trained(rig, data):
    poses, scans = data
    base = train_base(rig, scans.frames, poses, SMALL)
    pairs = build_training_pairs(base, scans.frames, poses)
    return base, pairs, train_detail(base, pairs, SMALL)


def zero_detail(base):
    f_l = Mlp([base.feature_dim, 8, 3], zero_last=True)
    return DetailModel(base, f_l)


# --- base mesh ----------------------------------------------------------------

def test_zero_fd_is_template_and_lbs(rig):
    model = new_base_model(rig, SMALL)
    np.testing.assert_array_equal(build_base_mesh(model, Pose.identity(3)).vertices, rig.mesh.vertices)
    np.testing.assert_allclose(build_base_mesh(model, bent(0.6)).vertices, lbs_apply(rig, bent(0.6)), atol=1e-15)
    np.testing.assert_array_equal(model.lbs_only(bent(0.6)).vertices, model.build(bent(0.6)).vertices)
    assert model.f_d.widths[0] == 63 + 9 and model.f_d.widths[-1] == 3


def test_anchors_on_subdivided_template(rig):
    model = new_base_model(rig, SMALL)
    assert len(model.anchors) == 100 and len(set(model.anchors.tolist())) == 100
    assert model.anchors.max() < model.subdivider.canonical.n_vertices
    np.testing.assert_array_equal(model.anchors, new_base_model(rig, SMALL).anchors)


def test_subdivider_matches_midpoint_subdivision(rig):
    model = new_base_model(rig, SMALL)
    sub = model.subdivider
    np.testing.assert_allclose(sub(rig.mesh.vertices).vertices, sub.canonical.vertices, atol=1e-15)
    assert sub.canonical.n_faces == 16 * rig.mesh.n_faces


def test_base_fit_reaches_noise_floor():
    rig = make_synthetic_rig(RigSpec(blend=0.45))
    poses = bend_sequence(3, 3, seed=0, max_angle=0.4)
    noise = 1e-3
    flat = WrinkleSpec(amplitude=0.0, offset=0.0, bulge=0.0)
    scans = make_synthetic_scans(rig, poses, flat, noise=noise, sample_count=3000, seed=1)
    cfg = FitConfig(base_hidden=(32, 32), base_epochs=30, n_anchors=50, frame_batch=3, lr=3e-4)
    base = train_base(rig, scans.frames, poses, cfg)
    fit = np.mean([chamfer(f.points, base.build(p)) for f, p in zip(scans.frames, poses)])
    lbs = np.mean([chamfer(f.points, base.lbs_only(p)) for f, p in zip(scans.frames, poses)])
    assert fit < 2 * noise ** 2 and fit < lbs
    assert base.history[-1]["loss"] <= base.history[0]["loss"]


def test_base_beats_lbs_per_frame(trained, data):
    base, _, _ = trained
    poses, scans = data
    for f, p in zip(scans.frames, poses):
        assert chamfer(f.points, base.build(p)) < chamfer(f.points, base.lbs_only(p))


def _mean_fd_norm(model, poses):
    return np.mean([np.linalg.norm(model.displacement(p), axis=1).mean() for p in poses])


def test_strong_regularizer_shrinks_displacement(rig, data):
    poses, scans = data
    cfg = FitConfig(base_hidden=(32, 32), base_epochs=10, n_anchors=50, frame_batch=2, base_points=1000)
    weak = train_base(rig, scans.frames, poses, cfg.__class__(**{**cfg.__dict__, "lam_r": 1.0}))
    strong = train_base(rig, scans.frames, poses, cfg.__class__(**{**cfg.__dict__, "lam_r": 1e3}))
    assert _mean_fd_norm(strong, poses) < _mean_fd_norm(weak, poses)


def test_anchor_term_pulls_anchors_to_scan(rig, data):
    poses, scans = data
    from scipy.spatial import cKDTree

    def anchor_gap(model):
        out = []
        for f, p in zip(scans.frames, poses):
            ua = model.subdivided(p).vertices[model.anchors]
            out.append(cKDTree(f.points).query(ua)[0].mean())
        return np.mean(out)

    common = dict(base_hidden=(32, 32), base_epochs=10, n_anchors=200, frame_batch=2, base_points=500, lam_r=1.0)
    on = train_base(rig, scans.frames, poses, FitConfig(lam_a=2.0, **common))
    off = train_base(rig, scans.frames, poses, FitConfig(lam_a=0.0, **common))
    assert anchor_gap(on) < anchor_gap(off)
    assert off.history[-1]["e_a"] == 0.0 and on.history[-1]["e_a"] > 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_base_divergence_raises(rig, data):
    poses, scans = data
    cfg = FitConfig(base_hidden=(8,), base_epochs=3, n_anchors=10, lr=1e200)
    with pytest.raises(TrainingError, match="epoch"):
        train_base(rig, scans.frames[:1], poses[:1], cfg)


def test_train_base_input_checks(rig, data):
    poses, scans = data
    with pytest.raises(ValueError):
        train_base(rig, [], [], SMALL)
    with pytest.raises(ValueError):
        train_base(rig, scans.frames, poses[:2], SMALL)


def test_visible_anchors():
    m = icosphere(2)
    cam = np.array([0.0, 0.0, 5.0])
    pts = m.vertices[m.vertices[:, 2] > 0]
    frame = PointCloudFrame(pts, np.linalg.norm(pts - cam, axis=1), 0, cam)
    vis = visible_anchors(m.vertices, m.vertex_normals, frame)
    assert vis[m.vertices[:, 2] > 0.3].all()
    assert not vis[m.vertices[:, 2] < -0.1].any()
    # a point hidden behind a closer scan surface fails the depth test even if it faces the camera
    hidden = np.array([[0.0, 0.0, 0.2]])
    assert not visible_anchors(hidden, np.array([[0.0, 0.0, 1.0]]), frame)[0]
    assert visible_anchors(hidden, np.array([[0.0, 0.0, 1.0]]), PointCloudFrame(pts)).all()


# --- training pairs -----------------------------------------------------------

def test_pairs_basic(trained, data):
    base, pairs, _ = trained
    poses, scans = data
    assert len(pairs) + pairs.skipped == sum(len(f) for f in scans.frames)
    assert np.all(np.isfinite(pairs.gt_laplacian))
    assert ((pairs.weight > 0) & (pairs.weight <= 1)).all()
    np.testing.assert_allclose(pairs.sample.bary.sum(1), 1, atol=1e-9)
    np.testing.assert_allclose(pairs.sample.skin_weights.sum(1), 1, atol=1e-6)
    p = pairs[5]
    assert p.frame == pairs.frame[5] and p.pose is poses[p.frame]


def test_point_on_base_projects_to_itself(trained, data):
    base, _, _ = trained
    poses, _ = data
    mesh = base.build(poses[0])
    s = SurfaceSample(np.arange(0, mesh.n_faces, 7), np.full((len(range(0, mesh.n_faces, 7)), 3), 1 / 3))
    on = s.position(mesh)
    rng = np.random.default_rng(0)
    cloud = np.concatenate([on, mesh.vertices + 1e-4 * rng.standard_normal(mesh.vertices.shape)])
    pairs = build_training_pairs(base, [PointCloudFrame(cloud)], poses[:1])
    n = len(on)
    np.testing.assert_allclose(pairs.projected[:n], on, atol=1e-12)


def flat_rig():
    g = grid_mesh(12, 12, 0.05)
    # a single joint; uniform-angle weights are not needed for pair building
    return RiggedTemplate(g, [-1], np.zeros((1, 3)), np.ones((g.n_vertices, 1)), np.ones((1, 1)))


def test_plane_pairs_have_zero_laplacian():
    rig = flat_rig()
    cfg = FitConfig(base_hidden=(8,), n_anchors=20)
    base = new_base_model(rig, cfg)
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(0.05, 0.45, (3000, 2)), np.zeros(3000)])
    pairs = build_training_pairs(base, [PointCloudFrame(pts)], [Pose.identity(1)])
    assert np.abs(pairs.gt_laplacian).max() < 1e-6


def test_pair_laplacians_follow_wrinkle_curvature():
    spec = RigSpec(blend=0.45)
    rig = make_synthetic_rig(spec)
    wr = WrinkleSpec(amplitude=0.008, wavelength=0.1, offset=0.0, bulge=0.0, min_gain=1.0)
    pose = Pose.identity(3)
    scans = make_synthetic_scans(rig, [pose], wr, noise=1e-4, sample_count=20000, seed=3)
    base = new_base_model(rig, FitConfig(base_hidden=(8,), n_anchors=20))
    pairs = build_training_pairs(base, scans.frames, [pose])

    # analytic mean curvature of the surface of revolution rho(x) = r + h(x)
    def rho(x):
        from lapfusion.synthetic import _smoothstep

        m = 0.5 * wr.wavelength
        taper = _smoothstep(x / m) * _smoothstep((spec.length - x) / m)
        return spec.radius + wr.amplitude * taper * np.sin(2 * np.pi * x / wr.wavelength)

    x = pairs.points[:, 0]
    tube = (x > 0.06) & (x < spec.length - 0.06)
    x = x[tube]
    e = 1e-5
    d1 = (rho(x + e) - rho(x - e)) / (2 * e)
    d2 = (rho(x + e) - 2 * rho(x) + rho(x - e)) / e ** 2
    two_h = 1 / (rho(x) * np.sqrt(1 + d1 ** 2)) - d2 / (1 + d1 ** 2) ** 1.5
    # the wrinkle makes 2H change sign, so magnitudes are compared with |2H|
    mag = np.linalg.norm(pairs.gt_laplacian[tube], axis=1)
    assert np.corrcoef(mag, np.abs(two_h))[0, 1] > 0.7


# --- detail field -------------------------------------------------------------

def _with_targets(pairs, y):
    return TrainingPairs(pairs.sample, y, pairs.weight, pairs.frame, pairs.poses, pairs.points, pairs.projected)


def test_zero_field_regression(trained, data):
    base, pairs, _ = trained
    poses, scans = data
    det = train_detail(base, _with_targets(pairs, np.zeros_like(pairs.gt_laplacian)), SMALL)
    out = det.predict(pairs.sample.subset(slice(0, 2000)), poses[0])
    # the field's natural scale is the RMS Laplacian measured on the scans
    scale = np.sqrt(np.mean(np.sum(pairs.gt_laplacian ** 2, axis=1)))
    assert np.linalg.norm(out, axis=1).mean() < 1e-3 * scale


def test_detail_generalizes_to_held_out_points():
    rig = make_synthetic_rig(RigSpec(blend=0.45))
    pose = bent(0.3)
    wr = WrinkleSpec(amplitude=0.008, wavelength=0.1, min_gain=1.0)
    scans = make_synthetic_scans(rig, [pose], wr, noise=0.0, sample_count=10000, seed=5)
    cfg = FitConfig(base_hidden=(8,), detail_hidden=(128, 128), detail_epochs=60, point_batch=500, n_anchors=20,
                    frequencies=6)
    base = new_base_model(rig, cfg)
    pairs = build_training_pairs(base, scans.frames, [pose])
    idx = np.random.default_rng(0).permutation(len(pairs))
    cut = int(0.8 * len(idx))
    det = train_detail(base, pairs.subset(np.sort(idx[:cut])), cfg)
    test = pairs.subset(np.sort(idx[cut:]))
    err = det.predict(test.sample, pose) - test.gt_laplacian
    rms = lambda a: np.sqrt(np.mean(np.sum(a * a, axis=1)))  # noqa: E731
    assert rms(err) < 0.15 * rms(test.gt_laplacian)


def test_detail_field_depends_on_pose(trained, data):
    base, pairs, _ = trained
    poses, _ = data
    y = pairs.gt_laplacian * np.where(pairs.frame == 0, 1.0, 3.0)[:, None]
    det = train_detail(base, _with_targets(pairs, y), SMALL)
    s = pairs.sample.subset(slice(0, 500))
    tpl = base.template
    q = s.position(tpl.mesh)
    a = det.canonical_field(q, s.skin_weights, poses[0])
    b = det.canonical_field(q, s.skin_weights, poses[1])
    assert np.linalg.norm(a - b) > 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_detail_divergence_raises(trained):
    base, pairs, _ = trained
    cfg = FitConfig(**{**SMALL.__dict__, "lr": 1e200, "detail_epochs": 3})
    with pytest.raises(TrainingError):
        train_detail(base, pairs, cfg)


def test_detail_loss_decreases(trained):
    _, _, det = trained
    assert det.history[-1]["loss"] < det.history[0]["loss"]


def test_identity_pose_prediction_is_canonical(trained):
    base, pairs, det = trained
    s = pairs.sample.subset(slice(0, 300))
    ident = Pose.identity(3)
    direct = det.canonical_field(s.position(base.template.mesh), s.skin_weights, ident)
    np.testing.assert_allclose(det.predict(s, ident), direct, rtol=1e-13, atol=1e-13)


# --- reconstruction and applications ----------------------------------------

def test_zero_field_reconstruction(trained, data):
    base, _, _ = trained
    poses, _ = data
    det = zero_detail(base)
    B = base.subdivided(poses[0])
    S = reconstruct_frame(det, poses[0])
    L = uniform_angle_laplacian(B)
    w = base.config.anchor_weight
    energy = lambda m: np.sum((L @ m.vertices) ** 2) + w * np.sum(  # noqa: E731
        (m.vertices[base.anchors] - B.vertices[base.anchors]) ** 2)
    assert energy(S) <= energy(B)
    # the zero field relaxes the base between anchors; denser anchoring pins it to the base
    sparse_dev = rms_distance(S, B)
    n = base.subdivider.canonical.n_vertices
    dense = BaseMeshModel(base.template, base.f_d, np.arange(0, n, 2), base.config, base.center, base.extent)
    dense_dev = rms_distance(reconstruct_frame(det, poses[0], base=dense), B)
    assert dense_dev < 0.25 * sparse_dev and sparse_dev < 0.5 * base.template.meta["radius"]


def test_topology_is_fixed(trained, data):
    base, _, det = trained
    poses, _ = data
    meshes = animate(det, poses) + [transfer_details(det, base, poses[0])]
    for m in meshes:
        np.testing.assert_array_equal(m.faces, base.subdivider.faces)


def test_scale_one_and_self_transfer_bit_identical(trained, data):
    base, _, det = trained
    poses, _ = data
    S = reconstruct_frame(det, poses[1])
    np.testing.assert_array_equal(reconstruct_frame(det, poses[1], scale=1.0).vertices, S.vertices)
    np.testing.assert_array_equal(transfer_details(det, det.base, poses[1]).vertices, S.vertices)
    # a separately constructed but equal base (fresh solver cache) gives the same bits
    twin = with_config(base)
    np.testing.assert_array_equal(transfer_details(det, twin, poses[1]).vertices, S.vertices)


def test_animate_constant_and_replay(trained, data):
    _, _, det = trained
    poses, _ = data
    same = animate(det, [poses[2]] * 3)
    for m in same[1:]:
        np.testing.assert_array_equal(m.vertices, same[0].vertices)
    for m, p in zip(animate(det, poses), poses):
        np.testing.assert_array_equal(m.vertices, reconstruct_frame(det, p).vertices)


def test_unseen_interpolated_poses_are_smooth(trained, data):
    base, _, det = trained
    poses, _ = data
    seq = [poses[0].interpolate(poses[3], t) for t in np.linspace(0, 1, 6)]
    meshes = animate(det, seq)
    for m in meshes:
        assert np.all(np.isfinite(m.vertices))
        assert max_edge_ratio(m) < 5
    for a, b, pa, pb in zip(meshes[:-1], meshes[1:], seq[:-1], seq[1:]):
        lbs = np.linalg.norm(base.subdivider(base.lbs_only(pb).vertices).vertices
                             - base.subdivider(base.lbs_only(pa).vertices).vertices, axis=1).max()
        assert np.linalg.norm(b.vertices - a.vertices, axis=1).max() < 2 * lbs


def test_transfer_zero_and_energy(trained, rig, data):
    base, _, det = trained
    poses, scans = data
    other = train_base(rig, scans.frames[:2], poses[:2], FitConfig(**{**SMALL.__dict__, "seed": 7,
                                                                        "base_epochs": 5}))
    # a zero field on the target gives the target's own smooth surface
    np.testing.assert_array_equal(transfer_details(zero_detail(base), other, poses[0]).vertices,
                                  reconstruct_frame(zero_detail(other), poses[0]).vertices)
    # the transferred field is the source field at the same query points
    src = det.base.subdivider
    fa = det.canonical_field(src.canonical.vertices, src.skin_weights, poses[0])
    sd = other.subdivider
    fb = det.canonical_field(src.canonical.vertices, sd.skin_weights, poses[0])
    assert abs(np.sum(fb ** 2) / np.sum(fa ** 2) - 1) < 0.1
    out = transfer_details(det, other, poses[0])
    assert out.n_vertices == sd.canonical.n_vertices


def test_transfer_rejects_mismatch(trained):
    _, _, det = trained
    four = make_synthetic_rig(RigSpec(joints=4, radial=12, blend=0.45))
    with pytest.raises(RigError):
        transfer_details(det, new_base_model(four, SMALL), Pose.identity(4))
    finer = make_synthetic_rig(RigSpec(radial=14, blend=0.45))
    with pytest.raises(RigError):
        transfer_details(det, new_base_model(finer, SMALL), Pose.identity(3))


def test_metrics():
    m = icosphere(3)
    assert normal_consistency(m, m) == pytest.approx(1.0, abs=1e-12)
    assert normal_consistency(m, m.with_vertices(m.vertices * [1, 1, 0.5])) < 0.99
    assert rms_distance(m, m) < 1e-12
    bumped = m.with_vertices(m.vertices * (1 + 0.01 * np.sin(5 * m.vertices[:, :1])))
    assert detail_amplitude(bumped, m) > 0 and detail_amplitude(m, m) == 0
    assert max_edge_ratio(m) < 2


def test_checkpoint_roundtrip(trained, rig, data, tmp_path):
    _, _, det = trained
    poses, _ = data
    path = tmp_path / "model.lfd"
    save_detail_model(det, path)
    back = load_detail_model(path, rig)
    assert isinstance(back.base, BaseMeshModel) and back.target == det.target
    np.testing.assert_array_equal(reconstruct_frame(back, poses[0]).vertices,
                                  reconstruct_frame(det, poses[0]).vertices)
    save_detail_model(back, tmp_path / "again.lfd")
    assert (tmp_path / "again.lfd").read_bytes() == path.read_bytes()
    with pytest.raises(CheckpointError, match="different rig"):
        load_detail_model(path, make_synthetic_rig(RigSpec(radial=14, blend=0.45)))
    (tmp_path / "junk.lfd").write_bytes(b"nonsense" * 4)
    with pytest.raises(CheckpointError):
        load_detail_model(tmp_path / "junk.lfd", rig)


def test_displacement_target_adds_offsets(trained, data):
    base, pairs, _ = trained
    poses, _ = data
    det = train_detail(base, pairs, SMALL, target="displacement")
    B = base.subdivided(poses[0])
    S = reconstruct_frame(det, poses[0])
    assert det.target == "displacement"
    assert np.abs(S.vertices - B.vertices).max() < 0.05
