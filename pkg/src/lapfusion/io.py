"""File formats: OBJ and PLY meshes/point clouds, the JSON rig file and the
plain-text pose file."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .mesh import TriangleMesh, build_mesh
from .pointcloud import PointCloudFrame
from .skinning import Pose, RigError, RiggedTemplate

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class FormatError(ValueError):
    pass


def write_obj(path, mesh: TriangleMesh, precision: int = 17) -> None:
    fmt = f"v %.{precision}g %.{precision}g %.{precision}g"
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(fmt % tuple(v) for v in mesh.vertices))
        fh.write("\n")
        fh.write("\n".join("f %d %d %d" % tuple(f + 1) for f in mesh.faces))
        fh.write("\n")


def read_obj(path) -> TriangleMesh:
    """Positions and faces only; polygons are fan-triangulated."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    faces.extend([idx[0], idx[j], idx[j + 1]] for j in range(1, len(idx) - 1))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return build_mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_ply(path, points: np.ndarray, faces: np.ndarray | None = None, **properties: np.ndarray) -> None:
    """Binary little-endian PLY with float64 ``x y z`` plus any extra per-vertex
    scalar properties (also float64)."""
    pts = np.asarray(points, dtype=np.float64)
    cols = {"x": pts[:, 0], "y": pts[:, 1], "z": pts[:, 2]}
    for name, val in properties.items():
        val = np.asarray(val, dtype=np.float64)
        if val.shape != (len(pts),):
            raise ValueError(f"property {name!r} needs one value per point")
        cols[name] = val
    dtype = np.dtype([(n, "<f8") for n in cols])
    rec = np.empty(len(pts), dtype=dtype)
    for n, v in cols.items():
        rec[n] = v
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(pts)}"]
    head += [f"property double {n}" for n in cols]
    if faces is not None:
        head += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    head.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
        if faces is not None:
            frec = np.empty(len(faces), dtype=[("n", "u1"), ("v", "<i4", (3,))])
            frec["n"] = 3
            frec["v"] = faces
            fh.write(frec.tobytes())


def read_ply(path) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """Read vertex properties and (triangle) faces from an ascii or binary PLY."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    body = data.index(b"\n", end) + 1
    header = data[:body].decode("ascii").splitlines()
    fmt = None
    elements = []
    for line in header:
        p = line.split()
        if not p:
            continue
        if p[0] == "format":
            fmt = p[1]
        elif p[0] == "element":
            elements.append((p[1], int(p[2]), []))
        elif p[0] == "property":
            if p[1] == "list":
                elements[-1][2].append((p[4], ("list", _PLY_TYPES[p[2]], _PLY_TYPES[p[3]])))
            else:
                elements[-1][2].append((p[2], _PLY_TYPES[p[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{path}: unsupported PLY format {fmt!r}")

    vertex, faces = {}, None
    if fmt == "ascii":
        tokens = data[body:].split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = []
                for _, t in props:
                    if isinstance(t, tuple):
                        n = int(tokens[pos])
                        row.append([float(x) for x in tokens[pos + 1:pos + 1 + n]])
                        pos += 1 + n
                    else:
                        row.append(float(tokens[pos]))
                        pos += 1
                rows.append(row)
            if name == "vertex":
                vertex = {pn: np.array([r[i] for r in rows], dtype=np.float64) for i, (pn, _) in enumerate(props)}
            elif name == "face":
                faces = _triangulate([r[0] for r in rows])
        return vertex, faces

    pos = body
    for name, count, props in elements:
        if any(isinstance(t, tuple) for _, t in props):
            lists = []
            for _ in range(count):
                row = None
                for _, t in props:
                    if isinstance(t, tuple):
                        ct, it = np.dtype("<" + t[1]), np.dtype("<" + t[2])
                        n = int(np.frombuffer(data, ct, 1, pos)[0])
                        pos += ct.itemsize
                        row = np.frombuffer(data, it, n, pos).tolist()
                        pos += n * it.itemsize
                    else:
                        pos += np.dtype(t).itemsize
                lists.append(row)
            if name == "face":
                faces = _triangulate(lists)
        else:
            dtype = np.dtype([(pn, "<" + t) for pn, t in props])
            rec = np.frombuffer(data, dtype, count, pos)
            pos += dtype.itemsize * count
            if name == "vertex":
                vertex = {pn: rec[pn].astype(np.float64) for pn, _ in props}
    return vertex, faces


def _triangulate(polys) -> np.ndarray:
    tris = [[p[0], p[j], p[j + 1]] for p in polys for j in range(1, len(p) - 1)]
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def read_point_cloud(path, frame_index: int = 0) -> PointCloudFrame:
    """Scan from a PLY file; an optional ``depth`` vertex property is kept."""
    v, _ = read_ply(path)
    try:
        pts = np.stack([v["x"], v["y"], v["z"]], axis=1)
    except KeyError:
        raise FormatError(f"{path}: vertex element lacks x/y/z") from None
    return PointCloudFrame(pts, v.get("depth"), frame_index)


def write_point_cloud(path, frame: PointCloudFrame, **extra: np.ndarray) -> None:
    props = dict(extra)
    if frame.depth is not None:
        props["depth"] = frame.depth
    write_ply(path, frame.points, **props)


def save_rig(path, template: RiggedTemplate) -> None:
    """JSON rig: mesh, joint tree, sparse skin weights, association map and metadata."""
    w = template.skin_weights
    rows = []
    for i in range(len(w)):
        nz = np.flatnonzero(w[i])
        rows.append([[int(j), float(w[i, j])] for j in nz])
    doc = {
        "format": "lapfusion-rig",
        "version": 1,
        "vertices": template.mesh.vertices.tolist(),
        "faces": template.mesh.faces.tolist(),
        "joints": [{"name": n, "parent": int(p), "rest": template.joints[j].tolist()}
                   for j, (n, p) in enumerate(zip(template.joint_names, template.parents))],
        "skin_weights": rows,
        "association": template.association.tolist(),
        "meta": template.meta,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_rig(path) -> RiggedTemplate:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from None
    if doc.get("format") != "lapfusion-rig":
        raise FormatError(f"{path}: not a rig file")
    mesh = build_mesh(np.array(doc["vertices"], dtype=np.float64), np.array(doc["faces"], dtype=np.int64))
    J = len(doc["joints"])
    w = np.zeros((mesh.n_vertices, J))
    if len(doc["skin_weights"]) != mesh.n_vertices:
        raise RigError("one skin-weight row per vertex is required")
    for i, row in enumerate(doc["skin_weights"]):
        for j, val in row:
            w[i, j] = val
    return RiggedTemplate(
        mesh,
        np.array([j["parent"] for j in doc["joints"]]),
        np.array([j["rest"] for j in doc["joints"]], dtype=np.float64),
        w,
        np.array(doc["association"], dtype=np.float64),
        tuple(j["name"] for j in doc["joints"]),
        doc.get("meta", {}),
    )


def write_poses(path, poses: list[Pose]) -> None:
    """One line per frame: 3J axis-angle values followed by a 3-value translation."""
    with open(path, "w", newline="\n") as fh:
        for p in poses:
            vals = np.concatenate([p.theta.ravel(), p.translation])
            fh.write(" ".join(repr(float(x)) for x in vals) + "\n")


def read_poses(path, n_joints: int) -> list[Pose]:
    """Parse a pose file; the translation columns are optional."""
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                vals = np.array([float(x) for x in line.split()])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if len(vals) == 3 * n_joints:
                poses.append(Pose(vals.reshape(n_joints, 3)))
            elif len(vals) == 3 * n_joints + 3:
                poses.append(Pose(vals[:-3].reshape(n_joints, 3), vals[-3:]))
            else:
                raise FormatError(f"{path}:{lineno}: expected {3 * n_joints} or {3 * n_joints + 3} values, "
                                  f"got {len(vals)}")
    return poses


def write_matrix_market(path, matrix) -> None:
    from scipy.io import mmwrite

    mmwrite(str(path), matrix)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
