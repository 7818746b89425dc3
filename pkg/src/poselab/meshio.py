"""Mesh file I/O (ASCII OBJ and PLY) and procedural test meshes.

Mesh files are read in meters; a per-model scale factor in the scene config
converts millimeter models.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .geometry import RigidTransform, TriangleMesh


class MeshParseError(ValueError):
    pass


def _fan(indices: list[int]) -> list[tuple[int, int, int]]:
    return [(indices[0], indices[i], indices[i + 1]) for i in range(1, len(indices) - 1)]


def load_obj(path) -> TriangleMesh:
    """ASCII OBJ: v records and f records; polygon faces are fan-triangulated."""
    vertices: list[list[float]] = []
    triangles: list[tuple[int, int, int]] = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    raw = tok.split("/")[0]
                    i = int(raw)
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                if len(idx) < 3:
                    raise MeshParseError(f"{path}:{lineno}: face needs 3+ vertices")
                triangles.extend(_fan(idx))
    if not vertices:
        raise MeshParseError(f"{path}: no vertices")
    return TriangleMesh(np.array(vertices), np.array(triangles).reshape(-1, 3),
                        name=Path(path).stem)


def load_ply(path) -> TriangleMesh:
    """ASCII PLY: vertex x y z properties plus face vertex-index lists."""
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshParseError(f"{path}: not a PLY file")
    n_vertex = n_face = 0
    vertex_props: list[str] = []
    current = None
    body_at = None
    fmt = None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vertex = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex" and parts[1] != "list":
            vertex_props.append(parts[-1])
        elif parts[0] == "end_header":
            body_at = i + 1
            break
    if body_at is None:
        raise MeshParseError(f"{path}: missing end_header")
    if fmt != "ascii":
        raise MeshParseError(f"{path}: only ascii PLY is supported, got {fmt}")
    try:
        ix, iy, iz = (vertex_props.index(c) for c in ("x", "y", "z"))
    except ValueError:
        raise MeshParseError(f"{path}: vertex element lacks x/y/z") from None

    body = [ln for ln in lines[body_at:] if ln.strip()]
    if len(body) < n_vertex + n_face:
        raise MeshParseError(f"{path}: truncated body")
    verts = np.empty((n_vertex, 3))
    for i in range(n_vertex):
        parts = body[i].split()
        verts[i] = (float(parts[ix]), float(parts[iy]), float(parts[iz]))
    triangles: list[tuple[int, int, int]] = []
    for i in range(n_face):
        parts = body[n_vertex + i].split()
        cnt = int(parts[0])
        triangles.extend(_fan([int(p) for p in parts[1:1 + cnt]]))
    return TriangleMesh(verts, np.array(triangles).reshape(-1, 3), name=Path(path).stem)


def load_mesh(path, scale: float = 1.0) -> TriangleMesh:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        mesh = load_obj(path)
    elif ext == ".ply":
        mesh = load_ply(path)
    else:
        raise MeshParseError(f"unsupported mesh format: {path}")
    return mesh.scaled(scale) if scale != 1.0 else mesh


def save_points_ply(path, points: np.ndarray) -> None:
    """Write an (n,3) point set as an ASCII PLY point cloud."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("end_header\n")
        for p in pts:
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


# ---------------------------------------------------------------------------
# procedural meshes
#
# The simulation benchmark needs shapes whose silhouette pins down the full
# rotation, so every built-in is chiral: no nontrivial rotational symmetry.
# Silhouette rendering only needs coverage, so unions of overlapping boxes
# are fine without CSG.
# ---------------------------------------------------------------------------

_BOX_TRIS = np.array([
    [0, 1, 2], [0, 2, 3], [4, 6, 5], [4, 7, 6],
    [0, 4, 5], [0, 5, 1], [3, 2, 6], [3, 6, 7],
    [0, 3, 7], [0, 7, 4], [1, 5, 6], [1, 6, 2],
], dtype=np.int64)


def _box_verts(size, center) -> np.ndarray:
    sx, sy, sz = np.asarray(size, dtype=np.float64) / 2.0
    cx, cy, cz = center
    return np.array([
        [cx - sx, cy - sy, cz - sz], [cx + sx, cy - sy, cz - sz],
        [cx + sx, cy + sy, cz - sz], [cx - sx, cy + sy, cz - sz],
        [cx - sx, cy - sy, cz + sz], [cx + sx, cy - sy, cz + sz],
        [cx + sx, cy + sy, cz + sz], [cx - sx, cy + sy, cz + sz],
    ])


def make_box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0), name="box") -> TriangleMesh:
    return TriangleMesh(_box_verts(size, center), _BOX_TRIS.copy(), name=name)


def _union_boxes(boxes, name) -> TriangleMesh:
    verts = [_box_verts(size, center) for size, center in boxes]
    tris = [_BOX_TRIS + 8 * i for i in range(len(verts))]
    mesh_v = np.vstack(verts)
    mesh_v -= (mesh_v.min(axis=0) + mesh_v.max(axis=0)) / 2.0  # center on bbox
    return TriangleMesh(mesh_v, np.vstack(tris), name=name)


def make_icosphere(radius: float = 0.5, subdivisions: int = 3,
                   name="icosphere") -> TriangleMesh:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    v /= np.linalg.norm(v[0])
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}
        verts = list(v)

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_f = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_f += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v = np.array(verts)
        f = np.array(new_f, dtype=np.int64)
    return TriangleMesh(v * radius, f, name=name)


def make_l_beam(scale: float = 1.0) -> TriangleMesh:
    """Thick L of two unequal arms; every silhouette pins the orientation."""
    boxes = [
        ((0.30 * scale, 0.12 * scale, 0.10 * scale), (0.0, 0.0, 0.0)),
        ((0.12 * scale, 0.26 * scale, 0.14 * scale),
         (0.09 * scale, 0.17 * scale, 0.02 * scale)),
    ]
    return _union_boxes(boxes, "l_beam")


def make_hammer(scale: float = 1.0) -> TriangleMesh:
    """Long thin handle with a bulky off-axis head."""
    boxes = [
        ((0.34 * scale, 0.07 * scale, 0.07 * scale), (0.0, 0.0, 0.0)),
        ((0.10 * scale, 0.22 * scale, 0.11 * scale),
         (0.14 * scale, 0.04 * scale, 0.03 * scale)),
    ]
    return _union_boxes(boxes, "hammer")


def make_boot(scale: float = 1.0) -> TriangleMesh:
    """Flat sole with a tall shaft over one end, shifted sideways."""
    boxes = [
        ((0.28 * scale, 0.16 * scale, 0.08 * scale), (0.0, 0.0, 0.0)),
        ((0.12 * scale, 0.13 * scale, 0.18 * scale),
         (-0.07 * scale, -0.015 * scale, 0.12 * scale)),
    ]
    return _union_boxes(boxes, "boot")


def make_step_block(scale: float = 1.0) -> TriangleMesh:
    """Slab with one bulky corner tower."""
    boxes = [
        ((0.30 * scale, 0.22 * scale, 0.08 * scale), (0.0, 0.0, 0.0)),
        ((0.14 * scale, 0.10 * scale, 0.16 * scale),
         (0.07 * scale, 0.055 * scale, 0.11 * scale)),
    ]
    return _union_boxes(boxes, "step_block")


def make_zig_block(scale: float = 1.0) -> TriangleMesh:
    """Z of three unequal bars; bulky from every view and chiral."""
    boxes = [
        ((0.26 * scale, 0.10 * scale, 0.09 * scale), (0.0, 0.0, 0.0)),
        ((0.10 * scale, 0.18 * scale, 0.12 * scale),
         (0.08 * scale, 0.13 * scale, 0.015 * scale)),
        ((0.16 * scale, 0.09 * scale, 0.15 * scale),
         (-0.05 * scale, -0.09 * scale, 0.03 * scale)),
    ]
    return _union_boxes(boxes, "zig_block")


def benchmark_meshes(scale: float = 1.0) -> list[TriangleMesh]:
    """The five chiral built-ins used by the simulation benchmark."""
    return [
        make_l_beam(scale),
        make_hammer(scale),
        make_boot(scale),
        make_step_block(scale),
        make_zig_block(scale),
    ]


def sample_surface_points(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    return a[tri] + u[:, None] * (b[tri] - a[tri]) + v[:, None] * (c[tri] - a[tri])


def random_rotation(rng: np.random.Generator) -> RigidTransform:
    """Uniform random rotation: normalized 4-normal quaternion sample."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return RigidTransform(rotation=q)


def look_at(camera_pos, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose with +z looking from camera_pos toward target."""
    pos = np.asarray(camera_pos, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - pos
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    if np.linalg.norm(right) < 1e-9:  # forward parallel to up: pick another up
        upv = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, upv)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)  # columns: camera x, y, z in world
    return RigidTransform.from_matrix(R, pos)
