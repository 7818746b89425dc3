"""Scene ingestion: frames, trajectories, meshes, scale and plane alignment.

Camera poses are stored camera-to-world everywhere; COLMAP's world-to-camera
storage is inverted at the parser boundary. Depth images are 16-bit PNGs,
raw value * depth_scale = meters, 0 = invalid.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    TriangleMesh,
    apply_to_point,
    invert,
    rodrigues,
)
from .meshio import load_mesh
from .rasterizer import DepthMap, load_depth_png


class TrajectoryParseError(ValueError):
    pass


class InsufficientDataError(ValueError):
    def __init__(self, message: str, count: int):
        super().__init__(message)
        self.count = count


class SceneConfigError(ValueError):
    pass


@dataclass
class FrameRecord:
    frame_id: int
    camera_to_world: RigidTransform
    rgb_path: str
    depth_path: str | None = None
    timestamp: float | None = None

    def __post_init__(self):
        if not self.rgb_path:
            raise ValueError("rgb_path must be non-empty")


@dataclass
class ObjectLabel:
    object_id: int
    name: str
    mesh: TriangleMesh
    pose_world: RigidTransform
    mesh_path: str = ""


@dataclass
class Scene:
    frames: list[FrameRecord]
    objects: list[ObjectLabel]
    intrinsics: CameraIntrinsics
    scene_id: str = "scene"
    scale_applied: float = 1.0

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a scene needs at least one frame")
        ids = [f.frame_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise ValueError("frame ids must be unique")
        oids = [o.object_id for o in self.objects]
        if len(set(oids)) != len(oids):
            raise ValueError("object ids must be unique")
        for f in self.frames:
            if not (np.all(np.isfinite(f.camera_to_world.translation))
                    and np.all(np.isfinite(f.camera_to_world.rotation))):
                raise ValueError(f"frame {f.frame_id} has a non-finite pose")

    def frame_by_id(self, frame_id: int) -> FrameRecord:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(f"no frame {frame_id}")

    def object_by_id(self, object_id: int) -> ObjectLabel:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise KeyError(f"no object {object_id}")


@dataclass
class SparseTrack:
    point_world: np.ndarray  # unscaled reconstruction units
    observations: list[tuple[int, float, float]]  # (frame_id, u, v)

    def __post_init__(self):
        self.point_world = np.asarray(self.point_world, dtype=np.float64)
        if not self.observations:
            raise ValueError("a track needs at least one observation")


@dataclass
class PlaneModel:
    normal: np.ndarray  # unit
    offset: float  # plane is n . x = offset
    inlier_indices: np.ndarray

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        n = np.linalg.norm(self.normal)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit")


# ---------------------------------------------------------------------------
# trajectory parsers
# ---------------------------------------------------------------------------

def _parse_quat_xyzw(parts, lineno, what):
    qx, qy, qz, qw = (float(x) for x in parts)
    q = np.array([qw, qx, qy, qz])
    n = np.linalg.norm(q)
    if abs(n - 1.0) > 1e-3:
        raise TrajectoryParseError(f"line {lineno}: {what} quaternion norm {n:.6f} "
                                   "is more than 1e-3 from unit")
    if abs(n - 1.0) > 1e-9:
        warnings.warn(f"line {lineno}: renormalizing {what} quaternion (norm {n:.6f})")
    return q / n


def parse_tum_trajectory(text: str) -> list[tuple[float, RigidTransform]]:
    """TUM lines "timestamp tx ty tz qx qy qz qw"; poses are camera-to-world.

    Returns (timestamp, pose) pairs in file order. '#' comments are skipped.
    """
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 8:
            raise TrajectoryParseError(f"line {lineno}: expected 8 fields, got {len(parts)}")
        try:
            stamp = float(parts[0])
            t = np.array([float(x) for x in parts[1:4]])
        except ValueError as e:
            raise TrajectoryParseError(f"line {lineno}: non-numeric field ({e})") from None
        q = _parse_quat_xyzw(parts[4:8], lineno, "TUM")
        out.append((stamp, RigidTransform(q, t)))
    return out


def serialize_tum(poses) -> str:
    """Inverse of parse_tum_trajectory for (timestamp, pose) pairs."""
    lines = []
    for stamp, pose in poses:
        vals = [stamp, *pose.translation, *pose.rotation[1:], pose.rotation[0]]
        lines.append(" ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def parse_colmap_images(text: str) -> list[tuple[int, str, RigidTransform]]:
    """COLMAP images.txt: metadata/points2D line pairs.

    Metadata is "IMG_ID QW QX QY QZ TX TY TZ CAM_ID NAME" storing
    world-to-camera; returned poses are inverted to camera-to-world as
    (image_id, name, pose), in file order. The points2D line may be empty.
    """
    pairs: list[tuple[int, str]] = []
    expecting_points = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("#"):
            continue
        if expecting_points:
            expecting_points = False  # points2D line consumed (may be empty)
            continue
        if not stripped:
            continue
        pairs.append((lineno, stripped))
        expecting_points = True
    if expecting_points:
        raise TrajectoryParseError(
            f"odd line pairing: metadata line {pairs[-1][0]} has no points2D line")
    out = []
    for lineno, meta in pairs:
        parts = meta.split()
        if len(parts) < 10:
            raise TrajectoryParseError(f"line {lineno}: expected 10 fields, got {len(parts)}")
        try:
            image_id = int(parts[0])
            qw, qx, qy, qz = (float(x) for x in parts[1:5])
            t = np.array([float(x) for x in parts[5:8]])
        except ValueError as e:
            raise TrajectoryParseError(f"line {lineno}: {e}") from None
        q = np.array([qw, qx, qy, qz])
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-3:
            raise TrajectoryParseError(f"line {lineno}: malformed quaternion (norm {n:.6f})")
        name = " ".join(parts[9:])
        world_to_cam = RigidTransform(q / n, t)
        out.append((image_id, name, invert(world_to_cam)))
    return out


def parse_colmap_points3d(text: str):
    """COLMAP points3D.txt: "ID X Y Z R G B ERROR TRACK[]" with the track as
    (IMAGE_ID, POINT2D_IDX) pairs. Returns (point3d_id, xyz, [(image_id, p2d_idx)]).
    """
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) < 8:
            raise TrajectoryParseError(f"line {lineno}: expected at least 8 fields")
        pid = int(parts[0])
        xyz = np.array([float(x) for x in parts[1:4]])
        track = parts[8:]
        if len(track) % 2 != 0:
            raise TrajectoryParseError(f"line {lineno}: track must be (image, idx) pairs")
        obs = [(int(track[i]), int(track[i + 1])) for i in range(0, len(track), 2)]
        out.append((pid, xyz, obs))
    return out


def colmap_tracks_to_sparse(points3d_text: str, images_text: str) -> list[SparseTrack]:
    """Resolve points3D tracks to pixel observations via the images.txt points2D rows."""
    images = {}
    pending_id = None
    for line in images_text.splitlines():
        stripped = line.strip()
        if stripped.startswith("#"):
            continue
        if pending_id is not None:
            vals = stripped.split()
            # points2D rows are X Y POINT3D_ID triples
            images[pending_id] = [(float(vals[i]), float(vals[i + 1]))
                                  for i in range(0, len(vals), 3)]
            pending_id = None
            continue
        if not stripped:
            continue
        pending_id = int(stripped.split()[0])
    tracks = []
    for _pid, xyz, obs in parse_colmap_points3d(points3d_text):
        resolved = []
        for image_id, idx in obs:
            if image_id in images and idx < len(images[image_id]):
                u, v = images[image_id][idx]
                resolved.append((image_id, u, v))
        if resolved:
            tracks.append(SparseTrack(xyz, resolved))
    return tracks


# ---------------------------------------------------------------------------
# scale recovery
# ---------------------------------------------------------------------------

MIN_SCALE_SAMPLES = 20


def solve_scale_from_depth(tracks: list[SparseTrack], frames: list[FrameRecord],
                           k: CameraIntrinsics,
                           depth_maps: dict[int, DepthMap] | None = None) -> float:
    """Scale turning reconstruction units into meters.

    For every (track, observation) with valid sensor depth, the ratio
    (metric sensor depth) / (unscaled z of the point in that camera) is one
    sample; the median of the sample multiset is the scale. Depth is looked
    up at the nearest pixel; 0 / missing depth invalidates the sample.
    """
    frame_by_id = {f.frame_id: f for f in frames}
    cache: dict[int, DepthMap | None] = dict(depth_maps or {})
    ratios = []
    for track in tracks:
        for frame_id, u, v in track.observations:
            frame = frame_by_id.get(frame_id)
            if frame is None:
                continue
            if frame_id not in cache:
                cache[frame_id] = (load_depth_png(frame.depth_path, k.depth_scale)
                                   if frame.depth_path else None)
            depth = cache[frame_id]
            if depth is None:
                continue
            xi = int(round(u))
            yi = int(round(v))
            if not (0 <= xi < depth.width and 0 <= yi < depth.height):
                continue
            z_sensor = depth.z[yi, xi]
            if not np.isfinite(z_sensor) or z_sensor <= 0:
                continue
            p_cam = apply_to_point(invert(frame.camera_to_world), track.point_world)
            if p_cam[2] <= 1e-9:
                continue
            ratios.append(z_sensor / p_cam[2])
    if len(ratios) < MIN_SCALE_SAMPLES:
        raise InsufficientDataError(
            f"scale solving needs at least {MIN_SCALE_SAMPLES} valid depth samples, "
            f"got {len(ratios)}", count=len(ratios))
    return float(np.median(ratios))


def solve_scale_from_point_pair(p_a, p_b, known_distance_m: float) -> float:
    """RGB-only fallback: two picked reconstruction points at a known metric distance."""
    d = np.linalg.norm(np.asarray(p_a, float) - np.asarray(p_b, float))
    if d <= 0:
        raise ValueError("picked points coincide")
    if known_distance_m <= 0:
        raise ValueError("known distance must be positive")
    return known_distance_m / d


def apply_scale(scene: Scene, tracks: list[SparseTrack], s: float) -> None:
    """Scale camera translations and track points in place; rotations untouched."""
    if not np.isfinite(s) or s <= 0:
        raise ValueError(f"scale must be positive and finite, got {s}")
    for f in scene.frames:
        f.camera_to_world = RigidTransform(f.camera_to_world.rotation,
                                           f.camera_to_world.translation * s)
    for tr in tracks:
        tr.point_world = tr.point_world * s
    scene.scale_applied *= s


# ---------------------------------------------------------------------------
# plane fit + alignment
# ---------------------------------------------------------------------------

def _tls_plane(points: np.ndarray) -> tuple[np.ndarray, float]:
    centroid = points.mean(axis=0)
    cov = np.cov((points - centroid).T)
    eigval, eigvec = np.linalg.eigh(cov)
    normal = eigvec[:, 0]  # smallest eigenvalue
    return normal, float(normal @ centroid)


def fit_plane_ransac(points, inlier_tol: float, iterations: int = 200,
                     seed: int = 0) -> PlaneModel:
    """RANSAC plane: best inlier count, then total-least-squares refit on inliers.

    Normal sign is chosen so the majority of all points lie on the n.x >= offset
    side. Deterministic for a fixed seed.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise ValueError(f"plane fit needs at least 3 points, got {len(pts)}")
    rng = np.random.default_rng(seed)
    best_count = -1
    best_inliers = None
    degenerate = 0
    for _ in range(iterations):
        i, j, k = rng.choice(len(pts), size=3, replace=False)
        n = np.cross(pts[j] - pts[i], pts[k] - pts[i])
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            degenerate += 1
            continue
        n = n / norm
        d = np.abs(pts @ n - n @ pts[i])
        inliers = d <= inlier_tol
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_inliers is None:
        raise ValueError(f"all {degenerate} sampled triplets were collinear")
    normal, offset = _tls_plane(pts[best_inliers])
    # re-harvest inliers against the refined plane
    d = np.abs(pts @ normal - offset)
    inliers = d <= inlier_tol
    if inliers.sum() >= 3:
        normal, offset = _tls_plane(pts[inliers])
        inliers = np.abs(pts @ normal - offset) <= inlier_tol
    if np.sum(pts @ normal >= offset) < len(pts) / 2.0:
        normal, offset = -normal, -offset
    return PlaneModel(normal, offset, np.nonzero(inliers)[0])


def xy_alignment_transform(plane: PlaneModel) -> RigidTransform:
    """Rigid transform taking the plane to z = 0 with its normal along +z.

    Minimal rotation (axis n x z, angle arccos(n.z)) followed by the offset
    shift; identity when the plane already is the x-y plane.
    """
    n = plane.normal
    z = np.array([0.0, 0.0, 1.0])
    c = float(np.clip(n @ z, -1.0, 1.0))
    axis = np.cross(n, z)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        R = np.eye(3) if c > 0 else rodrigues(np.array([1.0, 0.0, 0.0]), np.pi)
    else:
        R = rodrigues(axis / s, float(np.arctan2(s, c)))
    return RigidTransform.from_matrix(R, np.array([0.0, 0.0, -plane.offset]))


# ---------------------------------------------------------------------------
# scene config (JSON)
# ---------------------------------------------------------------------------

def _pose_from_json(obj) -> RigidTransform:
    return RigidTransform(np.asarray(obj["rotation"], float),
                          np.asarray(obj["translation"], float))


def pose_to_json(t: RigidTransform) -> dict:
    return {"rotation": [float(x) for x in t.rotation],
            "translation": [float(x) for x in t.translation]}


def load_scene(config_path) -> Scene:
    """Load a scene config JSON (see save_scene for the schema).

    Frames may carry inline poses; otherwise poses come from the referenced
    trajectory file (TUM: data line i maps to frame i; COLMAP: by image name).
    """
    config_path = Path(config_path)
    root = config_path.parent
    try:
        cfg = json.loads(config_path.read_text())
    except json.JSONDecodeError as e:
        raise SceneConfigError(f"{config_path}: invalid JSON ({e})") from None

    def resolve(p):
        p = Path(p)
        return str(p if p.is_absolute() else root / p)

    try:
        ki = cfg["intrinsics"]
        intr = CameraIntrinsics(fx=ki["fx"], fy=ki["fy"], cx=ki["cx"], cy=ki["cy"],
                                width=ki["width"], height=ki["height"],
                                depth_scale=ki.get("depth_scale", 0.001))
    except KeyError as e:
        raise SceneConfigError(f"{config_path}: missing intrinsics field {e}") from None

    tum_poses = None
    colmap_by_name = None
    traj = cfg.get("trajectory")
    if traj:
        text = Path(resolve(traj["path"])).read_text()
        if traj["format"] == "tum":
            tum_poses = parse_tum_trajectory(text)
        elif traj["format"] == "colmap":
            colmap_by_name = {name: pose for _, name, pose in parse_colmap_images(text)}
        else:
            raise SceneConfigError(f"unknown trajectory format {traj['format']!r}")

    frames = []
    for i, fr in enumerate(cfg.get("frames", [])):
        if "pose" in fr:
            pose = _pose_from_json(fr["pose"])
        elif colmap_by_name is not None:
            name = Path(fr["rgb"]).name
            if name not in colmap_by_name:
                raise SceneConfigError(f"frame {fr.get('id', i)}: no COLMAP pose for {name!r}")
            pose = colmap_by_name[name]
        elif tum_poses is not None:
            if i >= len(tum_poses):
                raise SceneConfigError(f"frame {fr.get('id', i)}: trajectory has only "
                                       f"{len(tum_poses)} poses")
            pose = tum_poses[i][1]
        else:
            raise SceneConfigError(f"frame {fr.get('id', i)}: no pose and no trajectory")
        frames.append(FrameRecord(
            frame_id=int(fr.get("id", i)),
            camera_to_world=pose,
            rgb_path=resolve(fr["rgb"]),
            depth_path=resolve(fr["depth"]) if fr.get("depth") else None,
            timestamp=fr.get("timestamp"),
        ))

    objects = []
    for ob in cfg.get("objects", []):
        mesh_path = resolve(ob["mesh"])
        mesh = load_mesh(mesh_path, scale=ob.get("scale", 1.0))
        pose = _pose_from_json(ob["pose"]) if "pose" in ob else RigidTransform.identity()
        objects.append(ObjectLabel(object_id=int(ob["id"]), name=ob.get("name", ""),
                                   mesh=mesh, pose_world=pose, mesh_path=mesh_path))

    return Scene(frames=frames, objects=objects, intrinsics=intr,
                 scene_id=cfg.get("scene_id", config_path.stem),
                 scale_applied=cfg.get("scale_applied", 1.0))


def save_scene(scene: Scene, config_path) -> None:
    """Write a scene config with inline (resolved) poses."""
    ki = scene.intrinsics
    cfg = {
        "scene_id": scene.scene_id,
        "scale_applied": scene.scale_applied,
        "intrinsics": {"fx": ki.fx, "fy": ki.fy, "cx": ki.cx, "cy": ki.cy,
                       "width": ki.width, "height": ki.height,
                       "depth_scale": ki.depth_scale},
        "frames": [
            {
                "id": f.frame_id,
                "rgb": f.rgb_path,
                **({"depth": f.depth_path} if f.depth_path else {}),
                **({"timestamp": f.timestamp} if f.timestamp is not None else {}),
                "pose": pose_to_json(f.camera_to_world),
            }
            for f in scene.frames
        ],
        "objects": [
            {
                "id": o.object_id,
                "name": o.name,
                "mesh": o.mesh_path,
                "pose": pose_to_json(o.pose_world),
            }
            for o in scene.objects
        ],
    }
    Path(config_path).write_text(json.dumps(cfg, indent=2) + "\n")
