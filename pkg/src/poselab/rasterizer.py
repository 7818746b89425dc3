"""CPU triangle rasterization into silhouettes, depth maps and label maps.

Pixel centers sample at (u + 0.5, v + 0.5); shared edges are resolved with a
top-left fill rule so masks are bit-reproducible. No back-face culling:
silhouettes include every surface. Triangles crossing the near plane
(z = 1e-4 m) are clipped, not rejected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from PIL import Image

from .geometry import CameraIntrinsics, RigidTransform, TriangleMesh, compose, invert

NEAR_CLIP = 1e-4  # meters


@dataclass
class BinaryMask:
    """Row-major boolean pixel set."""

    bits: np.ndarray  # (h, w) bool

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError("mask must be 2-D")

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))


@dataclass
class DepthMap:
    """Per-pixel camera-space z in meters; NaN marks empty pixels."""

    z: np.ndarray  # (h, w) float64, NaN = invalid

    @property
    def width(self) -> int:
        return self.z.shape[1]

    @property
    def height(self) -> int:
        return self.z.shape[0]

    def valid(self) -> np.ndarray:
        return np.isfinite(self.z)


@dataclass
class LabelMap:
    """Per-pixel object id, 0 = background."""

    ids: np.ndarray  # (h, w) uint16/int

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    def mask_for(self, object_id: int) -> BinaryMask:
        return BinaryMask(self.ids == object_id)


@dataclass(frozen=True)
class PixelBox:
    """Inclusive integer pixel bounds."""

    xmin: int
    ymin: int
    xmax: int
    ymax: int

    def __post_init__(self):
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise ValueError("empty pixel box")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)


@njit(cache=True)
def _coverage_kernel(px, py, tris, bits):
    """Pixel-center coverage only (no z resolve); bits is uint8 (h, w)."""
    h, w = bits.shape
    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        x0, y0 = px[i0], py[i0]
        x1, y1 = px[i1], py[i1]
        x2, y2 = px[i2], py[i2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area < 0.0:
            x1, x2 = x2, x1
            y1, y2 = y2, y1
            area = -area
        if area == 0.0:
            continue
        xmin = int(np.floor(min(x0, min(x1, x2)) - 0.5))
        xmax = int(np.ceil(max(x0, max(x1, x2)) - 0.5))
        ymin = int(np.floor(min(y0, min(y1, y2)) - 0.5))
        ymax = int(np.ceil(max(y0, max(y1, y2)) - 0.5))
        if xmin < 0:
            xmin = 0
        if ymin < 0:
            ymin = 0
        if xmax > w - 1:
            xmax = w - 1
        if ymax > h - 1:
            ymax = h - 1
        if xmin > xmax or ymin > ymax:
            continue
        ax0 = x1 - x0
        ay0 = y1 - y0
        ax1 = x2 - x1
        ay1 = y2 - y1
        ax2 = x0 - x2
        ay2 = y0 - y2
        top_left0 = (ay0 == 0.0 and ax0 > 0.0) or ay0 < 0.0
        top_left1 = (ay1 == 0.0 and ax1 > 0.0) or ay1 < 0.0
        top_left2 = (ay2 == 0.0 and ax2 > 0.0) or ay2 < 0.0
        for yy in range(ymin, ymax + 1):
            cy = yy + 0.5
            for xx in range(xmin, xmax + 1):
                if bits[yy, xx]:
                    continue
                cx = xx + 0.5
                e0 = ax0 * (cy - y0) - ay0 * (cx - x0)
                e1 = ax1 * (cy - y1) - ay1 * (cx - x1)
                e2 = ax2 * (cy - y2) - ay2 * (cx - x2)
                ok0 = e0 > 0.0 or (e0 == 0.0 and top_left0)
                ok1 = e1 > 0.0 or (e1 == 0.0 and top_left1)
                ok2 = e2 > 0.0 or (e2 == 0.0 and top_left2)
                if ok0 and ok1 and ok2:
                    bits[yy, xx] = 1


@njit(cache=True)
def _raster_kernel(px, py, invz, tris, inv_buf, face_buf):
    """Edge-function rasterization of screen-space triangles.

    inv_buf keeps the max 1/z per covered pixel (nearest surface);
    face_buf the triangle index that produced it. Coverage uses pixel
    centers with a top-left rule on exact edge hits (screen y grows down,
    triangles are reoriented to positive signed area).
    """
    h, w = inv_buf.shape
    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        x0, y0, z0 = px[i0], py[i0], invz[i0]
        x1, y1, z1 = px[i1], py[i1], invz[i1]
        x2, y2, z2 = px[i2], py[i2], invz[i2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area < 0.0:
            x1, x2 = x2, x1
            y1, y2 = y2, y1
            z1, z2 = z2, z1
            area = -area
        if area == 0.0:
            continue
        xmin = int(np.floor(min(x0, min(x1, x2)) - 0.5))
        xmax = int(np.ceil(max(x0, max(x1, x2)) - 0.5))
        ymin = int(np.floor(min(y0, min(y1, y2)) - 0.5))
        ymax = int(np.ceil(max(y0, max(y1, y2)) - 0.5))
        if xmin < 0:
            xmin = 0
        if ymin < 0:
            ymin = 0
        if xmax > w - 1:
            xmax = w - 1
        if ymax > h - 1:
            ymax = h - 1
        if xmin > xmax or ymin > ymax:
            continue
        # edge k runs from vertex k to k+1; pixel is in when all edges >= 0
        # with zero allowed only on top/left edges (y-down screen, CCW area>0)
        ax0 = x1 - x0
        ay0 = y1 - y0
        ax1 = x2 - x1
        ay1 = y2 - y1
        ax2 = x0 - x2
        ay2 = y0 - y2
        top_left0 = (ay0 == 0.0 and ax0 > 0.0) or ay0 < 0.0
        top_left1 = (ay1 == 0.0 and ax1 > 0.0) or ay1 < 0.0
        top_left2 = (ay2 == 0.0 and ax2 > 0.0) or ay2 < 0.0
        inv_area = 1.0 / area
        for yy in range(ymin, ymax + 1):
            cy = yy + 0.5
            for xx in range(xmin, xmax + 1):
                cx = xx + 0.5
                e0 = ax0 * (cy - y0) - ay0 * (cx - x0)
                e1 = ax1 * (cy - y1) - ay1 * (cx - x1)
                e2 = ax2 * (cy - y2) - ay2 * (cx - x2)
                ok0 = e0 > 0.0 or (e0 == 0.0 and top_left0)
                ok1 = e1 > 0.0 or (e1 == 0.0 and top_left1)
                ok2 = e2 > 0.0 or (e2 == 0.0 and top_left2)
                if ok0 and ok1 and ok2:
                    # barycentric weights from opposite-edge functions
                    w0 = e1 * inv_area
                    w1 = e2 * inv_area
                    w2 = e0 * inv_area
                    zi = w0 * z0 + w1 * z1 + w2 * z2
                    if zi > inv_buf[yy, xx]:
                        inv_buf[yy, xx] = zi
                        face_buf[yy, xx] = t


def _clip_triangles_near(pts_cam: np.ndarray, tris: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clip triangles against z = NEAR_CLIP, fan-triangulating clipped polygons.

    Fast path: triangles fully in front pass through untouched; fully-behind
    triangles are dropped; only straddling triangles are re-built.
    """
    z = pts_cam[:, 2]
    front = z >= NEAR_CLIP
    tri_front = front[tris]
    n_front = tri_front.sum(axis=1)
    keep = tris[n_front == 3]
    straddle = tris[(n_front > 0) & (n_front < 3)]
    if len(straddle) == 0:
        return pts_cam, keep

    new_pts = [pts_cam]
    new_tris = [keep]
    next_idx = len(pts_cam)
    for tri in straddle:
        poly = []
        for k in range(3):
            a = tri[k]
            b = tri[(k + 1) % 3]
            pa, pb = pts_cam[a], pts_cam[b]
            in_a = pa[2] >= NEAR_CLIP
            in_b = pb[2] >= NEAR_CLIP
            if in_a:
                poly.append(("v", a))
            if in_a != in_b:
                s = (NEAR_CLIP - pa[2]) / (pb[2] - pa[2])
                poly.append(("p", pa + s * (pb - pa)))
        idx = []
        for kind, val in poly:
            if kind == "v":
                idx.append(int(val))
            else:
                new_pts.append(val.reshape(1, 3))
                idx.append(next_idx)
                next_idx += 1
        for i in range(1, len(idx) - 1):
            new_tris.append(np.array([[idx[0], idx[i], idx[i + 1]]], dtype=np.int64))
    return np.vstack(new_pts), np.vstack(new_tris) if new_tris else np.empty((0, 3), np.int64)


def clipped_camera_triangles(vertices: np.ndarray, triangles: np.ndarray,
                             obj_to_cam_R: np.ndarray, obj_to_cam_t: np.ndarray):
    """Transform to camera frame and near-clip; None when nothing is in front."""
    pts_cam = vertices @ obj_to_cam_R.T + obj_to_cam_t
    if np.all(pts_cam[:, 2] < NEAR_CLIP):
        return None
    pts, tris = _clip_triangles_near(pts_cam, triangles)
    if len(tris) == 0:
        return None
    return pts, np.ascontiguousarray(tris)


def _render_buffers(mesh: TriangleMesh, pose_world: RigidTransform,
                    cam_to_world: RigidTransform, k: CameraIntrinsics):
    """Shared z-buffer render path: (inv_z buffer, face buffer, pts, tris)."""
    obj_to_cam = compose(invert(cam_to_world), pose_world)
    inv_buf = np.zeros((k.height, k.width), dtype=np.float64)
    face_buf = np.full((k.height, k.width), -1, dtype=np.int64)
    clipped = clipped_camera_triangles(mesh.vertices, mesh.triangles,
                                       obj_to_cam.matrix3(), obj_to_cam.translation)
    if clipped is None:
        return inv_buf, face_buf, mesh.vertices, np.empty((0, 3), np.int64)
    pts, tris = clipped
    invz = 1.0 / pts[:, 2]
    px = k.fx * pts[:, 0] * invz + k.cx
    py = k.fy * pts[:, 1] * invz + k.cy
    _raster_kernel(px, py, invz, tris, inv_buf, face_buf)
    return inv_buf, face_buf, pts, tris


def render_silhouette(mesh: TriangleMesh, pose_world: RigidTransform,
                      cam_to_world: RigidTransform, k: CameraIntrinsics) -> BinaryMask:
    """Binary footprint of the posed mesh seen by the camera."""
    obj_to_cam = compose(invert(cam_to_world), pose_world)
    bits = np.zeros((k.height, k.width), dtype=np.uint8)
    clipped = clipped_camera_triangles(mesh.vertices, mesh.triangles,
                                       obj_to_cam.matrix3(), obj_to_cam.translation)
    if clipped is not None:
        pts, tris = clipped
        invz = 1.0 / pts[:, 2]
        px = k.fx * pts[:, 0] * invz + k.cx
        py = k.fy * pts[:, 1] * invz + k.cy
        _coverage_kernel(px, py, tris, bits)
    return BinaryMask(bits.view(bool))


def render_depth(mesh: TriangleMesh, pose_world: RigidTransform,
                 cam_to_world: RigidTransform, k: CameraIntrinsics) -> DepthMap:
    """Nearest camera-space z per pixel (perspective-correct 1/z interpolation)."""
    inv_buf, _, _, _ = _render_buffers(mesh, pose_world, cam_to_world, k)
    z = np.full(inv_buf.shape, np.nan)
    hit = inv_buf > 0.0
    z[hit] = 1.0 / inv_buf[hit]
    return DepthMap(z)


def render_shaded(mesh: TriangleMesh, pose_world: RigidTransform,
                  cam_to_world: RigidTransform, k: CameraIntrinsics) -> np.ndarray:
    """Flat-shaded grayscale render in [0,1] (headlight Lambertian), 0 = background."""
    inv_buf, face_buf, pts, tris = _render_buffers(mesh, pose_world, cam_to_world, k)
    img = np.zeros(inv_buf.shape)
    hit = inv_buf > 0.0
    if not hit.any():
        return img
    a = pts[tris[:, 0]]
    n = np.cross(pts[tris[:, 1]] - a, pts[tris[:, 2]] - a)
    norm = np.linalg.norm(n, axis=1)
    norm[norm == 0] = 1.0
    centers = (a + pts[tris[:, 1]] + pts[tris[:, 2]]) / 3.0
    cdist = np.linalg.norm(centers, axis=1)
    cdist[cdist == 0] = 1.0
    cosine = np.abs(np.sum(n * centers, axis=1) / (norm * cdist))
    shade = 0.25 + 0.75 * cosine
    img[hit] = shade[face_buf[hit]]
    return img


def render_label_map(objects, cam_to_world: RigidTransform,
                     k: CameraIntrinsics) -> LabelMap:
    """Occlusion-aware id map: nearest object wins, z-ties go to the smaller id.

    objects: iterable of (object_id, mesh, pose_world); ids must be distinct
    and positive (0 is background).
    """
    ids_seen = set()
    entries = []
    for object_id, mesh, pose_world in objects:
        if object_id in ids_seen:
            raise ValueError(f"duplicate object_id {object_id}")
        if object_id <= 0:
            raise ValueError("object ids must be positive")
        ids_seen.add(object_id)
        entries.append((object_id, mesh, pose_world))
    out = np.zeros((k.height, k.width), dtype=np.uint16)
    best_inv = np.zeros((k.height, k.width), dtype=np.float64)
    # ids ascending so equal depths keep the smaller id (strict > replace)
    for object_id, mesh, pose_world in sorted(entries, key=lambda e: e[0]):
        inv_buf, _, _, _ = _render_buffers(mesh, pose_world, cam_to_world, k)
        closer = inv_buf > best_inv
        out[closer] = object_id
        best_inv[closer] = inv_buf[closer]
    return LabelMap(out)


# ---------------------------------------------------------------------------
# mask algebra
# ---------------------------------------------------------------------------

def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union of the two pixel sets; 1.0 when both are empty."""
    if a.bits.shape != b.bits.shape:
        raise ValueError(f"mask shapes differ: {a.bits.shape} vs {b.bits.shape}")
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(a.bits, b.bits).sum()
    return float(inter / union)


def mask_boundary(m: BinaryMask, thickness: int = 1) -> BinaryMask:
    """Set pixels within `thickness` 4-neighbor erosion steps of the outside.

    The image border counts as outside, so a full-frame mask keeps a frame.
    """
    if thickness < 1:
        raise ValueError("thickness must be >= 1")
    core = m.bits
    for _ in range(thickness):
        padded = np.pad(core, 1, constant_values=False)
        core = (padded[1:-1, 1:-1] & padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return BinaryMask(m.bits & ~core)


def mask_bbox(m: BinaryMask) -> PixelBox | None:
    """Tight inclusive box over set pixels; None for an empty mask."""
    ys, xs = np.nonzero(m.bits)
    if len(xs) == 0:
        return None
    return PixelBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


# ---------------------------------------------------------------------------
# PNG serialization
# ---------------------------------------------------------------------------

def save_mask_png(path, m: BinaryMask, bits: int = 8) -> None:
    if bits == 1:
        Image.fromarray(m.bits).save(path, optimize=False)
    elif bits == 8:
        Image.fromarray(m.bits.astype(np.uint8) * 255, mode="L").save(path, optimize=False)
    else:
        raise ValueError("mask bit depth must be 1 or 8")


def load_mask_png(path) -> BinaryMask:
    arr = np.array(Image.open(path).convert("L"))
    return BinaryMask(arr > 0)


def save_label_png(path, lm: LabelMap, bits: int = 16) -> None:
    if bits == 16:
        Image.fromarray(lm.ids.astype(np.uint16)).save(path, optimize=False)
    elif bits == 8:
        if lm.ids.max(initial=0) > 255:
            raise ValueError("label ids exceed 8-bit range")
        Image.fromarray(lm.ids.astype(np.uint8), mode="L").save(path, optimize=False)
    else:
        raise ValueError("label bit depth must be 8 or 16")


def load_label_png(path) -> LabelMap:
    img = Image.open(path)
    arr = np.array(img)
    return LabelMap(arr.astype(np.uint16))


def save_depth_png(path, d: DepthMap, depth_scale: float) -> None:
    """16-bit depth PNG: raw value * depth_scale = meters, 0 = invalid."""
    raw = np.zeros(d.z.shape, dtype=np.uint16)
    valid = d.valid()
    raw[valid] = np.clip(np.round(d.z[valid] / depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path, optimize=False)


def load_depth_png(path, depth_scale: float) -> DepthMap:
    raw = np.array(Image.open(path)).astype(np.float64)
    z = raw * depth_scale
    z[raw == 0] = np.nan
    return DepthMap(z)
