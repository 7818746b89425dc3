"""Rigid-body transforms, twists and pinhole projection.

Conventions used across the package:
  - quaternions are (w, x, y, z), unit norm, canonicalized to w >= 0;
  - the camera frame is +z forward, +x right, +y down (matches pixel axes);
  - camera poses are camera-to-world;
  - all lengths are meters, angles radians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_UNIT_TOL = 1e-9


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {a.shape}")
    return a


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) of a rotation matrix, w >= 0."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 0.5 / np.sqrt(tr + 1.0)
        q = np.array([0.25 / s, (R[2, 1] - R[1, 2]) * s,
                      (R[0, 2] - R[2, 0]) * s, (R[1, 0] - R[0, 1]) * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix about a unit axis by angle."""
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element stored as unit quaternion (w,x,y,z) + translation.

    The quaternion is renormalized and flipped to w >= 0 at construction;
    inputs further than 1e-9 from unit norm are rejected.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        t = _as_vec3(self.translation)
        if q.shape != (4,):
            raise ValueError(f"quaternion must have 4 components, got {q.shape}")
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {n} too far from 1")
        q = q / n
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, R: np.ndarray, t) -> "RigidTransform":
        return cls(matrix_to_quat(np.asarray(R, dtype=np.float64)), t)

    @classmethod
    def from_axis_angle(cls, axis, angle: float, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = _as_vec3(axis)
        axis = axis / np.linalg.norm(axis)
        return cls.from_matrix(rodrigues(axis, angle), t)

    def matrix3(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix4(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.matrix3()
        M[:3, 3] = self.translation
        return M


@dataclass(frozen=True)
class TwistCoordinates:
    """Twist (v, omega): omega is either zero or a unit vector."""

    v: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        v = _as_vec3(self.v)
        w = _as_vec3(self.omega)
        n = np.linalg.norm(w)
        if n > _UNIT_TOL and abs(n - 1.0) > _UNIT_TOL:
            raise ValueError(f"omega must be zero or unit norm, |omega| = {n}")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "omega", w)

    @property
    def is_pure_translation(self) -> bool:
        return np.linalg.norm(self.omega) <= _UNIT_TOL


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 0.001  # meters per raw depth unit (16-bit PNG default: mm)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


# near-plane for single-point projection; rendering clips at 1e-4 instead
PROJECT_NEAR = 1e-6


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a after b: (a*b)(x) = a(b(x))."""
    Ra = a.matrix3()
    return RigidTransform.from_matrix(Ra @ b.matrix3(), Ra @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    R = t.matrix3()
    return RigidTransform.from_matrix(R.T, -R.T @ t.translation)


def apply_to_point(t: RigidTransform, p) -> np.ndarray:
    return t.matrix3() @ _as_vec3(p) + t.translation


def apply_to_points(t: RigidTransform, pts: np.ndarray) -> np.ndarray:
    """Transform an (n,3) array of points."""
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ t.matrix3().T + t.translation


def exp_twist(xi: TwistCoordinates, theta: float) -> RigidTransform:
    """Exponential of a twist scaled by theta (radians, or meters when omega=0).

    Pure translation for omega = 0; otherwise Rodrigues' rotation with the
    screw translation (I - R)(omega x v) + omega omega^T v theta.
    """
    if xi.is_pure_translation:
        return RigidTransform(translation=xi.v * theta)
    w, v = xi.omega, xi.v
    R = rodrigues(w, theta)
    t = (np.eye(3) - R) @ np.cross(w, v) + np.outer(w, w) @ v * theta
    return RigidTransform.from_matrix(R, t)


def twist_about_axis(omega, v_o) -> TwistCoordinates:
    """Screw through point v_o about unit direction omega (zero pitch)."""
    w = _as_vec3(omega)
    n = np.linalg.norm(w)
    if n <= _UNIT_TOL:
        raise ValueError("omega must be a nonzero direction")
    if abs(n - 1.0) > _UNIT_TOL:
        raise ValueError(f"omega must be unit norm, |omega| = {n}")
    return TwistCoordinates(v=-np.cross(w, _as_vec3(v_o)), omega=w)


def project_point(p_cam, k: CameraIntrinsics):
    """Pixel (u, v) of a camera-frame point, or None when z <= near plane."""
    p = _as_vec3(p_cam)
    if p[2] <= PROJECT_NEAR:
        return None
    return (k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy)


def quaternion_distance(q, q_star) -> float:
    """min(|q - q*|, |q + q*|) over the quaternion double cover, in [0, sqrt(2)]."""
    a = np.asarray(q, dtype=np.float64)
    b = np.asarray(q_star, dtype=np.float64)
    for name, x in (("q", a), ("q_star", b)):
        if x.shape != (4,):
            raise ValueError(f"{name} must have 4 components")
        if abs(np.linalg.norm(x) - 1.0) > 1e-6:
            raise ValueError(f"{name} is not unit norm")
    return float(min(np.linalg.norm(a - b), np.linalg.norm(a + b)))


_BRUTE_FORCE_DIAMETER_LIMIT = 5000


def mesh_diameter(vertices: np.ndarray) -> float:
    """Max pairwise vertex distance; exact at any size.

    Brute force up to 5000 vertices, convex hull first above that (the
    diameter of a point set is attained on its hull).
    """
    pts = np.asarray(vertices, dtype=np.float64)
    if pts.shape[0] < 2 or np.unique(pts, axis=0).shape[0] < 2:
        raise ValueError("diameter needs at least 2 distinct vertices")
    if pts.shape[0] > _BRUTE_FORCE_DIAMETER_LIMIT:
        from scipy.spatial import ConvexHull
        try:
            pts = pts[np.unique(ConvexHull(pts).vertices)]
        except Exception:
            pass  # degenerate (coplanar) input: fall through to brute force
    best = 0.0
    # chunked O(n^2) to bound memory on hull-reduced sets
    for i in range(0, pts.shape[0], 512):
        chunk = pts[i:i + 512]
        d2 = np.sum((chunk[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


class TriangleMesh:
    """Triangle mesh: (n,3) float vertices in meters, (m,3) int triangle indices.

    Diameter (max pairwise vertex distance) is computed once at construction.
    """

    def __init__(self, vertices, triangles, name: str = ""):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        self.name = name
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be an (n,3) array")
        if self.vertices.shape[0] < 3:
            raise ValueError("mesh needs at least 3 vertices")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError("triangles must be an (m,3) array")
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        self.diameter = mesh_diameter(self.vertices)

    def scaled(self, s: float) -> "TriangleMesh":
        return TriangleMesh(self.vertices * float(s), self.triangles, self.name)

    def transformed(self, t: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(apply_to_points(t, self.vertices), self.triangles, self.name)
