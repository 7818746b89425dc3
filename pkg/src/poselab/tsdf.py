"""Truncated signed distance fusion of depth maps and surface extraction.

Projective formulation: each voxel projects into the depth image (nearest
pixel), sdf = measured depth - voxel camera z. Updates average with weight 1
per observation, which keeps integration commutative; voxels behind the
surface by more than the truncation band are left untouched so thin
structures are not carved away.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, RigidTransform, invert
from .rasterizer import DepthMap


@dataclass
class TsdfVolume:
    origin: np.ndarray          # world position of voxel (0,0,0) corner sample
    voxel_size: float
    dims: tuple[int, int, int]
    truncation: float
    values: np.ndarray = field(default=None)   # (nx,ny,nz) in [-1, 1]
    weights: np.ndarray = field(default=None)  # (nx,ny,nz) >= 0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.truncation < self.voxel_size:
            raise ValueError("truncation must be at least one voxel")
        if any(d < 2 for d in self.dims):
            raise ValueError("dims must each be >= 2")
        if self.values is None:
            self.values = np.zeros(self.dims, dtype=np.float64)
        if self.weights is None:
            self.weights = np.zeros(self.dims, dtype=np.float64)

    def voxel_centers(self) -> np.ndarray:
        """(nx*ny*nz, 3) world coordinates of all voxel sample points."""
        nx, ny, nz = self.dims
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3)
        return self.origin + idx * self.voxel_size


def create_volume(origin, voxel_size: float, dims, truncation: float) -> TsdfVolume:
    return TsdfVolume(origin=np.asarray(origin, float), voxel_size=float(voxel_size),
                      dims=tuple(int(d) for d in dims), truncation=float(truncation))


def integrate_depth(vol: TsdfVolume, depth: DepthMap, k: CameraIntrinsics,
                    cam_to_world: RigidTransform) -> TsdfVolume:
    """Fuse one depth map into the volume (in place; also returned)."""
    world_to_cam = invert(cam_to_world)
    pts = vol.voxel_centers()
    pc = pts @ world_to_cam.matrix3().T + world_to_cam.translation
    z = pc[:, 2]
    valid = z > 1e-9
    u = np.full(len(pts), -1, dtype=np.int64)
    v = np.full(len(pts), -1, dtype=np.int64)
    u[valid] = np.floor(k.fx * pc[valid, 0] / z[valid] + k.cx).astype(np.int64)
    v[valid] = np.floor(k.fy * pc[valid, 1] / z[valid] + k.cy).astype(np.int64)
    valid &= (u >= 0) & (u < depth.width) & (v >= 0) & (v < depth.height)
    measured = np.full(len(pts), np.nan)
    measured[valid] = depth.z[v[valid], u[valid]]
    valid &= np.isfinite(measured)
    sdf = measured - z
    valid &= sdf >= -vol.truncation  # skip voxels far behind the surface
    tsdf = np.clip(sdf[valid] / vol.truncation, -1.0, 1.0)

    flat_vals = vol.values.reshape(-1)
    flat_wts = vol.weights.reshape(-1)
    idx = np.nonzero(valid)[0]
    w_old = flat_wts[idx]
    flat_vals[idx] = (flat_vals[idx] * w_old + tsdf) / (w_old + 1.0)
    flat_wts[idx] = w_old + 1.0
    return vol


def _axis_crossings(vol: TsdfVolume, axis: int) -> np.ndarray:
    """Zero crossings between adjacent observed voxels along one grid axis."""
    vals = vol.values
    wts = vol.weights
    sl_a = [slice(None)] * 3
    sl_b = [slice(None)] * 3
    sl_a[axis] = slice(0, -1)
    sl_b[axis] = slice(1, None)
    a = vals[tuple(sl_a)]
    b = vals[tuple(sl_b)]
    observed = (wts[tuple(sl_a)] > 0) & (wts[tuple(sl_b)] > 0)
    crossing = observed & (np.sign(a) != np.sign(b)) & (a != b)
    ii, jj, kk = np.nonzero(crossing)
    if len(ii) == 0:
        return np.empty((0, 3))
    frac = a[ii, jj, kk] / (a[ii, jj, kk] - b[ii, jj, kk])
    base = np.stack([ii, jj, kk], axis=1).astype(np.float64)
    base[:, axis] += frac
    return vol.origin + base * vol.voxel_size


def extract_surface_points(vol: TsdfVolume) -> np.ndarray:
    """Linear-interpolated zero crossings along the three grid axes, world frame."""
    parts = [_axis_crossings(vol, axis) for axis in range(3)]
    pts = np.vstack(parts)
    return pts if len(pts) else np.empty((0, 3))
