"""Render-vs-photo feature pixel distance.

A deliberately simple pluggable pipeline: Harris-style corner detection with
non-max suppression, 11x11 mean/variance-normalized patch descriptors,
normalized cross-correlation matching with a ratio test, and a pixel gate
that discards implausible matches. The gate default of 10 px assumes the
compared pose is already close.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PATCH = 11
MIN_MATCHES = 8
RATIO_TEST = 0.9


class InsufficientMatchesError(ValueError):
    def __init__(self, message: str, count: int):
        super().__init__(message)
        self.count = count


@dataclass
class FeatureMatchResult:
    mean_distance: float  # pixels
    count: int


def harris_corners(img: np.ndarray, max_corners: int = 500,
                   nms_radius: int = 5) -> np.ndarray:
    """(n,2) array of (x, y) corner positions, strongest first."""
    f = np.asarray(img, dtype=np.float64)
    if f.max() > 1.5:
        f = f / 255.0
    gx = ndimage.sobel(f, axis=1)
    gy = ndimage.sobel(f, axis=0)
    ixx = ndimage.uniform_filter(gx * gx, size=5)
    iyy = ndimage.uniform_filter(gy * gy, size=5)
    ixy = ndimage.uniform_filter(gx * gy, size=5)
    det = ixx * iyy - ixy * ixy
    trace = ixx + iyy
    score = det - 0.05 * trace * trace
    # non-max suppression on a dilated response
    local_max = score == ndimage.maximum_filter(score, size=2 * nms_radius + 1)
    thresh = 1e-6 * max(score.max(), 1e-12)
    ys, xs = np.nonzero(local_max & (score > thresh))
    if len(xs) == 0:
        return np.empty((0, 2), dtype=np.int64)
    order = np.argsort(score[ys, xs])[::-1][:max_corners]
    half = PATCH // 2
    pts = np.column_stack([xs[order], ys[order]])
    inside = ((pts[:, 0] >= half) & (pts[:, 0] < f.shape[1] - half)
              & (pts[:, 1] >= half) & (pts[:, 1] < f.shape[0] - half))
    return pts[inside]


def _describe(img: np.ndarray, pts: np.ndarray) -> np.ndarray:
    f = np.asarray(img, dtype=np.float64)
    half = PATCH // 2
    desc = np.empty((len(pts), PATCH * PATCH))
    for i, (x, y) in enumerate(pts):
        patch = f[y - half:y + half + 1, x - half:x + half + 1].ravel()
        mu = patch.mean()
        sd = patch.std()
        desc[i] = (patch - mu) / (sd if sd > 1e-12 else 1.0)
    return desc


def feature_pixel_distance(rendered: np.ndarray, photo: np.ndarray,
                           gate: float = 10.0) -> FeatureMatchResult:
    """Mean pixel displacement of gated corner matches between the two images.

    Raises InsufficientMatchesError (carrying the surviving count) when fewer
    than 8 matches pass the ratio test and the displacement gate.
    """
    if rendered.shape != photo.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {photo.shape}")
    if gate <= 0:
        raise ValueError("gate must be positive")
    pa = harris_corners(rendered)
    pb = harris_corners(photo)
    if len(pa) == 0 or len(pb) == 0:
        raise InsufficientMatchesError("no corners detected", count=0)
    da = _describe(rendered, pa)
    db = _describe(photo, pb)
    # normalized cross-correlation = dot product of normalized descriptors
    na = da / np.maximum(np.linalg.norm(da, axis=1, keepdims=True), 1e-12)
    nb = db / np.maximum(np.linalg.norm(db, axis=1, keepdims=True), 1e-12)
    sim = na @ nb.T
    dists = []
    for i in range(len(pa)):
        order = np.argsort(sim[i])[::-1]
        best = order[0]
        if len(order) > 1 and sim[i, best] * RATIO_TEST < sim[i, order[1]]:
            continue  # ambiguous match
        disp = float(np.hypot(*(pa[i] - pb[best])))
        if disp <= gate:
            dists.append(disp)
    if len(dists) < MIN_MATCHES:
        raise InsufficientMatchesError(
            f"only {len(dists)} matches survived (need {MIN_MATCHES})",
            count=len(dists))
    return FeatureMatchResult(mean_distance=float(np.mean(dists)), count=len(dists))
