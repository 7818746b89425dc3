"""Pose-label quality metrics: positional/rotational error, ADD, ADD-S and
accuracy-threshold AUC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, quaternion_distance

_EXACT_NN_LIMIT = 10_000


@dataclass(frozen=True)
class PoseErrorReport:
    positional: float  # meters
    rotational: float  # quaternion-norm units
    add: float         # meters
    adds: float        # meters

    def __post_init__(self):
        if min(self.positional, self.rotational, self.add, self.adds) < 0:
            raise ValueError("errors must be nonnegative")
        if self.adds > self.add + 1e-12:
            raise ValueError("adds cannot exceed add")


@dataclass(frozen=True)
class AccuracyCurve:
    thresholds: np.ndarray  # ascending, meters
    accuracies: np.ndarray  # fractions in [0, 1], non-decreasing
    auc: float              # trapezoidal integral normalized by max threshold


def positional_error(t, t_star) -> float:
    return float(np.linalg.norm(np.asarray(t, float) - np.asarray(t_star, float)))


def rotational_error(q, q_star) -> float:
    return quaternion_distance(q, q_star)


def _transform(points: np.ndarray, pose: RigidTransform) -> np.ndarray:
    return points @ pose.matrix3().T + pose.translation


def add_error(points, pose: RigidTransform, pose_star: RigidTransform) -> float:
    """Mean per-point distance between the two posed point sets."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("add_error needs at least one point")
    a = _transform(pts, pose)
    b = _transform(pts, pose_star)
    return float(np.linalg.norm(a - b, axis=1).mean())


def adds_error(points, pose: RigidTransform, pose_star: RigidTransform) -> float:
    """Mean nearest-point distance (symmetric variant); exact at every size.

    A k-d tree accelerates large sets; nearest-neighbor queries stay exact.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("adds_error needs at least one point")
    a = _transform(pts, pose)
    b = _transform(pts, pose_star)
    if len(pts) <= _EXACT_NN_LIMIT:
        d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
        return float(np.sqrt(d2.min(axis=1)).mean())
    from scipy.spatial import cKDTree
    dists, _ = cKDTree(b).query(a, k=1)
    return float(dists.mean())


def accuracy_auc(errors, max_threshold: float, n_steps: int = 1000) -> AccuracyCurve:
    """Accuracy(threshold) on an even grid over [0, max], AUC by trapezoid rule."""
    errs = np.asarray(errors, dtype=np.float64)
    if errs.size == 0:
        raise ValueError("accuracy_auc needs at least one error value")
    if max_threshold <= 0:
        raise ValueError("max_threshold must be positive")
    if n_steps < 2:
        raise ValueError("n_steps must be at least 2")
    thresholds = np.linspace(0.0, max_threshold, n_steps)
    accuracies = (errs[None, :] <= thresholds[:, None]).mean(axis=1)
    auc = float(np.trapezoid(accuracies, thresholds) / max_threshold)
    return AccuracyCurve(thresholds, accuracies, auc)


def pose_error_report(points, pose: RigidTransform,
                      pose_star: RigidTransform) -> PoseErrorReport:
    return PoseErrorReport(
        positional=positional_error(pose.translation, pose_star.translation),
        rotational=rotational_error(pose.rotation, pose_star.rotation),
        add=add_error(points, pose, pose_star),
        adds=adds_error(points, pose, pose_star),
    )


# ---------------------------------------------------------------------------
# batch evaluation of two exported label manifests
# ---------------------------------------------------------------------------

def _pose_from_json(obj) -> RigidTransform:
    return RigidTransform(np.asarray(obj["rotation"], float),
                          np.asarray(obj["translation"], float))


def evaluate_manifests(pred_path, gt_path, auc_steps: int = 1000,
                       feature_gate: float = 10.0) -> dict:
    """Compare a predicted label manifest against a ground-truth one.

    Per shared object id: mean positional/rotational error over shared
    frames, ADD / ADD-S AUC at 0.1 * diameter and at a fixed 10 cm, mean
    visible-mask IoU, and (when both RGB renders are computable) the mean
    feature pixel distance between shaded renders at the two poses.
    """
    from pathlib import Path

    from .exporter import load_manifest, manifest_intrinsics
    from .features import InsufficientMatchesError, feature_pixel_distance
    from .meshio import load_mesh
    from .rasterizer import BinaryMask, load_label_png, mask_iou, render_shaded

    pred = load_manifest(pred_path)
    gt = load_manifest(gt_path)
    k = manifest_intrinsics(gt)
    pred_objects = {o["id"]: o for o in pred["objects"]}
    gt_objects = {o["id"]: o for o in gt["objects"]}
    shared_ids = sorted(set(pred_objects) & set(gt_objects))
    if not shared_ids:
        raise ValueError(
            f"manifests share no object ids (pred has {sorted(pred_objects)}, "
            f"gt has {sorted(gt_objects)})")

    def resolve(base: dict, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(base["_dir"]) / p

    meshes = {}
    for oid in shared_ids:
        meshes[oid] = load_mesh(resolve(gt, gt_objects[oid]["mesh"]))

    pred_frames = {f["frame_id"]: f for f in pred["frames"]}
    gt_frames = {f["frame_id"]: f for f in gt["frames"]}
    shared_frames = sorted(set(pred_frames) & set(gt_frames))
    if not shared_frames:
        raise ValueError("manifests share no frame ids")

    ident = RigidTransform.identity()
    per_object = {}
    for oid in shared_ids:
        pts = meshes[oid].vertices
        diameter = gt_objects[oid].get("diameter") or meshes[oid].diameter
        e_pos, e_rot, e_add, e_adds, ious, feat = [], [], [], [], [], []
        for fid in shared_frames:
            pf, gf = pred_frames[fid], gt_frames[fid]
            p_entry = next((e for e in pf["objects"] if e["id"] == oid), None)
            g_entry = next((e for e in gf["objects"] if e["id"] == oid), None)
            if p_entry is None or g_entry is None:
                continue
            pose_p = _pose_from_json(p_entry["pose_cam"])
            pose_g = _pose_from_json(g_entry["pose_cam"])
            e_pos.append(positional_error(pose_p.translation, pose_g.translation))
            e_rot.append(rotational_error(pose_p.rotation, pose_g.rotation))
            e_add.append(add_error(pts, pose_p, pose_g))
            e_adds.append(adds_error(pts, pose_p, pose_g))
            pm = load_label_png(resolve(pred, pf["mask"]))
            gm = load_label_png(resolve(gt, gf["mask"]))
            ious.append(mask_iou(BinaryMask(pm.ids == oid),
                                 BinaryMask(gm.ids == oid)))
            try:
                ra = render_shaded(meshes[oid], pose_p, ident, k)
                rb = render_shaded(meshes[oid], pose_g, ident, k)
                feat.append(feature_pixel_distance(ra, rb, gate=feature_gate)
                            .mean_distance)
            except InsufficientMatchesError:
                pass
        if not e_pos:
            continue
        per_object[oid] = {
            "name": gt_objects[oid].get("name", ""),
            "frames_evaluated": len(e_pos),
            "positional_m": float(np.mean(e_pos)),
            "rotational_quat": float(np.mean(e_rot)),
            "add_auc_0.1d": accuracy_auc(e_add, 0.1 * diameter, auc_steps).auc,
            "adds_auc_0.1d": accuracy_auc(e_adds, 0.1 * diameter, auc_steps).auc,
            "add_auc_10cm": accuracy_auc(e_add, 0.10, auc_steps).auc,
            "adds_auc_10cm": accuracy_auc(e_adds, 0.10, auc_steps).auc,
            "mask_iou": float(np.mean(ious)),
            "feature_px": float(np.mean(feat)) if feat else None,
        }
    return {"objects": per_object, "frames": len(shared_frames)}
