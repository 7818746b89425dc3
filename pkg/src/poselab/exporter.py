"""Label propagation and dataset export.

Every frame gets an occlusion-aware label-map PNG plus per-object camera-frame
poses, tight bounding boxes and visible pixel counts, all listed in a single
labels.json manifest. Output is deterministic: exporting the same scene twice
produces byte-identical files.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, RigidTransform, compose, invert
from .ingest import Scene, pose_to_json
from .rasterizer import (
    BinaryMask,
    LabelMap,
    mask_bbox,
    render_label_map,
    save_label_png,
)

FRAME_DIGITS = 6
CONVENTIONS = {
    "quaternion": "wxyz, unit, w >= 0",
    "camera_frame": "+z forward, +x right, +y down",
    "pose": "object-to-camera (camera frame), meters",
    "mask": "label map PNG, pixel value = object id, 0 = background",
}


@dataclass
class FrameLabel:
    frame_id: int
    rgb_path: str
    mask_path: str
    objects: list[dict]  # per object: id, pose_cam, bbox or None, visible_px
    missing_rgb: bool = False


@dataclass
class DatasetManifest:
    scene_id: str
    intrinsics: CameraIntrinsics
    objects: list[dict]  # id, name, mesh path, diameter
    frames: list[FrameLabel]

    def to_json(self) -> str:
        ki = self.intrinsics
        return json.dumps({
            "conventions": CONVENTIONS,
            "scene_id": self.scene_id,
            "intrinsics": {"fx": ki.fx, "fy": ki.fy, "cx": ki.cx, "cy": ki.cy,
                           "width": ki.width, "height": ki.height,
                           "depth_scale": ki.depth_scale},
            "objects": self.objects,
            "frames": [
                {
                    "frame_id": f.frame_id,
                    "rgb": f.rgb_path,
                    "mask": f.mask_path,
                    **({"missing_rgb": True} if f.missing_rgb else {}),
                    "objects": f.objects,
                }
                for f in self.frames
            ],
        }, indent=2, sort_keys=True)


def object_pose_in_camera(pose_world: RigidTransform,
                          cam_to_world: RigidTransform) -> RigidTransform:
    """Propagated label: object pose expressed in the camera frame."""
    return compose(invert(cam_to_world), pose_world)


def _export_frame(frame, objects, intrinsics, frames_dir: Path, bits: int):
    label_map = render_label_map(
        [(o.object_id, o.mesh, o.pose_world) for o in objects],
        frame.camera_to_world, intrinsics)
    mask_name = f"{frame.frame_id:0{FRAME_DIGITS}d}.mask.png"
    save_label_png(frames_dir / mask_name, label_map, bits=bits)
    entries = []
    for o in sorted(objects, key=lambda o: o.object_id):
        obj_mask = BinaryMask(label_map.ids == o.object_id)
        box = mask_bbox(obj_mask)
        pose_cam = object_pose_in_camera(o.pose_world, frame.camera_to_world)
        entries.append({
            "id": o.object_id,
            "pose_cam": pose_to_json(pose_cam),
            "bbox": list(box.as_tuple()) if box is not None else None,
            "visible_px": obj_mask.count(),
        })
    missing = not Path(frame.rgb_path).exists()
    return FrameLabel(frame_id=frame.frame_id, rgb_path=frame.rgb_path,
                      mask_path=f"frames/{mask_name}", objects=entries,
                      missing_rgb=missing)


def export_scene(scene: Scene, out_dir, mask_bits: int = 16,
                 frame_ids: list[int] | None = None,
                 jobs: int = 1) -> DatasetManifest:
    """Render label maps and write the dataset under out_dir.

    Layout: out/scene_meta.json, out/frames/NNNNNN.mask.png, out/labels.json.
    Frames with a missing RGB file are exported and flagged, not dropped.
    """
    out = Path(out_dir)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)

    selected = scene.frames
    if frame_ids is not None:
        wanted = set(frame_ids)
        selected = [f for f in scene.frames if f.frame_id in wanted]
        missing = wanted - {f.frame_id for f in selected}
        if missing:
            raise KeyError(f"unknown frame ids: {sorted(missing)}")

    object_table = [
        {"id": o.object_id, "name": o.name, "mesh": o.mesh_path,
         "diameter": o.mesh.diameter}
        for o in sorted(scene.objects, key=lambda o: o.object_id)
    ]

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_export_frame, f, scene.objects,
                                   scene.intrinsics, frames_dir, mask_bits)
                       for f in selected]
            frame_labels = [f.result() for f in futures]
    else:
        frame_labels = [_export_frame(f, scene.objects, scene.intrinsics,
                                      frames_dir, mask_bits)
                        for f in selected]
    frame_labels.sort(key=lambda f: f.frame_id)

    manifest = DatasetManifest(scene_id=scene.scene_id,
                               intrinsics=scene.intrinsics,
                               objects=object_table, frames=frame_labels)
    ki = scene.intrinsics
    meta = {
        "conventions": CONVENTIONS,
        "scene_id": scene.scene_id,
        "intrinsics": {"fx": ki.fx, "fy": ki.fy, "cx": ki.cx, "cy": ki.cy,
                       "width": ki.width, "height": ki.height,
                       "depth_scale": ki.depth_scale},
        "objects": object_table,
        "frame_count": len(frame_labels),
    }
    (out / "scene_meta.json").write_text(json.dumps(meta, indent=2,
                                                    sort_keys=True) + "\n")
    (out / "labels.json").write_text(manifest.to_json() + "\n")
    return manifest


def load_manifest(path) -> dict:
    """Raw manifest dict; paths inside are relative to the manifest directory."""
    p = Path(path)
    raw = json.loads(p.read_text())
    raw["_dir"] = str(p.parent)
    return raw


def manifest_intrinsics(raw: dict) -> CameraIntrinsics:
    ki = raw["intrinsics"]
    return CameraIntrinsics(fx=ki["fx"], fy=ki["fy"], cx=ki["cx"], cy=ki["cy"],
                            width=ki["width"], height=ki["height"],
                            depth_scale=ki.get("depth_scale", 0.001))
