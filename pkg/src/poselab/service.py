"""HTTP/JSON annotation service: scene queries, overlay rendering, pose
editing with undo/redo, assisted refinement and export.

One writer at a time per scene: pose mutations take the scene lock and bump a
version counter; clients may send their last seen version to detect
concurrent edits (409). Reads never mutate state.
"""

from __future__ import annotations

import io
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from PIL import Image
from starlette.datastructures import UploadFile

from .exporter import export_scene
from .geometry import RigidTransform, compose, exp_twist, twist_about_axis
from .ingest import Scene, load_scene, pose_to_json, save_scene
from .rasterizer import BinaryMask, mask_boundary, render_silhouette
from .refine import CAMERA_AXES, RefineConfig, refine

UNDO_DEPTH = 256
OVERLAY_COLOR = np.array([64, 220, 64], dtype=np.float64)  # highlight green


class SessionState:
    """Mutable annotation state for one scene."""

    def __init__(self, scene: Scene, config_path: str | None = None):
        self.scene = scene
        self.config_path = config_path
        self.lock = threading.Lock()
        self.version = 0
        self.undo_stack: list[tuple[int, RigidTransform, RigidTransform]] = []
        self.redo_stack: list[tuple[int, RigidTransform, RigidTransform]] = []
        self.dirty = False

    def set_pose(self, object_id: int, new_pose: RigidTransform) -> int:
        obj = self.scene.object_by_id(object_id)
        self.undo_stack.append((object_id, obj.pose_world, new_pose))
        if len(self.undo_stack) > UNDO_DEPTH:
            self.undo_stack.pop(0)
        self.redo_stack.clear()
        obj.pose_world = new_pose
        self.version += 1
        self.dirty = True
        return self.version

    def undo(self) -> int | None:
        if not self.undo_stack:
            return None
        object_id, old, _new = self.undo_stack.pop()
        self.redo_stack.append((object_id, old, self.scene.object_by_id(object_id).pose_world))
        self.scene.object_by_id(object_id).pose_world = old
        self.version += 1
        self.dirty = True
        return object_id

    def redo(self) -> int | None:
        if not self.redo_stack:
            return None
        object_id, _old, new = self.redo_stack.pop()
        self.undo_stack.append((object_id, self.scene.object_by_id(object_id).pose_world, new))
        self.scene.object_by_id(object_id).pose_world = new
        self.version += 1
        self.dirty = True
        return object_id


def _load_photo(frame, k) -> np.ndarray:
    """Frame photograph as (h, w, 3) uint8; mid-gray placeholder when absent."""
    p = Path(frame.rgb_path)
    if p.exists():
        img = Image.open(p).convert("RGB")
        if img.size != (k.width, k.height):
            img = img.resize((k.width, k.height), Image.BILINEAR)
        return np.array(img)
    return np.full((k.height, k.width, 3), 96, dtype=np.uint8)


def _json_error(status: int, message: str) -> HTTPException:
    return HTTPException(status_code=status, detail=message)


def create_app(scene_root: str | None = None,
               scenes: dict[str, Scene] | None = None) -> FastAPI:
    """Build the service; scenes come from a config folder and/or directly."""
    app = FastAPI(title="poselab annotation service")
    sessions: dict[str, SessionState] = {}

    if scene_root is not None:
        root = Path(scene_root)
        if not root.is_dir():
            raise ValueError(f"scene root is not a directory: {root}")
        for cfg in sorted(root.glob("*.json")):
            scene = load_scene(cfg)
            sessions[scene.scene_id] = SessionState(scene, config_path=str(cfg))
    for sid, scene in (scenes or {}).items():
        sessions[sid] = SessionState(scene)

    def session(scene_id: str) -> SessionState:
        if scene_id not in sessions:
            raise _json_error(404, f"unknown scene {scene_id!r}")
        return sessions[scene_id]

    @app.get("/api/scenes")
    def list_scenes():
        return {"scenes": sorted(sessions.keys())}

    @app.get("/api/scenes/{scene_id}/frames")
    def list_frames(scene_id: str):
        s = session(scene_id).scene
        return {"frames": [
            {"frame_id": f.frame_id,
             "timestamp": f.timestamp,
             "rgb": f.rgb_path,
             "camera_to_world": pose_to_json(f.camera_to_world)}
            for f in s.frames
        ]}

    @app.get("/api/scenes/{scene_id}/objects")
    def list_objects(scene_id: str):
        st = session(scene_id)
        return {"version": st.version,
                "objects": [
                    {"object_id": o.object_id, "name": o.name,
                     "diameter": o.mesh.diameter,
                     "pose_world": pose_to_json(o.pose_world)}
                    for o in st.scene.objects
                ]}

    @app.get("/api/scenes/{scene_id}/overlay")
    def render_overlay(scene_id: str, frame: int, object: int,
                       mode: str = "silhouette", alpha: float = 0.6):
        st = session(scene_id)
        if not (0.0 <= alpha <= 1.0):
            raise _json_error(422, f"alpha must be in [0,1], got {alpha}")
        if mode not in ("silhouette", "boundary"):
            raise _json_error(422, f"unknown overlay mode {mode!r}")
        try:
            fr = st.scene.frame_by_id(frame)
            obj = st.scene.object_by_id(object)
        except KeyError as e:
            raise _json_error(404, str(e)) from None
        k = st.scene.intrinsics
        with st.lock:
            pose = obj.pose_world
        mask = render_silhouette(obj.mesh, pose, fr.camera_to_world, k)
        if mode == "boundary":
            mask = mask_boundary(mask, thickness=2)
        photo = _load_photo(fr, k).astype(np.float64)
        out = photo.copy()
        out[mask.bits] = (1.0 - alpha) * photo[mask.bits] + alpha * OVERLAY_COLOR
        img = Image.fromarray(np.clip(np.round(out), 0, 255).astype(np.uint8))
        buf = io.BytesIO()
        img.save(buf, format="PNG", optimize=False)
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.post("/api/scenes/{scene_id}/objects/{object_id}/pose")
    async def update_pose(scene_id: str, object_id: int, request: Request):
        st = session(scene_id)
        try:
            body = await request.json()
        except Exception:
            raise _json_error(400, "malformed JSON body") from None
        try:
            obj = st.scene.object_by_id(object_id)
        except KeyError as e:
            raise _json_error(404, str(e)) from None
        mode = body.get("mode")
        if mode not in ("absolute", "delta"):
            raise _json_error(400, "mode must be 'absolute' or 'delta'")
        if "pose" in body and "delta" in body:
            raise _json_error(400, "exactly one of 'pose' / 'delta' is allowed")
        with st.lock:
            expected = body.get("version")
            if expected is not None and expected != st.version:
                raise _json_error(409, f"version conflict: scene is at "
                                       f"{st.version}, request was for {expected}")
            if mode == "absolute":
                payload = body.get("pose")
                if payload is None:
                    raise _json_error(400, "absolute update needs a 'pose' payload")
                try:
                    new_pose = RigidTransform(np.asarray(payload["rotation"], float),
                                              np.asarray(payload["translation"], float))
                except (KeyError, TypeError, ValueError) as e:
                    raise _json_error(400, f"bad pose payload: {e}") from None
            else:
                delta = body.get("delta")
                if delta is None:
                    raise _json_error(400, "delta update needs a 'delta' payload")
                try:
                    new_pose = _apply_delta(st.scene, obj.pose_world, delta)
                except KeyError as e:
                    raise _json_error(404, str(e)) from None
                except (TypeError, ValueError) as e:
                    raise _json_error(400, f"bad delta payload: {e}") from None
            version = st.set_pose(object_id, new_pose)
        return {"object_id": object_id, "version": version,
                "pose_world": pose_to_json(new_pose)}

    @app.post("/api/scenes/{scene_id}/undo")
    def undo(scene_id: str):
        st = session(scene_id)
        with st.lock:
            object_id = st.undo()
        if object_id is None:
            raise _json_error(409, "nothing to undo")
        return {"object_id": object_id, "version": st.version,
                "pose_world": pose_to_json(
                    st.scene.object_by_id(object_id).pose_world)}

    @app.post("/api/scenes/{scene_id}/redo")
    def redo(scene_id: str):
        st = session(scene_id)
        with st.lock:
            object_id = st.redo()
        if object_id is None:
            raise _json_error(409, "nothing to redo")
        return {"object_id": object_id, "version": st.version,
                "pose_world": pose_to_json(
                    st.scene.object_by_id(object_id).pose_world)}

    @app.post("/api/scenes/{scene_id}/objects/{object_id}/refine")
    async def run_refine(scene_id: str, object_id: int, request: Request):
        st = session(scene_id)
        try:
            obj = st.scene.object_by_id(object_id)
        except KeyError as e:
            raise _json_error(404, str(e)) from None
        form = await request.form()
        cfg = (RefineConfig.from_json(str(form["config"]))
               if "config" in form else RefineConfig())
        frames_refs = []
        for key, value in form.multi_items():
            if not key.startswith("mask_"):
                continue
            frame_id = int(key.removeprefix("mask_"))
            try:
                fr = st.scene.frame_by_id(frame_id)
            except KeyError as e:
                raise _json_error(404, str(e)) from None
            if not isinstance(value, UploadFile):
                raise _json_error(400, f"{key} must be a PNG upload")
            data = await value.read()
            arr = np.array(Image.open(io.BytesIO(data)).convert("L"))
            k = st.scene.intrinsics
            if arr.shape != (k.height, k.width):
                raise _json_error(400, f"{key}: mask is {arr.shape}, "
                                       f"expected {(k.height, k.width)}")
            frames_refs.append((fr, BinaryMask(arr > 0)))
        if not frames_refs:
            raise _json_error(409, "no reference masks supplied")
        with st.lock:
            initial = obj.pose_world
        pose, trace = refine(initial, obj.mesh, frames_refs,
                             st.scene.intrinsics, cfg)
        with st.lock:
            version = st.set_pose(object_id, pose)
        import json as _json
        return {"object_id": object_id, "version": version,
                "pose_world": pose_to_json(pose),
                "trace": _json.loads(trace.to_json())["iterations"]}

    @app.post("/api/scenes/{scene_id}/export")
    async def run_export(scene_id: str, request: Request):
        st = session(scene_id)
        try:
            body = await request.json()
        except Exception:
            body = {}
        out_dir = body.get("out_dir")
        if not out_dir:
            raise _json_error(400, "export needs an 'out_dir'")
        try:
            with st.lock:
                manifest = export_scene(st.scene, out_dir,
                                        mask_bits=int(body.get("mask_bits", 16)),
                                        frame_ids=body.get("frame_ids"))
        except (OSError, KeyError, ValueError) as e:
            raise _json_error(500, f"export failed for {out_dir!r}: {e}") from None
        return {"manifest": str(Path(out_dir) / "labels.json"),
                "frames": len(manifest.frames),
                "per_frame_objects": {
                    str(f.frame_id): sum(1 for o in f.objects if o["visible_px"] > 0)
                    for f in manifest.frames}}

    @app.post("/api/scenes/{scene_id}/save")
    def save(scene_id: str):
        st = session(scene_id)
        if st.config_path is None:
            raise _json_error(409, "scene has no backing config file")
        with st.lock:
            save_scene(st.scene, st.config_path)
            st.dirty = False
        return {"saved": st.config_path, "version": st.version}

    return app


def _apply_delta(scene: Scene, pose: RigidTransform, delta: dict) -> RigidTransform:
    """Left-compose a twist motion built from world or camera axes."""
    space = delta.get("space", "world")
    magnitude = float(delta["magnitude"])
    kind = delta.get("kind", "translate")
    if space == "world":
        basis = np.eye(3)
    elif space == "camera":
        frame = scene.frame_by_id(int(delta["frame_id"]))
        basis = frame.camera_to_world.matrix3()
    else:
        raise ValueError(f"unknown delta space {space!r}")

    if "direction" in delta:
        direction = np.asarray(delta["direction"], dtype=float)
        if direction.shape != (3,):
            raise ValueError("direction must be a 3-vector")
        n = np.linalg.norm(direction)
        if n == 0:
            raise ValueError("direction must be nonzero")
        direction = basis @ (direction / n)
    else:
        axis_name = delta.get("axis", "x")
        try:
            idx = {"x": 0, "y": 1, "z": 2}[axis_name]
        except KeyError:
            raise ValueError(f"unknown axis {axis_name!r}") from None
        direction = basis[:, idx]

    if kind == "translate":
        moved = RigidTransform(translation=direction * magnitude)
        return compose(moved, pose)
    if kind == "rotate":
        screw = twist_about_axis(direction, pose.translation)
        return compose(exp_twist(screw, magnitude), pose)
    raise ValueError(f"unknown delta kind {kind!r}")
