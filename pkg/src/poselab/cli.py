"""Command-line pipeline: import, fuse, refine, simulate, evaluate, export, serve.

Exit codes: 0 success, 1 domain error (single machine-parsable line on
stderr), 2 usage error. Flags carrying units say so in their name.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


class CliError(Exception):
    """Domain error with a short machine-readable code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poselab",
        description="6D object pose annotation: silhouette alignment, "
                    "refinement, fusion, export and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_import = sub.add_parser("import", help="build a scene config from a "
                              "trajectory and image folders")
    p_import.add_argument("--rgb-dir", required=True, help="folder of RGB frames")
    p_import.add_argument("--depth-dir", help="folder of 16-bit depth PNGs")
    p_import.add_argument("--tum", help="TUM trajectory file")
    p_import.add_argument("--colmap", help="COLMAP images.txt")
    p_import.add_argument("--intrinsics", required=True,
                          help="JSON file or inline fx,fy,cx,cy,width,height[,depth_scale]")
    p_import.add_argument("--mesh", action="append", default=[],
                          metavar="ID:NAME:PATH[:SCALE]",
                          help="object mesh entry (repeatable)")
    p_import.add_argument("--solve-scale", action="store_true",
                          help="recover metric scale from depth (needs --points3d)")
    p_import.add_argument("--points3d", help="COLMAP points3D.txt for scale solving")
    p_import.add_argument("--out", required=True, help="output scene config JSON")

    p_fuse = sub.add_parser("fuse", help="fuse depth into a TSDF and export a "
                            "surface point cloud")
    p_fuse.add_argument("--scene", required=True)
    p_fuse.add_argument("--voxel-size-mm", type=float, default=5.0)
    p_fuse.add_argument("--truncation-mm", type=float, default=20.0)
    p_fuse.add_argument("--origin-m", default="-0.5,-0.5,-0.5",
                        help="volume origin x,y,z in meters")
    p_fuse.add_argument("--dims", default="128,128,128", help="voxels nx,ny,nz")
    p_fuse.add_argument("--out", required=True, help="output PLY path")

    p_refine = sub.add_parser("refine", help="IoU-maximizing pose refinement "
                              "against reference masks")
    p_refine.add_argument("--scene", required=True)
    p_refine.add_argument("--object-id", type=int, required=True)
    p_refine.add_argument("--masks", required=True,
                          help="folder of reference masks named by frame id")
    p_refine.add_argument("--config", help="refine config JSON")
    p_refine.add_argument("--write-back", action="store_true",
                          help="store the refined pose into the scene config")
    p_refine.add_argument("--out", required=True, help="output JSON (pose + trace)")

    p_sim = sub.add_parser("simulate", help="annotation-accuracy simulation")
    p_sim.add_argument("--meshes", help="folder of OBJ/PLY models")
    p_sim.add_argument("--procedural", action="store_true",
                       help="use the built-in benchmark meshes")
    p_sim.add_argument("--cameras", type=int, default=40)
    p_sim.add_argument("--noise-sigma-cm", type=float, default=10.0)
    p_sim.add_argument("--runs-per-mesh", type=int, default=10)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--config", help="refine config JSON")
    p_sim.add_argument("--jobs", type=int, default=1)
    p_sim.add_argument("--out", required=True, help="output report JSON")

    p_eval = sub.add_parser("evaluate", help="compare two exported label manifests")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--out", required=True, help="output report JSON")

    p_export = sub.add_parser("export", help="render label maps and write the dataset")
    p_export.add_argument("--scene", required=True)
    p_export.add_argument("--mask-bits", type=int, choices=(8, 16), default=16)
    p_export.add_argument("--frames", help="comma-separated frame id subset")
    p_export.add_argument("--jobs", type=int, default=1)
    p_export.add_argument("--out", required=True, help="output dataset folder")

    p_serve = sub.add_parser("serve", help="run the annotation HTTP service")
    p_serve.add_argument("--scenes", required=True,
                         help="folder of scene config JSONs")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8080)
    return parser


def _parse_intrinsics(spec: str):
    from .geometry import CameraIntrinsics
    if Path(spec).exists():
        raw = json.loads(Path(spec).read_text())
    else:
        parts = spec.split(",")
        if len(parts) not in (6, 7):
            raise CliError("bad-intrinsics",
                           "expected fx,fy,cx,cy,width,height[,depth_scale]")
        keys = ["fx", "fy", "cx", "cy", "width", "height", "depth_scale"]
        raw = {k: float(v) for k, v in zip(keys, parts)}
    return CameraIntrinsics(fx=raw["fx"], fy=raw["fy"], cx=raw["cx"], cy=raw["cy"],
                            width=int(raw["width"]), height=int(raw["height"]),
                            depth_scale=raw.get("depth_scale", 0.001))


def _cmd_import(args) -> int:
    from .geometry import RigidTransform
    from .ingest import (FrameRecord, ObjectLabel, Scene, colmap_tracks_to_sparse,
                         apply_scale, parse_colmap_images, parse_tum_trajectory,
                         save_scene, solve_scale_from_depth)
    from .meshio import load_mesh

    intr = _parse_intrinsics(args.intrinsics)
    rgb_dir = Path(args.rgb_dir)
    if not rgb_dir.is_dir():
        raise CliError("missing-input", f"rgb dir not found: {rgb_dir}")
    rgb_files = sorted(p for p in rgb_dir.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not rgb_files:
        raise CliError("missing-input", f"no images in {rgb_dir}")

    if bool(args.tum) == bool(args.colmap):
        raise CliError("bad-trajectory", "provide exactly one of --tum / --colmap")
    if args.tum:
        poses = [p for _, p in parse_tum_trajectory(Path(args.tum).read_text())]
        if len(poses) < len(rgb_files):
            raise CliError("bad-trajectory",
                           f"trajectory has {len(poses)} poses for "
                           f"{len(rgb_files)} images")
        by_index = {i: poses[i] for i in range(len(rgb_files))}
    else:
        by_name = {name: pose for _, name, pose
                   in parse_colmap_images(Path(args.colmap).read_text())}
        by_index = {}
        for i, f in enumerate(rgb_files):
            if f.name not in by_name:
                raise CliError("bad-trajectory", f"no COLMAP pose for {f.name}")
            by_index[i] = by_name[f.name]

    depth_dir = Path(args.depth_dir) if args.depth_dir else None
    frames = []
    for i, f in enumerate(rgb_files):
        depth_path = None
        if depth_dir is not None:
            cand = depth_dir / f.name
            depth_path = str(cand) if cand.exists() else None
        frames.append(FrameRecord(frame_id=i, camera_to_world=by_index[i],
                                  rgb_path=str(f), depth_path=depth_path))

    objects = []
    for spec in args.mesh:
        parts = spec.split(":")
        if len(parts) not in (3, 4):
            raise CliError("bad-mesh", f"expected ID:NAME:PATH[:SCALE], got {spec!r}")
        scale = float(parts[3]) if len(parts) == 4 else 1.0
        objects.append(ObjectLabel(object_id=int(parts[0]), name=parts[1],
                                   mesh=load_mesh(parts[2], scale=scale),
                                   pose_world=RigidTransform.identity(),
                                   mesh_path=str(Path(parts[2]).resolve())))

    scene = Scene(frames=frames, objects=objects, intrinsics=intr,
                  scene_id=Path(args.out).stem)
    if args.solve_scale:
        if not args.points3d or not args.colmap:
            raise CliError("bad-scale", "--solve-scale needs --points3d and --colmap")
        name_to_frame = {Path(f.rgb_path).name: f.frame_id for f in frames}
        image_id_to_frame = {}
        for image_id, name, _ in parse_colmap_images(Path(args.colmap).read_text()):
            if name in name_to_frame:
                image_id_to_frame[image_id] = name_to_frame[name]
        tracks = colmap_tracks_to_sparse(Path(args.points3d).read_text(),
                                         Path(args.colmap).read_text())
        for tr in tracks:
            tr.observations = [(image_id_to_frame[i], u, v)
                               for i, u, v in tr.observations
                               if i in image_id_to_frame]
        tracks = [t for t in tracks if t.observations]
        s = solve_scale_from_depth(tracks, frames, intr)
        apply_scale(scene, tracks, s)
        print(f"applied scale {s:.6f}")
    save_scene(scene, args.out)
    print(f"wrote {args.out} ({len(frames)} frames, {len(objects)} objects)")
    return 0


def _cmd_fuse(args) -> int:
    from .ingest import load_scene
    from .meshio import save_points_ply
    from .rasterizer import load_depth_png
    from .tsdf import create_volume, extract_surface_points, integrate_depth

    scene = load_scene(args.scene)
    origin = [float(x) for x in args.origin_m.split(",")]
    dims = [int(x) for x in args.dims.split(",")]
    vol = create_volume(origin, args.voxel_size_mm * 1e-3, dims,
                        args.truncation_mm * 1e-3)
    fused = 0
    for frame in scene.frames:
        if not frame.depth_path:
            continue
        depth = load_depth_png(frame.depth_path, scene.intrinsics.depth_scale)
        integrate_depth(vol, depth, scene.intrinsics, frame.camera_to_world)
        fused += 1
    if fused == 0:
        raise CliError("no-depth", "scene has no depth frames to fuse")
    pts = extract_surface_points(vol)
    save_points_ply(args.out, pts)
    print(f"fused {fused} depth frames, extracted {len(pts)} surface points")
    return 0


def _load_refine_config(path):
    from .refine import RefineConfig
    if path:
        return RefineConfig.from_json(Path(path).read_text())
    return RefineConfig()


def _cmd_refine(args) -> int:
    from .ingest import load_scene, save_scene
    from .ingest import pose_to_json
    from .rasterizer import load_mask_png
    from .refine import refine

    scene = load_scene(args.scene)
    try:
        obj = scene.object_by_id(args.object_id)
    except KeyError as e:
        raise CliError("unknown-object", str(e)) from None
    mask_dir = Path(args.masks)
    frames_refs = []
    for frame in scene.frames:
        for pattern in (f"{frame.frame_id:06d}.png", f"{frame.frame_id}.png"):
            p = mask_dir / pattern
            if p.exists():
                frames_refs.append((frame, load_mask_png(p)))
                break
    if not frames_refs:
        raise CliError("no-masks", f"no reference masks found in {mask_dir}")
    cfg = _load_refine_config(args.config)
    pose, trace = refine(obj.pose_world, obj.mesh, frames_refs,
                         scene.intrinsics, cfg)
    out = {
        "object_id": obj.object_id,
        "initial_pose": pose_to_json(obj.pose_world),
        "refined_pose": pose_to_json(pose),
        "trace": json.loads(trace.to_json())["iterations"],
    }
    Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    if args.write_back:
        obj.pose_world = pose
        save_scene(scene, args.scene)
    final = trace.entries[-1].score_after if trace.entries else None
    print(f"refined object {obj.object_id} over {len(trace.entries)} iterations"
          + (f", final score {final:.4f}" if final is not None else ""))
    return 0


def _cmd_simulate(args) -> int:
    from .meshio import benchmark_meshes, load_mesh
    from .refine import simulate_annotation

    if args.procedural or not args.meshes:
        meshes = benchmark_meshes()
    else:
        mesh_dir = Path(args.meshes)
        if not mesh_dir.is_dir():
            raise CliError("missing-input", f"mesh dir not found: {mesh_dir}")
        paths = sorted(p for p in mesh_dir.iterdir()
                       if p.suffix.lower() in (".obj", ".ply"))
        if not paths:
            raise CliError("missing-input", f"no OBJ/PLY meshes in {mesh_dir}")
        meshes = [load_mesh(p) for p in paths]
    cfg = _load_refine_config(args.config)
    report = simulate_annotation(meshes, n_cameras=args.cameras,
                                 noise_sigma=args.noise_sigma_cm * 1e-2,
                                 cfg=cfg, seed=args.seed,
                                 runs_per_mesh=args.runs_per_mesh,
                                 jobs=args.jobs)
    Path(args.out).write_text(report.to_json() + "\n")
    print(f"{len(report.runs)} runs, {report.convergence_rate:.0%} converged, "
          f"mean iterations {report.mean_iterations:.2f}")
    return 0


def _cmd_evaluate(args) -> int:
    from .metrics import evaluate_manifests

    try:
        report = evaluate_manifests(args.pred, args.gt)
    except ValueError as e:
        raise CliError("evaluation-mismatch", str(e)) from None
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    for oid, row in report["objects"].items():
        print(f"object {oid} ({row['name']}): pos {row['positional_m']*100:.3f}cm "
              f"rot {row['rotational_quat']:.4f} "
              f"ADD-AUC(0.1d) {row['add_auc_0.1d']:.4f} "
              f"mask IoU {row['mask_iou']:.4f}")
    return 0


def _cmd_export(args) -> int:
    from .exporter import export_scene
    from .ingest import load_scene

    scene = load_scene(args.scene)
    frame_ids = None
    if args.frames:
        frame_ids = [int(x) for x in args.frames.split(",")]
    try:
        manifest = export_scene(scene, args.out, mask_bits=args.mask_bits,
                                frame_ids=frame_ids, jobs=args.jobs)
    except KeyError as e:
        raise CliError("unknown-frame", str(e)) from None
    except OSError as e:
        raise CliError("unwritable-output", str(e)) from None
    print(f"exported {len(manifest.frames)} frames to {args.out}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.scenes)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


_HANDLERS = {
    "import": _cmd_import,
    "fuse": _cmd_fuse,
    "refine": _cmd_refine,
    "simulate": _cmd_simulate,
    "evaluate": _cmd_evaluate,
    "export": _cmd_export,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except CliError as e:
        print(f"error[{e.code}]: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as e:
        code = type(e).__name__.lower().replace("error", "-error")
        print(f"error[{code}]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
