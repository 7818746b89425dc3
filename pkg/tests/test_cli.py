import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from poselab.cli import main
from poselab.geometry import CameraIntrinsics, RigidTransform
from poselab.ingest import FrameRecord, ObjectLabel, Scene, save_scene
from poselab.meshio import make_box
from poselab.rasterizer import DepthMap, render_silhouette, save_depth_png

INTR = CameraIntrinsics(fx=400, fy=400, cx=160, cy=120, width=320, height=240)


def write_obj(mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]} {v[1]} {v[2]}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0]+1} {t[1]+1} {t[2]+1}\n")


def scene_fixture(tmp_path, n_frames=2):
    mesh = make_box((0.2, 0.15, 0.1))
    write_obj(mesh, tmp_path / "box.obj")
    frames = [FrameRecord(frame_id=i,
                          camera_to_world=RigidTransform(
                              translation=np.array([0.05 * i, 0.0, 0.0])),
                          rgb_path=str(tmp_path / f"rgb_{i}.png"))
              for i in range(n_frames)]
    objects = [ObjectLabel(1, "box", mesh,
                           RigidTransform(translation=np.array([0.0, 0.0, 0.8])),
                           mesh_path=str(tmp_path / "box.obj"))]
    scene = Scene(frames=frames, objects=objects, intrinsics=INTR, scene_id="s")
    cfg = tmp_path / "scene.json"
    save_scene(scene, cfg)
    return scene, cfg


# --- exit code contract -----------------------------------------------------------

def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_no_command_exits_2():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--definitely-not-a-flag", "1", "--out", "x.json"])
    assert exc.value.code == 2


def test_help_exits_0(capsys):
    for cmd in ("import", "fuse", "refine", "simulate", "evaluate", "export",
                "serve"):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "--out" in out or "--scenes" in out


def test_domain_error_single_line_exit_1(tmp_path, capsys):
    rc = main(["export", "--scene", str(tmp_path / "missing.json"),
               "--out", str(tmp_path / "o")])
    assert rc == 1
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1
    assert err.startswith("error[")


# --- export / evaluate ------------------------------------------------------------

def test_export_cli_writes_dataset(tmp_path, capsys):
    _scene, cfg = scene_fixture(tmp_path)
    out = tmp_path / "ds"
    rc = main(["export", "--scene", str(cfg), "--out", str(out)])
    assert rc == 0
    assert (out / "labels.json").exists()
    assert (out / "frames" / "000000.mask.png").exists()


def test_export_unknown_frame_exit_1(tmp_path, capsys):
    _scene, cfg = scene_fixture(tmp_path)
    rc = main(["export", "--scene", str(cfg), "--frames", "7",
               "--out", str(tmp_path / "ds")])
    assert rc == 1
    assert "error[" in capsys.readouterr().err


def test_evaluate_cli_self_comparison(tmp_path, capsys):
    _scene, cfg = scene_fixture(tmp_path)
    out = tmp_path / "ds"
    main(["export", "--scene", str(cfg), "--out", str(out)])
    rc = main(["evaluate", "--pred", str(out / "labels.json"),
               "--gt", str(out / "labels.json"),
               "--out", str(tmp_path / "report.json")])
    assert rc == 0
    report = json.loads((tmp_path / "report.json").read_text())
    row = report["objects"]["1"]
    assert row["positional_m"] == 0.0
    assert row["mask_iou"] == 1.0
    assert row["add_auc_0.1d"] == pytest.approx(1.0)


def test_evaluate_disjoint_ids_exit_1(tmp_path, capsys):
    _scene, cfg = scene_fixture(tmp_path)
    out = tmp_path / "ds"
    main(["export", "--scene", str(cfg), "--out", str(out)])
    labels = json.loads((out / "labels.json").read_text())
    for o in labels["objects"]:
        o["id"] = 99
    for f in labels["frames"]:
        for e in f["objects"]:
            e["id"] = 99
    (tmp_path / "renamed.json").write_text(json.dumps(labels))
    rc = main(["evaluate", "--pred", str(tmp_path / "renamed.json"),
               "--gt", str(out / "labels.json"),
               "--out", str(tmp_path / "r.json")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "99" in err and "error[" in err


# --- simulate ---------------------------------------------------------------------

def test_simulate_cli_writes_report(tmp_path, capsys):
    mesh_dir = tmp_path / "meshes"
    mesh_dir.mkdir()
    write_obj(make_box((0.25, 0.18, 0.12)), mesh_dir / "a.obj")
    cfg = tmp_path / "rc.json"
    cfg.write_text(json.dumps({
        "max_iterations": 4,
        "rotation_magnitudes_deg": [0.0, 2.0, -2.0],
        "translation_magnitudes_mm": [0.0, 5.0, 10.0, 20.0],
    }))
    out = tmp_path / "report.json"
    rc = main(["simulate", "--meshes", str(mesh_dir), "--cameras", "4",
               "--noise-sigma-cm", "2", "--runs-per-mesh", "2", "--seed", "7",
               "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    report = json.loads(out.read_text())
    assert "mean_iterations" in report
    assert len(report["runs"]) == 2
    assert all(r["mesh"] == "a" for r in report["runs"])


def test_simulate_cli_deterministic_under_seed(tmp_path):
    cfg = tmp_path / "rc.json"
    cfg.write_text(json.dumps({
        "max_iterations": 3,
        "rotation_magnitudes_deg": [0.0, 2.0, -2.0],
        "translation_magnitudes_mm": [0.0, 5.0, 20.0],
    }))
    outs = []
    for name in ("r1.json", "r2.json"):
        main(["simulate", "--procedural", "--cameras", "3",
              "--noise-sigma-cm", "2", "--runs-per-mesh", "1", "--seed", "5",
              "--config", str(cfg), "--out", str(tmp_path / name)])
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]


# --- fuse -------------------------------------------------------------------------

def test_fuse_cli(tmp_path):
    mesh = make_box((0.2, 0.15, 0.1))
    write_obj(mesh, tmp_path / "box.obj")
    depth_dir = tmp_path / "depth"
    depth_dir.mkdir()
    z = np.full((INTR.height, INTR.width), 0.8)
    frames = []
    for i in range(2):
        save_depth_png(depth_dir / f"d{i}.png", DepthMap(z.copy()), 0.001)
        frames.append(FrameRecord(
            frame_id=i, camera_to_world=RigidTransform.identity(),
            rgb_path=str(tmp_path / f"rgb{i}.png"),
            depth_path=str(depth_dir / f"d{i}.png")))
    scene = Scene(frames=frames, objects=[], intrinsics=INTR, scene_id="f")
    cfg = tmp_path / "scene.json"
    save_scene(scene, cfg)
    out = tmp_path / "cloud.ply"
    rc = main(["fuse", "--scene", str(cfg), "--voxel-size-mm", "10",
               "--truncation-mm", "30", "--origin-m=-0.2,-0.2,0.6",
               "--dims", "40,40,40", "--out", str(out)])
    assert rc == 0
    text = out.read_text().splitlines()
    assert text[0] == "ply"
    n = int([l for l in text if l.startswith("element vertex")][0].split()[-1])
    assert n > 100


def test_fuse_without_depth_exit_1(tmp_path, capsys):
    _scene, cfg = scene_fixture(tmp_path)
    rc = main(["fuse", "--scene", str(cfg), "--out", str(tmp_path / "c.ply")])
    assert rc == 1
    assert "error[no-depth]" in capsys.readouterr().err


# --- refine ------------------------------------------------------------------------

def test_refine_cli(tmp_path, capsys):
    scene, cfg = scene_fixture(tmp_path, n_frames=3)
    true_pose = RigidTransform(translation=np.array([0.0, 0.0, 0.8]))
    mask_dir = tmp_path / "masks"
    mask_dir.mkdir()
    for frame in scene.frames:
        m = render_silhouette(scene.objects[0].mesh, true_pose,
                              frame.camera_to_world, INTR)
        Image.fromarray(m.bits.astype(np.uint8) * 255, mode="L").save(
            mask_dir / f"{frame.frame_id:06d}.png")
    # perturb the stored pose, then refine back
    scene.objects[0].pose_world = RigidTransform(
        translation=np.array([0.008, -0.006, 0.8]))
    save_scene(scene, cfg)
    rcfg = tmp_path / "rc.json"
    rcfg.write_text(json.dumps({"max_iterations": 9}))
    out = tmp_path / "refined.json"
    rc = main(["refine", "--scene", str(cfg), "--object-id", "1",
               "--masks", str(mask_dir), "--config", str(rcfg),
               "--write-back", "--out", str(out)])
    assert rc == 0
    result = json.loads(out.read_text())
    err = np.linalg.norm(np.array(result["refined_pose"]["translation"])
                         - [0, 0, 0.8])
    assert err < 0.008
    # write-back stored the refined pose
    stored = json.loads(cfg.read_text())
    assert np.allclose(stored["objects"][0]["pose"]["translation"],
                       result["refined_pose"]["translation"])


def test_refine_cli_no_masks_exit_1(tmp_path, capsys):
    _scene, cfg = scene_fixture(tmp_path)
    empty = tmp_path / "none"
    empty.mkdir()
    rc = main(["refine", "--scene", str(cfg), "--object-id", "1",
               "--masks", str(empty), "--out", str(tmp_path / "r.json")])
    assert rc == 1
    assert "error[no-masks]" in capsys.readouterr().err


# --- import -----------------------------------------------------------------------

def test_import_cli_tum(tmp_path, capsys):
    rgb = tmp_path / "rgb"
    rgb.mkdir()
    for i in range(3):
        Image.fromarray(np.zeros((INTR.height, INTR.width, 3), np.uint8),
                        "RGB").save(rgb / f"{i:04d}.png")
    (tmp_path / "traj.txt").write_text(
        "0.0 0 0 0 0 0 0 1\n0.1 0.1 0 0 0 0 0 1\n0.2 0.2 0 0 0 0 0 1\n")
    write_obj(make_box((0.1, 0.1, 0.1)), tmp_path / "m.obj")
    out = tmp_path / "scene.json"
    rc = main(["import", "--rgb-dir", str(rgb), "--tum", str(tmp_path / "traj.txt"),
               "--intrinsics", "400,400,160,120,320,240",
               "--mesh", f"2:thing:{tmp_path / 'm.obj'}",
               "--out", str(out)])
    assert rc == 0
    cfg = json.loads(out.read_text())
    assert len(cfg["frames"]) == 3
    assert cfg["frames"][2]["pose"]["translation"][0] == pytest.approx(0.2)
    assert cfg["objects"][0]["id"] == 2


def test_import_needs_exactly_one_trajectory(tmp_path, capsys):
    rgb = tmp_path / "rgb"
    rgb.mkdir()
    Image.fromarray(np.zeros((8, 8, 3), np.uint8), "RGB").save(rgb / "0.png")
    rc = main(["import", "--rgb-dir", str(rgb),
               "--intrinsics", "400,400,160,120,320,240",
               "--out", str(tmp_path / "s.json")])
    assert rc == 1
    assert "error[bad-trajectory]" in capsys.readouterr().err


# --- console entry point -----------------------------------------------------------

def test_module_invocation_help():
    proc = subprocess.run([sys.executable, "-m", "poselab.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "simulate" in proc.stdout
