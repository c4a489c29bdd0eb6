import json
import shutil

import pytest

from mtmc3d import pipeline, synth
from mtmc3d.boxes import Box3D
from mtmc3d.cli import EXIT_DATA, EXIT_OK, EXIT_VALIDATION, main
from mtmc3d.config import PipelineConfig
from mtmc3d.errors import ValidationError
from mtmc3d.ingest import load_results, quantize_box

from oracles import literal_fuse

from test_synth import same_tree


def copy_without_depth(src, dst):
    shutil.copytree(src, dst, ignore=shutil.ignore_patterns("depth"))
    return dst


def test_exit_codes(tmp_path, small_scene, capsys):
    assert main(["run", "--scene", str(small_scene), "--out", str(tmp_path / "o"), "--mode", "2d"]) == EXIT_OK
    assert main(["run", "--scene", str(tmp_path / "missing"), "--out", str(tmp_path / "o2")]) == EXIT_DATA
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"fusion": {"threshold": -1}}))
    assert main(["run", "--scene", str(small_scene), "--out", str(tmp_path / "o3"), "--config", str(bad)]) == EXIT_VALIDATION
    assert main(["eval", "--gt", str(small_scene / "gt.txt"), "--pred", str(tmp_path / "nope.txt")]) == EXIT_DATA
    assert "error:" in capsys.readouterr().err


def test_print_config_marks_published_constants(capsys):
    assert main(["run", "--print-config"]) == EXIT_OK
    data = json.loads(capsys.readouterr().out)
    assert data["lift"]["min_samples"] == 50 and data["fusion"]["threshold"] == 0.1
    assert data["_notes"]["yaw.period"].startswith("published default")
    assert "sct.max_age" not in data["_notes"]


def test_empty_scene_gives_empty_results(tmp_path, small_scene):
    scene = tmp_path / "empty"
    scene.mkdir()
    for name in ("calibration.json", "class_stats.json"):
        shutil.copy(small_scene / name, scene / name)
    (scene / "detections.jsonl").write_text("")
    summary = pipeline.run(scene, PipelineConfig(), tmp_path / "out")
    assert summary.frames == 0 and (tmp_path / "out" / "results.txt").read_text() == ""


def test_gen_is_deterministic_and_eval_of_gt_is_perfect(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen", "--out", str(tmp_path / name), "--preset", "noisy", "--seed", "7", "--frames", "5"]) == EXIT_OK
    assert same_tree(tmp_path / "a", tmp_path / "b")
    capsys.readouterr()
    gt = str(tmp_path / "a" / "gt.txt")
    assert main(["eval", "--gt", gt, "--pred", gt, "--out", str(tmp_path / "alpha.csv")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "HOTA 1.0000" in out and "IDSW gt 0 pred 0" in out
    assert len((tmp_path / "alpha.csv").read_text().splitlines()) == 20


def test_2d_mode_writes_per_camera_lines(tmp_path, small_scene):
    pipeline.run(small_scene, PipelineConfig(mode="2d"), tmp_path)
    lines = (tmp_path / "results_2d.txt").read_text().splitlines()
    assert lines and not (tmp_path / "results.txt").exists()
    frame, cam, gid, *box = lines[-1].split()
    assert int(cam) in range(4) and int(gid) >= 1 and len(box) == 4


def test_results_reload_equals_in_memory_boxes(tmp_path, small_scene):
    cfg = PipelineConfig()
    pipeline.run(small_scene, cfg, tmp_path, max_frame=15)
    pipe = pipeline.Pipeline(pipeline.load_scene(small_scene, cfg), cfg)
    rows = []
    for f in range(16):
        rows += [(f, quantize_box(b)) for b in pipe.step(f).boxes]
    pipe.close()
    assert load_results(tmp_path / "results.txt") == rows and rows


def test_inspect_fusion_groups_match_the_literal_procedure(tmp_path, small_scene):
    out = tmp_path / "frame.json"
    assert main(["inspect", "--scene", str(small_scene), "--frame", "12", "--out", str(out)]) == EXIT_OK
    dump = json.loads(out.read_text())
    boxes = [Box3D(*b["center"], *b["dims"], b["yaw"], b["score"], b["class_id"], b["global_id"])
             for b in dump["boxes_before_fusion"]]
    assert boxes
    _, groups = literal_fuse(boxes, 0.1)
    assert dump["fusion_groups"] == groups
    assert {a["stage"] for a in dump["assignments"]} <= {"confirmed", "lost", "lost-pending", "tentative", "spawn"}
    with pytest.raises(ValidationError):
        pipeline.inspect(small_scene, PipelineConfig(), 10_000)


def test_worker_count_does_not_change_output(tmp_path, small_scene):
    for w in (1, 3):
        pipeline.run(small_scene, PipelineConfig(workers=w), tmp_path / f"w{w}", max_frame=12)
    for name in ("results.txt", "events.jsonl", "counters.jsonl"):
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w3" / name).read_bytes()


def test_missing_depth_falls_back_and_is_counted(tmp_path, small_scene, caplog):
    scene = copy_without_depth(small_scene, tmp_path / "scene")
    summary = pipeline.run(scene, PipelineConfig(), tmp_path / "out", max_frame=8)
    assert summary.counters["fallback_boxes"] == summary.boxes > 0
    assert summary.counters["missing_inputs"] > 0
    assert "without depth or mask" in caplog.text
    for _, box in load_results(tmp_path / "out" / "results.txt"):
        assert box.z > 0


def test_fixed_box_mode_needs_no_depth(tmp_path, small_scene):
    scene = copy_without_depth(small_scene, tmp_path / "scene")
    cfg = PipelineConfig()
    cfg.lift.box_mode = "fixed"
    summary = pipeline.run(scene, cfg, tmp_path / "out", max_frame=8)
    assert summary.boxes > 0 and summary.counters.get("missing_inputs", 0) == 0


def test_config_file_round_trip(tmp_path):
    cfg = PipelineConfig(mode="2d")
    cfg.temporal.track_splitting = False
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = PipelineConfig.load(str(path))
    assert again.to_dict() == cfg.to_dict()
    path.write_text(json.dumps({"no_such_key": 1}))
    with pytest.raises(ValidationError):
        PipelineConfig.load(str(path))


def test_gen_rejects_bad_scenario(tmp_path):
    cfg = synth.preset("clean").to_dict()
    cfg["miss_rate"] = 3
    path = tmp_path / "s.json"
    path.write_text(json.dumps(cfg))
    assert main(["gen", "--out", str(tmp_path / "x"), "--config", str(path)]) == EXIT_VALIDATION
