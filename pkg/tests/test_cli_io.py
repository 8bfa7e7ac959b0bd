import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from scorefit import cli, fileio
from scorefit.camera import Camera
from scorefit.errors import ConfigError, FormatError
from scorefit.rotation import axis_angle_to_pose6d, pose6d_to_axis_angle
from scorefit.synthetic import SyntheticWorld


def run_cli(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# ------------------------------------------------------------------ config


def test_defaults_resolve():
    cfg = fileio.resolve_config(None, {})
    assert cfg["tau"] == 50 and cfg["rho_repr"] == 0.003
    assert fileio.engine_config(cfg).weights.rho_temp == 30


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\ntau = 40\ndt = 4  # trailing comment\nuse_temp = false\n\nrho_repr = 0.01\n")
    cfg = fileio.resolve_config(path, {"tau": "20"})
    assert cfg["tau"] == 20 and cfg["dt"] == 4 and cfg["use_temp"] is False and cfg["rho_repr"] == 0.01
    assert fileio.parse_config_text(fileio.format_config(cfg)) == cfg


def test_config_env_variable(tmp_path, monkeypatch):
    path = tmp_path / "env.cfg"
    path.write_text("s_max = 3\n")
    monkeypatch.setenv(fileio.CONFIG_ENV, str(path))
    assert fileio.resolve_config()["s_max"] == 3


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("tua = 50\n", "unknown config key 'tua'"),
        ("tau 50\n", ":1: expected key = value"),
        ("tau = 2.5\n", "cannot parse"),
        ("tau = 50\ndt = 100\n", "dt <= tau"),
        ("use_mv = maybe\n", "cannot parse"),
        ("checkpoint = /nonexistent/x.npz\n", "does not exist"),
        ("metric_joints = a,b\n", "metric_joints"),
    ],
)
def test_config_errors(tmp_path, text, fragment):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError, match=fragment):
        fileio.resolve_config(path)


# ------------------------------------------------------------------ keypoint files


def make_records(n, K=24, seed=0, rich=True):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        pose = axis_angle_to_pose6d(rng.normal(0, 0.3, (24, 3))).reshape(-1)
        recs.append(
            fileio.FrameRecord(
                frame=i,
                keypoints=rng.uniform(0, 224, (K, 2)),
                conf=rng.uniform(0, 1, K),
                camera=Camera(translation=tuple(rng.normal(0, 1, 3) + [0, 0, 50])) if rich else None,
                features=rng.normal(size=32) if rich else None,
                init_pose=pose if rich else None,
                beta=rng.normal(size=2) if rich else None,
                target=f"t{i}" if rich else None,
            )
        )
    return recs


def test_minimal_record(tmp_path):
    path = tmp_path / "one.jsonl"
    path.write_text(json.dumps({"frame": 7, "keypoints": [[1.0, 2.0, 0.5], [3.0, 4.0, 1.0]]}) + "\n")
    (rec,) = fileio.parse_keypoint_file(path)
    assert rec.frame == 7
    np.testing.assert_array_equal(rec.keypoints, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(rec.conf, [0.5, 1.0])
    assert rec.camera is None and rec.features is None and rec.init_pose is None and rec.beta is None


def test_hundred_frame_roundtrip(tmp_path):
    recs = make_records(100)
    path = fileio.write_keypoint_file(recs, tmp_path / "seq.jsonl")
    back = fileio.parse_keypoint_file(path)
    assert back == recs
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(a.keypoints, b.keypoints)
        np.testing.assert_array_equal(a.init_pose, b.init_pose)


def test_conf_out_of_bound(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = json.dumps({"frame": 0, "keypoints": [[1, 2, 0.5]]})
    bad = json.dumps({"frame": 1, "keypoints": [[1, 2, 1.2]]})
    path.write_text(good + "\n" + bad + "\n")
    with pytest.raises(FormatError, match=r"bad.jsonl:2: .*outside the bound \[0, 1\]"):
        fileio.parse_keypoint_file(path)


@pytest.mark.parametrize(
    "line, fragment",
    [
        ("{not json", "invalid JSON"),
        ('{"frame": 0}', "missing field 'keypoints'"),
        ('{"frame": 0, "keypoints": [[1, 2]]}', "K x (u, v, conf)"),
        ('{"frame": 0, "keypoints": [[1, 2, 0.5]], "init_pose": [0, 1]}', "init_pose"),
        ('{"frame": 0, "keypoints": [[1, 2, 0.5]], "camera": {"focal": 100}}', "camera"),
    ],
)
def test_format_errors_name_line(tmp_path, line, fragment):
    path = tmp_path / "f.jsonl"
    path.write_text(json.dumps({"frame": 0, "keypoints": [[1, 2, 0.5]]}) + "\n" + line + "\n")
    with pytest.raises(FormatError, match=r"f.jsonl:2: ") as info:
        fileio.parse_keypoint_file(path)
    assert fragment in str(info.value)


def test_inconsistent_keypoint_count(tmp_path):
    recs = make_records(1, K=24) + make_records(1, K=17, seed=1)
    path = fileio.write_keypoint_file(recs, tmp_path / "k.jsonl")
    with pytest.raises(FormatError, match="k.jsonl:2: 17 keypoints"):
        fileio.parse_keypoint_file(path)


def test_axis_angle_init_pose(tmp_path):
    aa = np.random.default_rng(3).normal(0, 0.4, (24, 3))
    path = tmp_path / "aa.jsonl"
    path.write_text(json.dumps({"frame": 0, "keypoints": [[1, 2, 0.5]], "init_pose": aa.tolist()}) + "\n")
    (rec,) = fileio.parse_keypoint_file(path)
    np.testing.assert_allclose(pose6d_to_axis_angle(rec.init_pose), aa, atol=1e-12)


def test_box_camera(tmp_path):
    path = tmp_path / "box.jsonl"
    box = {"scale": 0.9, "translation": [0.1, -0.2], "center": [112, 112], "size": 224}
    obj = {"frame": 0, "keypoints": [[1, 2, 0.5]], "camera": {"box": box}}
    path.write_text(json.dumps(obj) + "\n")
    (rec,) = fileio.parse_keypoint_file(path)
    t = rec.camera.translation
    assert t[0] == pytest.approx(0.1) and t[1] == pytest.approx(-0.2)
    assert t[2] == pytest.approx(2 * 5000 / (224 * 0.9))


def test_result_record_roundtrip(tmp_path):
    pose = make_records(1)[0].init_pose
    rec = fileio.result_record("a", pose, Camera(), [3.0, 2.0], [3.0, 1.0], "S_max", 2)
    back = fileio.read_result(fileio.write_result(rec, tmp_path / "a.result.json"))
    assert back == rec
    np.testing.assert_allclose(axis_angle_to_pose6d(np.reshape(back["pose_axis_angle"], (24, 3))).reshape(-1), pose, atol=1e-12)


def test_case_roundtrip(tmp_path):
    w = SyntheticWorld(0)
    for case in (w.make_case(1), w.make_multiview_case(2), w.make_sequence_case(3)):
        back = fileio.read_case(fileio.write_case(case, tmp_path / "c.json"))
        np.testing.assert_array_equal(back.gt_pose, case.gt_pose)
        np.testing.assert_array_equal(back.gt_joints, case.gt_joints)
        assert back.spec == case.spec and back.camera_init == case.camera_init


# ------------------------------------------------------------------ commands


def test_synth_fit_eval(tmp_path, capsys):
    d = tmp_path / "run"
    code, out, _ = run_cli(["--output-dir", d, "synth", "--n", 2], capsys)
    assert code == 0 and json.loads(out)["cases"] == 2
    kp = d / "case0000.keypoints.jsonl"
    before = kp.read_bytes()
    code, out, _ = run_cli(["--output-dir", d / "fit", "--set", "s_max=2", "fit", kp], capsys)
    assert code == 0
    assert kp.read_bytes() == before  # inputs are never modified
    res = fileio.read_result(d / "fit" / "case0_0.result.json")
    assert res["stop_reason"] in ("threshold", "S_max")
    assert len(res["outer_losses"]) == res["iterations"] + 1
    manifest = json.loads((d / "fit" / "manifest.fit.json").read_text())
    assert manifest["config"]["s_max"] == 2 and "outputs" in manifest and str(kp) in manifest["inputs"]
    assert manifest["checkpoint_sha256"] == fileio.file_sha256(cli.DEFAULT_CHECKPOINT)
    run_cli(["--output-dir", d / "fit", "--set", "s_max=2", "fit", d / "case0001.keypoints.jsonl"], capsys)
    code, out, _ = run_cli(["--output-dir", d / "eval", "eval", "--results", d / "fit", d / "case0000.json", d / "case0001.json"], capsys)
    assert code == 0
    rows = list(csv.DictReader(open(d / "eval" / "metrics.csv")))
    assert [r["case"] for r in rows] == ["0", "1"]
    assert all(float(r["pa_mpjpe"]) <= float(r["mpjpe"]) + 1e-9 for r in rows)


def test_eval_perfect_predictions(tmp_path, capsys):
    w = SyntheticWorld(0)
    case = w.make_sequence_case(4)
    fileio.write_case(case, tmp_path / "case.json")
    res = tmp_path / "res"
    res.mkdir()
    for i, pose in enumerate(case.gt_pose):
        rec = fileio.result_record(f"case4_{i}", pose, None, [], [], "S_max", 0)
        fileio.write_result(rec, res / f"case4_{i}.result.json")
    code, _, _ = run_cli(["--output-dir", tmp_path / "ev", "eval", "--results", res, tmp_path / "case.json"], capsys)
    assert code == 0
    (row,) = list(csv.DictReader(open(tmp_path / "ev" / "metrics.csv")))
    assert float(row["mpjpe"]) == pytest.approx(0, abs=1e-9)
    assert float(row["pa_mpjpe"]) == pytest.approx(0, abs=1e-6)
    assert float(row["accel_error"]) == pytest.approx(0, abs=1e-9)


def test_fit_without_guidance_is_roundtrip(tmp_path, capsys):
    d = tmp_path
    run_cli(["--output-dir", d, "synth", "--n", 1], capsys)
    code, _, _ = run_cli(["--output-dir", d / "fit", "--set", "rho_repr=0", "fit", d / "case0000.keypoints.jsonl"], capsys)
    assert code == 0
    res = fileio.read_result(d / "fit" / "case0_0.result.json")
    init = fileio.parse_keypoint_file(d / "case0000.keypoints.jsonl")[0].init_pose
    assert res["iterations"] == 1
    assert np.abs(np.asarray(res["pose_6d"]) - init).max() < 2e-2


def test_workers_match_serial(tmp_path, capsys):
    run_cli(["--output-dir", tmp_path, "synth", "--kind", "sequence", "--n", 1], capsys)
    kp = tmp_path / "case0000.keypoints.jsonl"
    recs = fileio.parse_keypoint_file(kp)[:6]
    fileio.write_keypoint_file(recs, kp)
    base = ["--set", "s_max=1", "--set", "chunk_size=2"]
    run_cli(["--output-dir", tmp_path / "a", *base, "fit", kp], capsys)
    run_cli(["--output-dir", tmp_path / "b", *base, "--set", "workers=2", "fit", kp], capsys)
    for i in range(6):
        a = (tmp_path / "a" / f"case0_{i}.result.json").read_bytes()
        assert a == (tmp_path / "b" / f"case0_{i}.result.json").read_bytes()


def test_replay_is_bitwise(tmp_path, capsys):
    run_cli(["--output-dir", tmp_path, "synth", "--kind", "multiview", "--n", 1], capsys)
    kp = tmp_path / "case0000.keypoints.jsonl"
    code, _, _ = run_cli(["--output-dir", tmp_path / "a", "--set", "s_max=2", "fit-multiview", kp], capsys)
    assert code == 0
    code, _, _ = run_cli(["--replay", tmp_path / "a" / "manifest.fit-multiview.json", "--output-dir", tmp_path / "b"], capsys)
    assert code == 0
    ma = json.loads((tmp_path / "a" / "manifest.fit-multiview.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.fit-multiview.json").read_text())
    assert sorted(ma["outputs"].values()) == sorted(mb["outputs"].values())
    assert len(ma["outputs"]) == 4


def test_roundtrip_and_inspect(tmp_path, capsys):
    code, out, _ = run_cli(["--output-dir", tmp_path, "roundtrip", "--n", 5], capsys)
    assert code == 0
    report = json.loads(out)
    assert report["samples"] == 5 and report["tau"] == 50 and report["max_abs_error"] >= report["mean_abs_error"]
    code, out, _ = run_cli(["--output-dir", tmp_path, "inspect", cli.DEFAULT_CHECKPOINT], capsys)
    info = json.loads(out)
    assert code == 0 and info["kind"] == "checkpoint" and info["width"] == 144 and "world" in info["meta"]


def test_error_records(tmp_path, capsys):
    code, _, err = run_cli(["--set", "tau=0", "roundtrip"], capsys)
    assert code == 2 and json.loads(err)["error"] == "ConfigError"
    code, _, err = run_cli(["fit"], capsys)
    assert code == 2 and json.loads(err)["error"] == "ConfigError"
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"frame": 0, "keypoints": [[1, 2, 1.2]]}\n')
    code, _, err = run_cli(["--output-dir", tmp_path, "fit", bad], capsys)
    rec = json.loads(err)
    assert code == 1 and rec["error"] == "FormatError" and "bad.jsonl:1" in rec["message"]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "scorefit.cli", "--set", "bogus=1", "roundtrip"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["error"] == "ConfigError"
