"""File formats: run configuration, keypoint and result JSON-lines, manifests, cases."""
import dataclasses
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .camera import Camera, WeakPerspective, weak_to_perspective
from .engine import EngineConfig
from .errors import ConfigError, FormatError
from .guidance import GuidanceWeights
from .rotation import axis_angle_to_pose6d, pose6d_to_axis_angle
from .synthetic import SyntheticCase, spec_from_dict, spec_to_dict
from .training import TrainConfig

CONFIG_ENV = "SCOREFIT_CONFIG"

# ------------------------------------------------------------------ run config

_ENGINE_KEYS = [f.name for f in dataclasses.fields(EngineConfig) if f.name != "weights"]
_WEIGHT_KEYS = [f.name for f in dataclasses.fields(GuidanceWeights)]
_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)]

RUN_DEFAULTS = {
    **{k: getattr(EngineConfig(), k) for k in _ENGINE_KEYS},
    **{k: getattr(GuidanceWeights(), k) for k in _WEIGHT_KEYS},
    **{"train_" + k: getattr(TrainConfig(), k) for k in _TRAIN_KEYS},
    "schedule_T": 1000,
    "schedule_kind": "cosine",
    "model": "",
    "checkpoint": "",
    "inputs": "",
    "output_dir": "out",
    "metric_joints": "24",
    "seed": 0,
    "workers": 1,
    "chunk_size": 32,
    "write_obj": False,
    "fps": 30.0,
}


def _coerce(key, value):
    default = RUN_DEFAULTS[key]
    if isinstance(value, str):
        value = value.strip()
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            f = float(value)
            if f != int(f):
                raise ValueError(value)
            return int(f)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {type(default).__name__}") from None
    return str(value)


def parse_config_text(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in RUN_DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(path=None, overrides=None):
    """Defaults, then the config file (explicit or from the environment), then overrides."""
    cfg = dict(RUN_DEFAULTS)
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        cfg.update(parse_config_text(p.read_text(), str(p)))
    for key, value in (overrides or {}).items():
        if key not in RUN_DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value)
    engine_config(cfg).validate(cfg["schedule_T"])
    train_config(cfg)
    if cfg["workers"] < 1 or cfg["chunk_size"] < 1:
        raise ConfigError("workers and chunk_size must be >= 1")
    metric_joints(cfg)
    for key in ("model", "checkpoint", "inputs"):
        if cfg[key] and not Path(cfg[key]).exists():
            raise ConfigError(f"config key {key!r}: path {cfg[key]} does not exist")
    return cfg


def format_config(cfg):
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def engine_config(cfg):
    weights = GuidanceWeights(**{k: cfg[k] for k in _WEIGHT_KEYS})
    return EngineConfig(weights=weights, **{k: cfg[k] for k in _ENGINE_KEYS})


def train_config(cfg):
    return TrainConfig(**{k: cfg["train_" + k] for k in _TRAIN_KEYS})


def metric_joints(cfg):
    from .metrics import SMPL_14_SUBSET

    spec = str(cfg["metric_joints"]).strip()
    if spec == "24":
        return None
    if spec == "14":
        return list(SMPL_14_SUBSET)
    try:
        return [int(s) for s in spec.split(",")]
    except ValueError:
        raise ConfigError(f"metric_joints must be 14, 24 or a comma list, got {spec!r}") from None


# ------------------------------------------------------------------ hashing


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, cfg, inputs, extra=None):
    from . import __version__

    manifest = {
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "inputs": {str(p): file_sha256(p) for p in inputs if p and Path(p).is_file()},
        "version": __version__,
    }
    if cfg.get("checkpoint") and Path(cfg["checkpoint"]).is_file():
        manifest["checkpoint_sha256"] = file_sha256(cfg["checkpoint"])
    if cfg.get("model") and Path(cfg["model"]).is_file():
        manifest["model_sha256"] = file_sha256(cfg["model"])
    manifest.update(extra or {})
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
    return manifest


def read_manifest(path):
    try:
        m = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest: {exc}") from exc
    for key in ("command", "config"):
        if key not in m:
            raise FormatError(f"{path}: manifest lacks {key!r}")
    return m


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ------------------------------------------------------------------ keypoint files


@dataclasses.dataclass
class FrameRecord:
    frame: int
    keypoints: np.ndarray  # (K, 2)
    conf: np.ndarray  # (K,)
    camera: Camera | None = None
    features: np.ndarray | None = None
    init_pose: np.ndarray | None = None  # (144,) 6D
    beta: np.ndarray | None = None
    target: str | None = None

    def __eq__(self, other):
        if not isinstance(other, FrameRecord):
            return NotImplemented
        return record_to_json(self) == record_to_json(other)


def _fail(path, lineno, msg):
    raise FormatError(f"{path}:{lineno}: {msg}")


def _float_array(path, lineno, value, name, shape=None):
    try:
        a = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        _fail(path, lineno, f"{name} must be numeric")
    if shape is not None and a.shape != shape:
        _fail(path, lineno, f"{name} has shape {a.shape}, expected {shape}")
    if not np.all(np.isfinite(a)):
        _fail(path, lineno, f"{name} contains non-finite values")
    return a


def _parse_camera(path, lineno, d):
    if not isinstance(d, dict):
        _fail(path, lineno, "camera must be an object")
    focal = float(d.get("focal", 5000.0))
    pp = tuple(_float_array(path, lineno, d.get("principal_point", [112.0, 112.0]), "camera.principal_point", (2,)))
    try:
        if "translation" in d:
            t = _float_array(path, lineno, d["translation"], "camera.translation", (3,))
            return Camera(focal, pp, tuple(t))
        if "box" in d:
            b = d["box"]
            wp = WeakPerspective(
                float(b["scale"]),
                tuple(_float_array(path, lineno, b.get("translation", [0, 0]), "camera.box.translation", (2,))),
                tuple(_float_array(path, lineno, b["center"], "camera.box.center", (2,))),
                float(b["size"]),
            )
            return weak_to_perspective(wp, focal, pp)
    except (KeyError, TypeError, ValueError) as exc:
        _fail(path, lineno, f"invalid camera block: {exc}")
    _fail(path, lineno, "camera needs 'translation' or 'box'")


def _parse_pose(path, lineno, value):
    a = _float_array(path, lineno, value, "init_pose")
    if a.size == 144:
        return a.reshape(144)
    if a.size == 72:
        return axis_angle_to_pose6d(a.reshape(24, 3))
    _fail(path, lineno, f"init_pose must hold 24x6 or 24x3 values, got {a.size}")


def parse_record(obj, path="<record>", lineno=1):
    if not isinstance(obj, dict):
        _fail(path, lineno, "record must be a JSON object")
    if "keypoints" not in obj:
        _fail(path, lineno, "missing field 'keypoints'")
    kp = _float_array(path, lineno, obj["keypoints"], "keypoints")
    if kp.ndim != 2 or kp.shape[1] != 3:
        _fail(path, lineno, f"keypoints must be K x (u, v, conf), got shape {kp.shape}")
    conf = kp[:, 2]
    if np.any(conf < 0) or np.any(conf > 1):
        bad = int(np.flatnonzero((conf < 0) | (conf > 1))[0])
        _fail(path, lineno, f"keypoint {bad}: conf {conf[bad]} outside the bound [0, 1]")
    try:
        frame = int(obj.get("frame", lineno - 1))
    except (TypeError, ValueError):
        _fail(path, lineno, "frame must be an integer")
    rec = FrameRecord(frame=frame, keypoints=kp[:, :2].copy(), conf=conf.copy())
    if obj.get("camera") is not None:
        rec.camera = _parse_camera(path, lineno, obj["camera"])
    if obj.get("features") is not None:
        rec.features = _float_array(path, lineno, obj["features"], "features").reshape(-1)
    if obj.get("init_pose") is not None:
        rec.init_pose = _parse_pose(path, lineno, obj["init_pose"])
    if obj.get("beta") is not None:
        rec.beta = _float_array(path, lineno, obj["beta"], "beta").reshape(-1)
    if obj.get("target") is not None:
        rec.target = str(obj["target"])
    return rec


def parse_keypoint_file(path):
    """Parse a JSON-lines keypoint file; raises FormatError naming path and line."""
    records = []
    K = None
    try:
        lines = Path(path).read_text().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            _fail(path, lineno, f"invalid JSON: {exc.msg}")
        rec = parse_record(obj, path, lineno)
        if K is None:
            K = len(rec.conf)
        elif len(rec.conf) != K:
            _fail(path, lineno, f"{len(rec.conf)} keypoints, earlier records have {K}")
        records.append(rec)
    if not records:
        raise FormatError(f"{path}: no records")
    return records


def record_to_json(rec):
    obj = {"frame": int(rec.frame), "keypoints": np.column_stack([rec.keypoints, rec.conf]).tolist()}
    if rec.camera is not None:
        obj["camera"] = rec.camera.to_dict()
    if rec.features is not None:
        obj["features"] = np.asarray(rec.features).tolist()
    if rec.init_pose is not None:
        obj["init_pose"] = np.asarray(rec.init_pose).tolist()
    if rec.beta is not None:
        obj["beta"] = np.asarray(rec.beta).tolist()
    if rec.target is not None:
        obj["target"] = rec.target
    return obj


def write_keypoint_file(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec)) + "\n")
    return path


# ------------------------------------------------------------------ results


def result_record(target, pose, camera, loss_trace, outer_losses, stop_reason, iterations):
    pose = np.asarray(pose, dtype=np.float64)
    return {
        "target": str(target),
        "pose_6d": pose.tolist(),
        "pose_axis_angle": pose6d_to_axis_angle(pose).reshape(-1).tolist(),
        "camera": camera.to_dict() if camera is not None else None,
        "loss_trace": [float(v) for v in loss_trace],
        "outer_losses": [float(v) for v in outer_losses],
        "stop_reason": stop_reason,
        "iterations": int(iterations),
    }


def write_result(record, path):
    Path(path).write_text(json.dumps(record) + "\n")
    return path


def read_result(path):
    try:
        obj = json.loads(Path(path).read_text().splitlines()[0])
    except (OSError, IndexError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}:1: unreadable result record: {exc}") from exc
    if "pose_6d" not in obj or len(obj["pose_6d"]) != 144:
        raise FormatError(f"{path}:1: result record lacks a 144-value pose_6d")
    return obj


# ------------------------------------------------------------------ synthetic cases


def case_to_json(case):
    obj = {
        "seed": case.seed,
        "spec": spec_to_dict(case.spec),
        "gt_pose": case.gt_pose.tolist(),
        "init_pose": case.init_pose.tolist(),
        "beta": case.beta.tolist(),
        "features": case.features.tolist(),
        "gt_joints": case.gt_joints.tolist(),
        "camera_gt": [c.to_dict() for c in case.camera_gt],
        "camera_init": [c.to_dict() for c in case.camera_init],
    }
    if case.keypoints is not None:
        obj["keypoints"] = case.keypoints.tolist()
        obj["conf"] = case.conf.tolist()
    return obj


def case_from_json(obj):
    arr = lambda k: np.asarray(obj[k], dtype=np.float64)
    return SyntheticCase(
        seed=obj["seed"], spec=spec_from_dict(obj["spec"]), gt_pose=arr("gt_pose"), init_pose=arr("init_pose"),
        beta=arr("beta"), features=arr("features"), gt_joints=arr("gt_joints"),
        camera_gt=[Camera.from_dict(c) for c in obj["camera_gt"]],
        camera_init=[Camera.from_dict(c) for c in obj["camera_init"]],
        keypoints=arr("keypoints") if "keypoints" in obj else None,
        conf=arr("conf") if "conf" in obj else None,
    )


def write_case(case, path):
    Path(path).write_text(json.dumps(case_to_json(case)))
    return path


def read_case(path):
    try:
        return case_from_json(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid case file: {exc}") from exc


def case_keypoint_records(case):
    """Keypoint-file records for the fit commands (init from the simulated regressor)."""
    poses = np.atleast_2d(case.init_pose)
    feats = np.atleast_2d(case.features)
    n = poses.shape[0]
    kp = case.keypoints.reshape(n, -1, 2) if case.keypoints is not None else None
    conf = case.conf.reshape(n, -1) if case.conf is not None else None
    cams = case.camera_init if case.camera_init else [None] * n
    out = []
    for i in range(n):
        out.append(
            FrameRecord(
                frame=i,
                keypoints=kp[i] if kp is not None else np.zeros((24, 2)),
                conf=conf[i] if conf is not None else np.zeros(24),
                camera=cams[i] if i < len(cams) else None,
                features=feats[i],
                init_pose=poses[i],
                beta=case.beta,
                target=f"case{case.seed}_{i}",
            )
        )
    return out
