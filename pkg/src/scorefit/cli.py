"""Command-line entry point: ``scorefit <subcommand> [options]``.

Every run resolves a flat configuration (defaults, config file, ``--set``
overrides), writes a manifest next to its outputs and exits nonzero with a
JSON error record on stderr when anything fails.
"""
import argparse
import csv
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import body_model as bm
from . import denoiser as dn
from . import fileio
from .camera import Camera
from .diffusion import cosine_schedule, ddim_invert, ddim_sample
from .errors import ConfigError, FormatError, ScoreFitError
from .metrics import accel_error, mpjpe, pa_mpjpe
from .synthetic import CaseSpec, MultiViewSpec, SequenceSpec, SyntheticWorld

DATA_DIR = Path(__file__).parent / "data"
DEFAULT_CHECKPOINT = DATA_DIR / "toy_pose.npz"


# ------------------------------------------------------------------ helpers


def _schedule(cfg):
    if cfg["schedule_kind"] != "cosine":
        raise ConfigError(f"unsupported schedule_kind {cfg['schedule_kind']!r}")
    return cosine_schedule(cfg["schedule_T"])


def _checkpoint_path(cfg):
    return Path(cfg["checkpoint"]) if cfg["checkpoint"] else DEFAULT_CHECKPOINT


def _load_checkpoint(cfg):
    path = _checkpoint_path(cfg)
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    return dn.checkpoint_load(path)


def _world_for(params):
    return SyntheticWorld.from_description(params.meta.get("world"), params.d)


def _load_model(cfg, params=None):
    if cfg["model"]:
        if not Path(cfg["model"]).is_file():
            raise ConfigError(f"model {cfg['model']} does not exist")
        return bm.load_model(cfg["model"])
    return _world_for(params).model if params is not None else bm.make_toy_model()


def _out_dir(cfg):
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _default_init(params, n):
    world = _world_for(params)
    pose = world.reference_pose.copy()
    pose[:6] = [1, 0, 0, 0, -1, 0]  # upright body seen by a camera looking along +z
    return np.tile(pose, (n, 1))


def _stack_records(records, params, model):
    n = len(records)
    x = np.stack([r.init_pose if r.init_pose is not None else _default_init(params, 1)[0] for r in records])
    c = np.stack([r.features if r.features is not None else np.zeros(params.d) for r in records])
    if c.shape[1] != params.d:
        raise FormatError(f"features have width {c.shape[1]}, checkpoint expects {params.d}")
    y = np.stack([r.keypoints for r in records])
    w = np.stack([r.conf for r in records])
    if y.shape[1] != model.n_reported:
        raise FormatError(f"keypoint files have {y.shape[1]} keypoints, model reports {model.n_reported}")
    beta = np.stack([r.beta if r.beta is not None else np.zeros(model.n_shape) for r in records])
    cams = [r.camera if r.camera is not None else Camera() for r in records]
    targets = [r.target or f"frame{r.frame}" for r in records]
    return x, c, (y, w), beta, cams, targets


def _emit_results(out, res, targets, model, cfg, betas):
    written = []
    for i, name in enumerate(targets):
        r = res.for_target(i)
        rec = fileio.result_record(name, r["pose"], r["camera"], r["loss_trace"], r["outer_losses"], r["stop_reason"], r["iterations"])
        written.append(fileio.write_result(rec, out / f"{name}.result.json"))
        if cfg["write_obj"]:
            verts = bm.forward(model, r["pose"], betas[i]).vertices
            bm.write_obj(out / f"{name}.obj", verts, model.faces)
    return written


def _fit_chunk(args):
    cfg, records, chunk_id = args
    from .engine import refine

    params = _load_checkpoint(cfg)
    model = _load_model(cfg, params)
    x, c, obs, beta, cams, targets = _stack_records(records, params, model)
    res = refine(params, _schedule(cfg), fileio.engine_config(cfg), x, c, obs, beta, model, cams)
    return chunk_id, res, targets, beta


# ------------------------------------------------------------------ commands


def cmd_train(cfg, args):
    from .training import train, write_loss_csv

    sched = _schedule(cfg)
    tcfg = fileio.train_config(cfg)
    world = SyntheticWorld(seed=cfg["seed"])
    if args.data:
        with np.load(args.data) as d:
            data = (d["c"], d["x0"])
    else:
        data = world.training_pairs(args.n_samples, seed=cfg["seed"])
    log = (lambda i, loss: print(json.dumps({"iteration": i, "loss": loss}), flush=True)) if args.verbose else None
    _, ema, trace = train(tcfg, data, sched, callback=log)
    out = _out_dir(cfg)
    ckpt = out / "checkpoint.npz"
    meta = {"world": world.describe(), "dataset": args.data or f"synthetic:{args.n_samples}"}
    dn.checkpoint_save(ema, ckpt, meta)
    write_loss_csv(trace, out / "loss.csv")
    print(json.dumps({"checkpoint": str(ckpt), "final_loss_mean100": float(trace[-100:, 1].mean())}))
    return [ckpt, out / "loss.csv"]


def cmd_fit(cfg, args):
    records = fileio.parse_keypoint_file(args.keypoints)
    out = _out_dir(cfg)
    size = cfg["chunk_size"]
    chunks = [(cfg, records[i : i + size], k) for k, i in enumerate(range(0, len(records), size))]
    if cfg["workers"] > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            results = list(pool.map(_fit_chunk, chunks))
    else:
        results = [_fit_chunk(ch) for ch in chunks]
    params = _load_checkpoint(cfg)
    model = _load_model(cfg, params)
    written = []
    for _, res, targets, betas in sorted(results, key=lambda r: r[0]):
        written += _emit_results(out, res, targets, model, cfg, betas)
    print(json.dumps({"results": len(written), "output_dir": str(out)}))
    return written


def _coupled(cfg, args, driver):
    from . import engine

    params = _load_checkpoint(cfg)
    model = _load_model(cfg, params)
    records = fileio.parse_keypoint_file(args.keypoints)
    x, c, obs, beta, cams, targets = _stack_records(records, params, model)
    has_kp = obs[1].any()
    fn = getattr(engine, driver)
    res = fn(params, _schedule(cfg), fileio.engine_config(cfg), x, c, obs if has_kp else None, beta, model, cams)
    written = _emit_results(_out_dir(cfg), res, targets, model, cfg, beta)
    print(json.dumps({"results": len(written), "stop_reason": res.stop_reason[0], "output_dir": cfg["output_dir"]}))
    return written


def cmd_fit_multiview(cfg, args):
    return _coupled(cfg, args, "refine_multiview")


def cmd_fit_video(cfg, args):
    return _coupled(cfg, args, "refine_sequence")


def cmd_synth(cfg, args):
    params = _load_checkpoint(cfg) if _checkpoint_path(cfg).is_file() else None
    world = _world_for(params) if params is not None else SyntheticWorld(seed=cfg["seed"])
    out = _out_dir(cfg)
    written = []
    for k in range(args.n):
        seed = args.start + k
        if args.kind == "single":
            case = world.make_case(seed, CaseSpec())
        elif args.kind == "multiview":
            case = world.make_multiview_case(seed, MultiViewSpec())
        else:
            case = world.make_sequence_case(seed, SequenceSpec(fps=cfg["fps"]))
        written.append(fileio.write_case(case, out / f"case{seed:04d}.json"))
        written.append(fileio.write_keypoint_file(fileio.case_keypoint_records(case), out / f"case{seed:04d}.keypoints.jsonl"))
    print(json.dumps({"cases": args.n, "kind": args.kind, "output_dir": str(out)}))
    return written


def cmd_eval(cfg, args):
    model_cache = {}
    joints = fileio.metric_joints(cfg)
    out = _out_dir(cfg)
    rows = []
    for case_path in sorted(args.cases):
        case = fileio.read_case(case_path)
        model = model_cache.setdefault("m", _load_model(cfg, _load_checkpoint(cfg) if _checkpoint_path(cfg).is_file() else None))
        jm = model.joint_map(case.beta)
        n = np.atleast_2d(case.gt_pose).shape[0]
        preds = []
        for i in range(n):
            p = Path(args.results) / f"case{case.seed}_{i}.result.json"
            preds.append(np.asarray(fileio.read_result(p)["pose_6d"]))
        pred_j = jm.joints(np.stack(preds))
        gt_j = np.asarray(case.gt_joints).reshape(pred_j.shape)
        row = {
            "case": case.seed,
            "mpjpe": float(np.mean(mpjpe(pred_j, gt_j, joints=joints))),
            "pa_mpjpe": float(np.mean(pa_mpjpe(pred_j, gt_j, joints=joints))),
            "accel_error": float(accel_error(pred_j, gt_j, fps=cfg["fps"], joints=joints)) if n >= 3 and isinstance(case.spec, SequenceSpec) else "",
        }
        rows.append(row)
    path = out / "metrics.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["case", "mpjpe", "pa_mpjpe", "accel_error"])
        w.writeheader()
        w.writerows(rows)
    print(json.dumps({"metrics": str(path), "cases": len(rows)}))
    return [path]


def cmd_roundtrip(cfg, args):
    params = _load_checkpoint(cfg)
    world = _world_for(params)
    sched = _schedule(cfg)
    c, x0 = world.training_pairs(args.n, seed=10_000 + cfg["seed"])
    eps = dn.NoisePredictor(params, c)
    t0 = time.perf_counter()
    xt = ddim_invert(sched, eps, x0, cfg["tau"], cfg["dt"])
    xr = ddim_sample(sched, eps, xt, cfg["tau"], cfg["dt"])
    elapsed = time.perf_counter() - t0
    err = np.abs(xr - x0)
    report = {"max_abs_error": float(err.max()), "mean_abs_error": float(err.mean()), "samples": args.n, "tau": cfg["tau"], "dt": cfg["dt"], "seconds": elapsed}
    print(json.dumps(report))
    path = _out_dir(cfg) / "roundtrip.json"
    path.write_text(json.dumps(report))
    return [path]


def cmd_inspect(cfg, args):
    path = Path(args.path)
    if path.suffix == ".npz":
        params = dn.checkpoint_load(path)
        info = {"kind": "checkpoint", "width": params.width, "d": params.d, "emb_dim": params.emb_dim,
                "n_blocks": params.n_blocks, "n_params": params.n_params(), "meta": params.meta}
    else:
        model = bm.load_model(path)
        info = {"kind": "body_model", "n_vertices": model.n_vertices, "n_joints": model.n_joints,
                "n_shape": model.n_shape, "n_reported": model.n_reported, "digest": model.digest()}
    info["sha256"] = fileio.file_sha256(path)
    print(json.dumps(info, indent=2, sort_keys=True, default=fileio._json_default))
    return []


COMMANDS = {
    "train": cmd_train,
    "fit": cmd_fit,
    "fit-multiview": cmd_fit_multiview,
    "fit-video": cmd_fit_video,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "roundtrip": cmd_roundtrip,
    "inspect": cmd_inspect,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="scorefit", description="Score-guided body pose refinement.")
    p.add_argument("--config", help="flat key = value config file (default: $SCOREFIT_CONFIG)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--replay", metavar="MANIFEST", help="re-run the command recorded in a manifest")
    p.add_argument("--output-dir", help="shortcut for --set output_dir=...")
    sub = p.add_subparsers(dest="command")

    t = sub.add_parser("train", help="train the pose denoiser on synthetic or supplied pairs")
    t.add_argument("--data", help="npz with arrays c (n, d) and x0 (n, 144)")
    t.add_argument("--n-samples", type=int, default=50000)
    t.add_argument("--verbose", action="store_true")

    for name in ("fit", "fit-multiview", "fit-video"):
        f = sub.add_parser(name, help=f"{name} from a JSON-lines keypoint file")
        f.add_argument("keypoints")

    e = sub.add_parser("eval", help="metric CSV from case files and a results directory")
    e.add_argument("--results", required=True)
    e.add_argument("cases", nargs="+")

    s = sub.add_parser("synth", help="write synthetic case files")
    s.add_argument("--kind", choices=["single", "multiview", "sequence"], default="single")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--start", type=int, default=0)

    r = sub.add_parser("roundtrip", help="report the max inversion/sampling error")
    r.add_argument("--n", type=int, default=100)

    i = sub.add_parser("inspect", help="print checkpoint or body-model metadata")
    i.add_argument("path")
    return p


def _overrides(args):
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    if args.output_dir:
        out["output_dir"] = args.output_dir
    return out


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.replay:
        manifest = fileio.read_manifest(args.replay)
        argv_rec = list(manifest.get("argv", []))
        cfg_over = dict(manifest["config"])
        if args.output_dir:
            cfg_over["output_dir"] = args.output_dir
        args = parser.parse_args(argv_rec)
        args.replay = None
        cfg = fileio.resolve_config(None, cfg_over)
    else:
        if args.command is None:
            parser.error("a subcommand is required")
        cfg = fileio.resolve_config(args.config, _overrides(args))
        argv_rec = [a for a in (argv if argv is not None else sys.argv[1:])]
        argv_rec = _strip_global(argv_rec)
    inputs = [getattr(args, "keypoints", None), getattr(args, "data", None)] + list(getattr(args, "cases", []) or [])
    outputs = COMMANDS[args.command](cfg, args)
    out = _out_dir(cfg)
    fileio.write_manifest(
        out / f"manifest.{args.command}.json", args.command, cfg, inputs,
        {"argv": argv_rec, "outputs": {str(p): fileio.file_sha256(p) for p in outputs}, **_checkpoint_record(cfg)},
    )
    return 0


def _checkpoint_record(cfg):
    path = _checkpoint_path(cfg)
    if not path.is_file():
        return {}
    return {"checkpoint_path": str(path), "checkpoint_sha256": fileio.file_sha256(path)}


def _strip_global(argv):
    """Drop global options so a manifest replays only the subcommand and its arguments."""
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a in ("--config", "--set", "--replay", "--output-dir"):
            skip = True
            continue
        if a.split("=", 1)[0] in ("--config", "--set", "--replay", "--output-dir"):
            continue
        out.append(a)
    return out


def main(argv=None):
    try:
        return run(argv)
    except ScoreFitError as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        if getattr(exc, "iteration", None) is not None:
            record["iteration"] = exc.iteration
        if getattr(exc, "indices", None) is not None:
            record["indices"] = [int(i) for i in exc.indices]
        print(json.dumps(record), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
