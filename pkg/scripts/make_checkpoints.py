"""Regenerate the checkpoints shipped in ``scorefit/data``.

    python scripts/make_checkpoints.py toy [--iterations N] [--lr LR]
    python scripts/make_checkpoints.py gaussian [--iterations N] [--lr LR]

Both runs are deterministic given their seeds; each writes the EMA
checkpoint and the loss trace CSV next to it.
"""
import argparse
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from scorefit.denoiser import checkpoint_save
from scorefit.diffusion import cosine_schedule
from scorefit.synthetic import SyntheticWorld
from scorefit.training import TrainConfig, train, write_loss_csv

DATA = Path(__file__).resolve().parents[1] / "src" / "scorefit" / "data"

GAUSSIAN = {"seed": 7, "mean_scale": 0.5, "std": 0.3, "n_samples": 50000, "feature_dim": 32}


def gaussian_mean(spec=GAUSSIAN):
    return np.random.default_rng(spec["seed"]).normal(0.0, spec["mean_scale"], 144)


def gaussian_dataset(spec=GAUSSIAN):
    rng = np.random.default_rng([spec["seed"], 1])
    x0 = gaussian_mean(spec) + spec["std"] * rng.standard_normal((spec["n_samples"], 144))
    return np.zeros((spec["n_samples"], spec["feature_dim"])), x0


def log(i, loss):
    if i % 1000 == 0:
        print(f"{i:6d} {loss:.4f}", flush=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("which", choices=["toy", "gaussian"])
    ap.add_argument("--iterations", type=int, default=20000)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--out", type=Path, default=DATA)
    args = ap.parse_args()
    sched = cosine_schedule()
    cfg = TrainConfig(learning_rate=args.lr, iterations=args.iterations)
    if args.which == "toy":
        world = SyntheticWorld(0)
        data = world.training_pairs(50000, seed=0)
        meta = {"world": world.describe(), "dataset": "synthetic:50000"}
        name = "toy_pose"
    else:
        data = gaussian_dataset()
        meta = {"gaussian": {**GAUSSIAN, "mean": gaussian_mean().tolist()}, "dataset": "gaussian"}
        name = "gaussian_fit"
    t0 = time.perf_counter()
    _, ema, trace = train(cfg, data, sched, callback=log)
    meta["train_seconds"] = round(time.perf_counter() - t0, 1)
    meta["train_overrides"] = {k: v for k, v in asdict(cfg).items() if v != getattr(TrainConfig(), k)}
    args.out.mkdir(parents=True, exist_ok=True)
    checkpoint_save(ema, args.out / f"{name}.npz", meta)
    write_loss_csv(trace, args.out / f"{name}_loss.csv")
    print(f"wrote {args.out / (name + '.npz')}")


if __name__ == "__main__":
    main()
