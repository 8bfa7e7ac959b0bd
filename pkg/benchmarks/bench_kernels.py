"""Time the compiled and pure-Python kinematic kernels on the same inputs.

Usage: python benchmarks/bench_kernels.py [--batch N] [--repeat R]
"""
import argparse
import json
import timeit

import numpy as np

from scorefit import kernels
from scorefit.body_model import make_toy_model
from scorefit.rotation import d_rot6d_to_matrix, random_rotations


def inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    model = make_toy_model(24, 10, seed=seed)
    jm = model.joint_map(np.zeros(model.n_shape))
    R = random_rotations(n * 24, rng).reshape(n, 24, 3, 3)
    D = d_rot6d_to_matrix(rng.normal(size=(n, 24, 6)), flat=False)
    return model, jm, R, D


def bench(name, n, repeat):
    k = kernels.Kernels(name)
    model, jm, R, D = inputs(n)
    Rg, tg = k.chain(jm.parents, jm.rest_joints, R)
    verts = np.broadcast_to(model.template_vertices, (n,) + model.template_vertices.shape)
    calls = {
        "chain": lambda: k.chain(jm.parents, jm.rest_joints, R),
        "regress_joints": lambda: k.regress_joints(Rg, tg, jm.P, jm.s),
        "pose_jacobian": lambda: k.pose_jacobian(jm.parents, Rg, tg, jm.P, jm.s, D),
        "skin": lambda: k.skin(Rg, tg, jm.rest_joints, model.skin_weights, verts),
    }
    return {op: min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3 for op, fn in calls.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--batch", type=int, nargs="+", default=[1, 32, 128])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rows = []
    for n in args.batch:
        times = {name: bench(name, n, args.repeat) for name in sorted(kernels.BACKENDS)}
        for op in times["python"]:
            row = {"batch": n, "op": op, **{f"{b}_ms": round(t[op], 4) for b, t in times.items()}}
            if "compiled" in times:
                row["speedup"] = round(times["python"][op] / times["compiled"][op], 2)
            rows.append(row)
    print(f"{'batch':>5} {'op':<15} " + " ".join(f"{k:>12}" for k in rows[0] if k not in ("batch", "op")))
    for r in rows:
        print(f"{r['batch']:>5} {r['op']:<15} " + " ".join(f"{v:>12}" for k, v in r.items() if k not in ("batch", "op")))
    print(json.dumps({"default_backend": kernels.BACKEND}))


if __name__ == "__main__":
    main()
