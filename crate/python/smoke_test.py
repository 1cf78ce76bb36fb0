#!/usr/bin/env python3
"""Smoke test for the mcvd_py extension module.

Builds the cdylib with cargo if needed, loads it, and exercises the main
types and operations end to end (schedule math, masking, embeddings, data
generation, container I/O, metrics, and checkpoint sampling when a
checkpoint path is supplied).

Usage:
    python3 python/smoke_test.py [--checkpoint PATH] [--release]
"""

import argparse
import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build_and_import(release: bool):
    profile = "release" if release else "debug"
    lib = os.path.join(ROOT, "target", profile, "libmcvd_py.so")
    if not os.path.exists(lib):
        cmd = ["cargo", "build", "-p", "mcvd-py"]
        if release:
            cmd.append("--release")
        subprocess.run(cmd, cwd=ROOT, check=True)
    staging = os.path.join(ROOT, "target", profile, "pymod")
    os.makedirs(staging, exist_ok=True)
    target = os.path.join(staging, "mcvd_py.so")
    if not os.path.exists(target) or os.path.getmtime(lib) > os.path.getmtime(target):
        shutil.copyfile(lib, target)
    sys.path.insert(0, staging)
    import mcvd_py

    return mcvd_py


def approx(a, b, tol=1e-9):
    assert abs(a - b) <= tol, f"{a} vs {b} (tol {tol})"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", help="optional .ckpt to sample from")
    ap.add_argument("--release", action="store_true", help="build in release mode")
    args = ap.parse_args()

    m = build_and_import(args.release)

    # Schedule math.
    sched = m.NoiseSchedule(1000, 1e-4, 0.02)
    assert sched.num_steps() == 1000
    assert sched.alpha_bar(0) == 1.0
    prod = 1.0
    for b in sched.betas():
        prod *= 1.0 - b
    assert abs(sched.alpha_bar(1000) - prod) / prod < 1e-12
    c0, ct, var = sched.posterior_params(1)
    approx(c0, 1.0, 1e-12)
    approx(var, 0.0)
    x0 = [0.2, -0.7, 1.3]
    eps = [0.5, 0.1, -0.9]
    xt = sched.q_sample(x0, 400, eps)
    back = sched.predict_x0_from_eps(xt, eps, 400)
    for a, b in zip(back, x0):
        approx(a, b, 1e-9)
    score = sched.score_from_eps([1.0], 400)[0]
    approx(score, -1.0 / math.sqrt(1.0 - sched.alpha_bar(400)), 1e-12)
    print("ok   schedule")

    # Masking.
    assert m.sample_masks(0.0, 1) == (True, True)
    assert m.sample_masks(1.0, 1) == (False, False)
    assert m.task_of_masks(True, False) == "predict"
    assert m.task_of_masks(False, True) == "retrodict"
    assert m.task_of_masks(False, False) == "generate"
    assert m.task_of_masks(True, True) == "interpolate"
    print("ok   masking")

    # Noise embedding: interleaved cos/sin, squared norm D/2.
    e = m.noise_embedding(1.0, 4)
    approx(e[0], math.cos(0.01), 1e-12)
    approx(e[1], math.sin(0.01), 1e-12)
    approx(sum(v * v for v in m.noise_embedding(0.37, 128)), 64.0, 1e-9)
    print("ok   embedding")

    # Data generation + container round trip.
    shape, data = m.moving_shapes_video(video_len=6, seed=3)
    assert shape == (6, 16, 16, 1)
    assert all(0.0 <= v <= 1.0 for v in data)
    shape2, data2 = m.moving_shapes_video(video_len=6, seed=3)
    assert data == data2, "generation must be deterministic"
    with tempfile.TemporaryDirectory() as td:
        p = os.path.join(td, "v.vid")
        m.write_video(p, shape, data)
        rshape, rdata = m.read_video(p)
        assert rshape == shape and rdata == data
    print("ok   data io")

    # Metrics.
    approx(m.psnr(shape, data, data), 99.0)
    ones = [1.0] * len(data)
    zeros = [0.0] * len(data)
    approx(m.psnr(shape, zeros, ones), 0.0, 1e-9)
    approx(m.ssim(shape, data, data), 1.0)
    print("ok   metrics")

    # Config canonicalization.
    text = m.canonical_config("train.p_mask = 0.25\n")
    assert "train.p_mask = 0.25" in text
    print("ok   config")

    # Built-in invariant suites (includes a tiny-network gradient check).
    failures = [(n, e) for n, e in m.selftest() if e is not None]
    assert not failures, failures
    print("ok   selftest")

    if args.checkpoint:
        ck = m.Checkpoint.load(args.checkpoint)
        print(f"checkpoint: step {ck.step}, tasks {ck.supported_tasks()}")
        cfg = dict(
            line.split(" = ", 1)
            for line in ck.config_text.strip().splitlines()
            if " = " in line
        )
        task = ck.supported_tasks()[0]
        kwargs = {}
        if task != "generate":
            window = int(cfg["layout.past"]) + int(cfg["layout.current"]) + int(
                cfg["layout.future"]
            )
            kwargs["context"] = m.moving_shapes_video(
                height=int(cfg["layout.height"]),
                width=int(cfg["layout.width"]),
                channels=int(cfg["layout.channels"]),
                shape_size=int(cfg["data.shape_size"]),
                video_len=max(window, 2),
                seed=1,
            )
        steps = min(25, int(cfg["schedule.steps"]))
        shape, frames = ck.sample(task, steps=steps, sampler="ddim", seed=0, **kwargs)
        assert all(0.0 <= v <= 1.0 for v in frames)
        print(f"ok   sampling ({task}: {shape[0]} frames)")

    print("smoke test passed")


if __name__ == "__main__":
    main()
