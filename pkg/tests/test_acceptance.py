"""Acceptance suite: one pass/fail line per criterion, printed at the end of the run.

The closed-loop criteria drive the installed ``servotrack`` command in
subprocesses, so they exercise the same path a user does. Task 1 runs twice
(one thread, then three) and the determinism criterion compares the two
``trials.csv`` files byte for byte; the other Task 1 criteria read the
single-thread run.
"""
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from servotrack.bench import bench_stages
from servotrack.camera import image_jacobian, project_point, projection_matrix, stereo_feature
from servotrack.config import with_filter
from servotrack.filter import (
    ParticleSet,
    effective_sample_size,
    likelihood,
    reweight,
    stream,
    systematic_resample,
)
from servotrack.hog import compute_hog
from servotrack.kinematics import forward_kinematics
from servotrack.sim import read_report

from oracles import naive_hog
from test_camera import random_camera, random_stereo
from test_kinematics import chain_oracle, random_chain

pytestmark = pytest.mark.slow

SEED = 7
LINES: dict[int, str] = {}


def record(n: int, ok: bool, text: str) -> None:
    LINES[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text}"
    assert ok, LINES[n]


def servo_cli(out, task, threads, extra=()):
    env = dict(os.environ, NUMBA_NUM_THREADS=str(threads))
    cmd = [sys.executable, "-m", "servotrack.cli", "servo", "--task", str(task), "--seed", str(SEED),
           "--out", str(out), "--threads", str(threads), "--no-plots", *extra]
    t0 = time.perf_counter()
    subprocess.run(cmd, env=env, check=True, capture_output=True)
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def task1(tmp_path_factory):
    root = tmp_path_factory.mktemp("task1")
    elapsed = servo_cli(root / "one", 1, threads=1)
    return root, elapsed


@pytest.fixture(scope="module")
def task2(tmp_path_factory):
    root = tmp_path_factory.mktemp("task2")
    servo_cli(root, 2, threads=1)
    return read_report(root)


def test_1_task1_convergence(task1):
    root, elapsed = task1
    report = read_report(root / "one")
    parts, ok = [], elapsed < 300.0
    for name, entry in report.items():
        agg = entry["aggregate"]
        good = all(t["final_error_px"] < 1.0 and t["iterations"] <= 500 for t in entry["trials"] if t["converged"])
        ok &= good and agg["converged"] >= 9
        parts.append(f"{name}: {agg['status']} converged, |e| = {agg['final_error_px']:.3f} +- "
                     f"{agg['std_error_px']:.3f} px")
    record(1, ok, "; ".join(parts) + f" (need >= 9/10 each); both speeds in {elapsed:.0f} s (need < 300 s)")


def test_2_kinematic_error_compensation(task1):
    root, _ = task1
    parts, ok = [], True
    for name, entry in read_report(root / "one").items():
        est = np.array([t["estimate_error_m"] for t in entry["trials"]])
        fk = np.array([t["kinematics_error_m"] for t in entry["trials"]])
        wins = int(np.sum(est < fk))
        improvement = float(np.median(1.0 - est / fk))
        ok &= wins >= 9 and improvement >= 0.5
        parts.append(f"{name}: estimate beats kinematics in {wins}/{len(est)}, median improvement "
                     f"{100 * improvement:.0f}%")
    record(2, ok, "; ".join(parts) + " (need >= 9/10 and >= 50%)")


def test_3_clutter_robustness(task2):
    ((name, entry),) = task2.items()
    trials = entry["trials"]
    failures = [t for t in trials if not t["converged"]]
    surfaced = all(t["status"] in ("max_iters", "diverged", "lost", "singular") for t in failures)
    sub_pixel = all(t["final_error_px"] < 1.0 for t in trials if t["converged"])
    n_ok = sum(t["converged"] for t in trials)
    statuses = ",".join(sorted({t["status"] for t in failures})) or "none"
    record(3, n_ok >= 8 and surfaced and sub_pixel,
           f"{name}: {n_ok}/{len(trials)} converged sub-pixel (need >= 8/10); failures reported as: {statuses}")


def test_4_filter_properties():
    rng = np.random.default_rng(0)
    worst_norm = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 300))
        ps = ParticleSet(np.zeros((n, 3)), np.zeros((n, 3)), rng.dirichlet(np.ones(n)), np.arange(n))
        ps = reweight(ps, -rng.uniform(0, 30, n))
        worst_norm = max(worst_norm, abs(ps.weights.sum() - 1))
        ps = systematic_resample(ps, rng)
        worst_norm = max(worst_norm, abs(ps.weights.sum() - 1))

    ess_ok = True
    for _ in range(200):
        n = int(rng.integers(1, 200))
        w = rng.dirichlet(np.full(n, rng.uniform(0.05, 5)))
        ess = effective_sample_size(ParticleSet(np.zeros((n, 3)), np.zeros((n, 3)), w, np.arange(n)))
        ess_ok &= 1 - 1e-12 <= ess <= n * (1 + 1e-12)
        uniform = ParticleSet(np.zeros((n, 3)), np.zeros((n, 3)), np.full(n, 1 / n), np.arange(n))
        ess_ok &= abs(effective_sample_size(uniform) - n) <= 1e-9 * n

    w = rng.dirichlet(np.ones(10))
    src = ParticleSet(np.zeros((10, 3)), np.zeros((10, 3)), w, np.arange(10))
    counts = np.array([np.bincount(systematic_resample(src, stream(3, k, 1)).ids, minlength=10)
                       for k in range(10_000)])
    se = counts.std(axis=0, ddof=1) / math.sqrt(len(counts))
    z = float(np.max(np.abs(counts.mean(axis=0) - 10 * w) / np.maximum(se, 1e-300)))

    y = rng.random(50)
    sigma = 0.37
    lik = [likelihood(y, y, sigma), likelihood(y, y + np.r_[sigma, np.zeros(49)], sigma),
           likelihood(y, y + np.r_[sigma * math.log(2), np.zeros(49)], sigma)]
    lik_err = max(abs(lik[0] - 1), abs(lik[1] - math.exp(-1)), abs(lik[2] - 0.5))

    ok = worst_norm < 1e-12 and ess_ok and z <= 3 and lik_err < 1e-12
    record(4, ok, f"max |sum w - 1| = {worst_norm:.1e} (< 1e-12); ESS bounds and uniform equality "
                  f"{'hold' if ess_ok else 'violated'}; resampling max |bias|/SE = {z:.2f} over 1e4 (<= 3); "
                  f"likelihood examples max error {lik_err:.1e} (< 1e-12)")


def test_5_geometry_oracles():
    rng = np.random.default_rng(1)
    h = 1e-6
    jac = 0.0
    for _ in range(100):
        Pi_l, Pi_r, p = random_stereo(rng)
        J = image_jacobian(p, Pi_l, Pi_r)
        fd = np.column_stack([
            (stereo_feature(p + h * e, Pi_l, Pi_r).vector - stereo_feature(p - h * e, Pi_l, Pi_r).vector) / (2 * h)
            for e in np.eye(3)])
        jac = max(jac, np.abs(J - fd).max() / np.abs(J).max())

    fk = 0.0
    for _ in range(100):
        chain = random_chain(rng, int(rng.integers(1, 7)))
        q = rng.uniform(-np.pi, np.pi, chain.n_joints)
        fk = max(fk, np.abs(forward_kinematics(chain, q).matrix - chain_oracle(chain, q)).max())

    scale = 0.0
    for _ in range(100):
        K, H = random_camera(rng)
        Pi = projection_matrix(K, H)
        X = np.append(H.inverse().apply([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(0.3, 2)]), 1)
        a, b = project_point(Pi, X), project_point(Pi, rng.uniform(0.1, 10) * X)
        scale = max(scale, abs(a.u - b.u), abs(a.v - b.v))

    record(5, jac < 1e-6 and fk < 1e-12 and scale < 1e-12,
           f"Jacobian vs central differences max rel. error {jac:.1e} (< 1e-6); FK vs matrix-product oracle "
           f"{fk:.1e} (< 1e-12); projection scale invariance {scale:.1e} px (< 1e-12)")


def test_6_hog_oracle():
    rng = np.random.default_rng(2)
    worst = max(np.abs(compute_hog(I) - naive_hog(I)).max() for I in rng.random((20, 64, 64)))
    exact = True
    for _ in range(20):
        I = rng.integers(0, 128, (64, 64)) / 256.0
        exact &= np.array_equal(compute_hog(I + rng.integers(1, 128) / 256.0), compute_hog(I))
    record(6, worst < 1e-10 and exact,
           f"optimized vs naive max difference {worst:.1e} on 20 images (< 1e-10); additive invariance "
           f"{'exact' if exact else 'NOT exact'}")


def test_7_determinism(task1):
    root, _ = task1
    servo_cli(root / "three", 1, threads=3)
    a = (root / "one" / "trials.csv").read_bytes()
    b = (root / "three" / "trials.csv").read_bytes()
    record(7, a == b and len(a) > 0,
           f"servo --task 1 --seed {SEED}: trials.csv with 1 and 3 threads "
           f"{'byte-identical' if a == b else 'DIFFER'} ({len(a)} bytes)")


def test_8_performance(cfg):
    # force a resample on every step so the timed cycle includes all five stages
    t = bench_stages(with_filter(cfg, n_threshold=cfg.filter.n_particles), 100, repeats=5)
    stages = ", ".join(f"{k} {1e3 * v:.1f}" for k, v in t.items())
    record(8, t["full_step"] < 0.5,
           f"full step, 100 particles x 2 cameras: {1e3 * t['full_step']:.0f} ms (< 500 ms); stages [ms]: {stages}")
