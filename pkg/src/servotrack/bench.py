"""Per-stage timing of one filter cycle on the default scene."""
from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from .filter import (
    ParticleFilter,
    effective_sample_size,
    from_pose,
    particle_distances,
    predict,
    reweight,
    stream,
    systematic_resample,
)
from .hog import compute_hog, descriptor_distance
from .kinematics import forward_kinematics, pose_from_transform, relative_motion
from .renderer import render
from .sim import make_world, observe

STAGES = ("predict", "render", "hog", "weight", "resample", "fused_distances", "full_step")


def _median_time(fn, repeats: int) -> float:
    fn()  # warm-up (compilation, caches)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_stages(cfg, n_particles: int, repeats: int = 5, seed: int = 0) -> dict[str, float]:
    """Median seconds per stage for ``n_particles``, summed over the two cameras.

    ``render`` and ``hog`` run the stages one particle at a time from Python;
    ``fused_distances`` is the parallel kernel the filter actually uses for
    render + HOG + distance. ``full_step`` runs the per-camera filters (or the
    fused one) through a complete cycle.
    """
    fcfg = replace(cfg.filter, n_particles=n_particles, n_threshold=min(cfg.filter.n_threshold, n_particles))
    world = make_world(cfg.world, seed)
    images, q = observe(world)
    cams = world.cameras[:2]
    pose = pose_from_transform(forward_kinematics(world.arm, q))
    ps = from_pose(pose, n_particles, seed)
    delta = relative_motion(world.arm, q, q + 0.002)
    ys = [compute_hog(im, fcfg.hog) for im in images[:2]]
    ps = predict(ps, delta, fcfg.noise)

    def renders():
        return [[render(world.scene, p.state, (c.intrinsics, c.extrinsic())) for p in ps.particles] for c in cams]

    rendered = renders()

    def hogs():
        return [[compute_hog(im, fcfg.hog) for im in per_cam] for per_cam in rendered]

    descs = hogs()

    def weight():
        ll = np.zeros(len(ps))
        for y, per_cam in zip(ys, descs):
            ll -= np.array([descriptor_distance(y, d) for d in per_cam]) / sigma
        return reweight(ps, ll)

    sigma = float(np.sum(ys[0]))  # any workable scale; only the arithmetic is timed
    weighted = weight()
    # a degenerate weight vector so resampling does real work
    skewed = weighted.copy(weights=np.r_[0.9, np.full(len(ps) - 1, 0.1 / (len(ps) - 1))])

    filters = [ParticleFilter(world.arm, [c], world.scene, fcfg, seed=seed + k) for k, c in enumerate(cams)]
    if fcfg.fused:
        filters = [ParticleFilter(world.arm, cams, world.scene, fcfg, seed=seed)]
    for f in filters:
        f.initialize(q)
    state = {"q": q.copy()}

    def full_step():
        state["q"] = state["q"] + 0.001
        for k, f in enumerate(filters):
            f.step(images[:2] if len(f.cameras) > 1 else [images[k]], state["q"])

    return {
        "predict": _median_time(lambda: predict(ps, delta, fcfg.noise), repeats) * len(cams),
        "render": _median_time(renders, repeats),
        "hog": _median_time(hogs, repeats),
        "weight": _median_time(weight, repeats),
        "resample": _median_time(lambda: (effective_sample_size(skewed),
                                          systematic_resample(skewed, stream(seed, 1, 1))), repeats) * len(cams),
        "fused_distances": _median_time(
            lambda: [particle_distances(ps, world.scene, c, y, fcfg.hog) for c, y in zip(cams, ys)], repeats),
        "full_step": _median_time(full_step, repeats),
    }


def run_bench(cfg, particle_counts, repeats: int = 5, seed: int = 0) -> list[dict]:
    rows = []
    for n in particle_counts:
        row = {"particles": int(n)}
        row.update(bench_stages(cfg, int(n), repeats, seed))
        rows.append(row)
    return rows


def format_bench(rows) -> str:
    header = f"{'particles':>9} " + " ".join(f"{s:>15}" for s in STAGES)
    lines = [header, "  (milliseconds, both cameras)"]
    for r in rows:
        lines.append(f"{r['particles']:>9} " + " ".join(f"{1e3 * r[s]:>15.2f}" for s in STAGES))
    return "\n".join(lines)
