"""Command line entry point: ``servotrack {track,servo,bench}``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

log = logging.getLogger("servotrack")


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    import numba

    limit = numba.config.NUMBA_NUM_THREADS
    if n > limit:
        log.warning("only %d threads available (set NUMBA_NUM_THREADS to raise); using %d", limit, limit)
        n = limit
    numba.set_num_threads(max(1, n))


def _config(args):
    from .config import load_config

    return load_config(args.config)


def _particles(text: str) -> list[int]:
    try:
        counts = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected a comma-separated list of integers") from None
    if not counts or min(counts) < 2:
        raise argparse.ArgumentTypeError("particle counts must be >= 2")
    return counts


def cmd_track(args) -> int:
    """Track the hand while the arm follows a smooth seeded joint trajectory."""
    from .camera import project_point
    from .filter import AllWeightsZero
    from .kinematics import forward_kinematics
    from .hog import compute_hog
    from .sim import build_filters, make_world, observe

    cfg = _config(args)
    world = make_world(cfg.world, args.seed, clutter=args.clutter)
    filters = build_filters(world, cfg.filter, args.seed)
    rng = np.random.default_rng([args.seed, 3])
    amplitude = np.radians(rng.uniform(2.0, 5.0, world.arm.n_joints))
    phase = rng.uniform(0, 2 * np.pi, world.arm.n_joints)
    q0 = world.q.copy()
    dt = cfg.servo.dt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images, q = observe(world)
    for f in filters:
        f.initialize(q)

    names = [c.name for c in world.cameras[:2]]
    header = ["step", "true_x", "true_y", "true_z", "fk_error_m"]
    for name in names:
        header += [f"{name}_x", f"{name}_y", f"{name}_z", f"{name}_px_error", f"{name}_ess"]
    rows, particle_rows, descriptor_rows = [], [], []
    for k in range(1, args.steps + 1):
        world.q = q0 + amplitude * (np.sin(2 * np.pi * 0.1 * k * dt + phase) - np.sin(phase))
        world.time += dt
        images, q = observe(world)
        truth = world.end_effector_pose().p
        fk = forward_kinematics(world.arm, q).translation
        row = [k, *truth, np.linalg.norm(fk - truth)]
        for i, f in enumerate(filters):
            cam_images = images[:2] if len(f.cameras) > 1 else [images[i]]
            try:
                ess = f.step(cam_images, q).ess
            except AllWeightsZero:
                ess = float("nan")
            est = f.estimate.p
            P = world.cameras[i].projection()
            a, b = project_point(P, est), project_point(P, truth)
            row += [*est, float(np.hypot(a.u - b.u, a.v - b.v)), ess]
            if args.trace:
                ps = f.particles
                for j in range(len(ps)):
                    particle_rows.append([k, i, j, *ps.positions[j], *ps.rotvecs[j], ps.weights[j]])
        if args.dump_descriptors:
            for i, image in enumerate(images[:2]):
                descriptor_rows.append([k, names[i], *compute_hog(image, cfg.hog)])
        rows.append(row)

    _write_csv(out / "track.csv", header, rows)
    if args.trace:
        _write_csv(out / "particles.csv",
                   ["step", "filter", "particle", "px", "py", "pz", "ox", "oy", "oz", "weight"], particle_rows)
    if args.dump_descriptors:
        _write_csv(out / "descriptors.csv", ["step", "camera", "values..."], descriptor_rows)

    errs = np.array([[r[5 + 5 * i + 3] for i in range(len(filters))] for r in rows])
    fk_err = np.array([r[4] for r in rows])
    half = len(rows) // 2
    print(f"tracked {len(rows)} steps; mean pixel error over the second half: "
          + ", ".join(f"{n} {errs[half:, i].mean():.2f} px" for i, n in enumerate(names[:len(filters)]))
          + f"; kinematics error {1e3 * fk_err.mean():.1f} mm")
    print(f"wrote {out / 'track.csv'}")
    return 0


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def cmd_servo(args) -> int:
    from .sim import emit_report, run_task1, run_task2

    cfg = _config(args)
    scen = cfg.scenarios
    n_trials = args.trials if args.trials is not None else int(scen.get("trials", 10))
    if args.task == 1:
        speeds = args.speeds or scen.get("task1_speeds", [0.005, 0.02])
        results = run_task1(cfg.world, cfg.filter, cfg.servo, speeds=speeds, base_seed=args.seed,
                            n_trials=n_trials, oracle=args.oracle)
    else:
        if args.oracle:
            log.error("task 2 exercises the tracker in clutter; --oracle is not available")
            return 2
        speed = args.speeds[0] if args.speeds else float(scen.get("task2_speed", 0.02))
        results = [run_task2(cfg.world, cfg.filter, cfg.servo, speed=speed, base_seed=args.seed,
                             n_trials=n_trials)]
    emit_report(results, args.out, world_cfg=cfg.world, plots=not args.no_plots)
    for r in results:
        print(r.summary())
    print(f"wrote {Path(args.out) / 'trials.csv'}")
    return 0


def cmd_bench(args) -> int:
    from .bench import format_bench, run_bench

    cfg = _config(args)
    rows = run_bench(cfg, args.particles, repeats=args.repeats, seed=args.seed)
    print(format_bench(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        keys = list(rows[0])
        _write_csv(out / "bench.csv", keys, [[r[k] for k in keys] for r in rows])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="servotrack", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="YAML config (default: packaged default.yaml)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--threads", type=int, help="worker threads for the particle kernels")

    t = sub.add_parser("track", help="run the tracker on a moving arm and report its error")
    common(t, "out/track")
    t.add_argument("--steps", type=int, default=30)
    t.add_argument("--clutter", action="store_true", default=None, help="add clutter and background")
    t.add_argument("--trace", action="store_true", help="dump particle poses and weights per step")
    t.add_argument("--dump-descriptors", action="store_true", help="dump camera HOG descriptors per step")
    t.set_defaults(func=cmd_track)

    s = sub.add_parser("servo", help="run the reaching scenarios")
    common(s, "out/servo")
    s.add_argument("--task", type=int, choices=(1, 2), required=True)
    s.add_argument("--trials", type=int)
    s.add_argument("--speeds", type=lambda x: [float(v) for v in x.split(",")],
                   help="comma-separated speed caps in m/s")
    s.add_argument("--oracle", action="store_true", help="servo on the true pose instead of the tracker")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_servo)

    b = sub.add_parser("bench", help="per-stage timing of one filter step")
    common(b, None)
    b.add_argument("--particles", type=_particles, default=[100])
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    warnings.filterwarnings("ignore", message=".*TBB.*")  # numba falls back to another threading layer
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
