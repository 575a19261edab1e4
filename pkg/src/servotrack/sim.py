"""Simulated robot: biased arm encoders, stereo rig, clutter, and scenarios.

The world renders camera images from the *true* joint angles and reports
``true + bias`` to everything downstream. The tracker and the controller only
ever see :func:`observe` output and the camera models.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import CameraModel, triangulate
from .filter import FilterConfig, ParticleFilter
from .kinematics import (
    DHChain,
    Pose,
    Transform,
    dls_step,
    forward_kinematics,
    pose_from_transform,
    solve_position_ik,
    transform_from_pose,
)
from .mesh import convex_hull_mesh
from .renderer import PackedMesh, Scene, ScenePart, pack_parts, render_objects
from .servo import NotConverged, ServoConfig, ServoResult, servo_loop

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EncoderBias:
    offsets: np.ndarray  # rad
    drift: np.ndarray | None = None  # rad/s

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=float).reshape(-1)
        drift = np.zeros_like(offsets) if self.drift is None else np.asarray(self.drift, dtype=float).reshape(-1)
        if drift.shape != offsets.shape:
            raise ValueError("drift needs one rate per joint")
        if not (np.all(np.isfinite(offsets)) and np.all(np.isfinite(drift))):
            raise ValueError("bias must be finite")
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "drift", drift)

    def at(self, t: float) -> np.ndarray:
        return self.offsets + self.drift * t


@dataclass(frozen=True)
class ClutterConfig:
    enabled: bool = False
    count: tuple[int, int] = (5, 15)
    region_center: tuple[float, float, float] = (0.0, 0.0, -0.08)  # relative to the target point
    region_size: tuple[float, float, float] = (0.30, 0.40, 0.0)
    object_size: tuple[float, float] = (0.02, 0.06)
    albedo: tuple[float, float] = (0.2, 1.0)
    background: bool = False  # low-frequency intensity field behind everything
    background_amplitude: float = 0.3
    background_grid: tuple[int, int] = (6, 8)


@dataclass(frozen=True, eq=False)
class WorldConfig:
    arm: DHChain
    home_q: np.ndarray
    bias: EncoderBias
    cameras: tuple[CameraModel, ...]
    scene: Scene
    goal: np.ndarray  # stereo feature (u_l, u_r, v_l) of the target
    pixel_noise: float = 0.0
    clutter: ClutterConfig = field(default_factory=ClutterConfig)
    coarse_target_sigma: float = 0.01  # m, stand-in for the coarse 3-D target localization
    start_radius: float = 0.03  # m, spread of the trial starting points around the coarse target


@dataclass(eq=False)
class World:
    arm: DHChain
    q: np.ndarray  # true joint angles
    bias: EncoderBias
    cameras: list[CameraModel]
    scene: Scene
    clutter: list[tuple[PackedMesh, Transform]]
    target_point: np.ndarray
    rng_seed: int = 0
    pixel_noise: float = 0.0
    backgrounds: list[np.ndarray] | None = None
    time: float = 0.0
    frame: int = 0

    def reported_q(self) -> np.ndarray:
        return self.q + self.bias.at(self.time)

    def end_effector_pose(self) -> Pose:
        return pose_from_transform(forward_kinematics(self.arm, self.q))

    def command(self, dp, dt: float, damping: float = 0.01) -> None:
        """Move the end-effector by ``dp`` as the robot believes it is: IK on the reported angles."""
        dq = dls_step(self.arm, self.reported_q(), dp, damping)
        self.q = self.q + dq
        self.time += dt

    def clone(self) -> "World":
        return replace(self, q=self.q.copy(), cameras=list(self.cameras), clutter=list(self.clutter))


def observe(world: World):
    """Camera images of the true arm, plus the biased joint readings."""
    hand = world.scene.packed
    placement = transform_from_pose(world.end_effector_pose())
    objects = [(hand, placement), *world.clutter]
    rng = np.random.default_rng([world.rng_seed, world.frame, 7]) if world.pixel_noise > 0 else None
    images = []
    for k, cam in enumerate(world.cameras):
        bg = None if world.backgrounds is None else world.backgrounds[k]
        image = render_objects(objects, (cam.intrinsics, cam.extrinsic()), world.scene.light_dir,
                               world.scene.ambient, background=bg)
        if rng is not None:
            image = np.clip(image + world.pixel_noise * rng.standard_normal(image.shape), 0.0, 1.0)
        images.append(image)
    world.frame += 1
    return images, world.reported_q()


# --- world construction ---------------------------------------------------------------

def target_from_goal(cfg: WorldConfig) -> np.ndarray:
    return triangulate(cfg.goal, cfg.cameras[0].projection(), cfg.cameras[1].projection())


def _random_rotation(rng) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def make_clutter(cfg: ClutterConfig, target: np.ndarray, rng) -> list[tuple[PackedMesh, Transform]]:
    lo, hi = cfg.count
    n = int(rng.integers(lo, hi + 1))
    center = target + np.asarray(cfg.region_center)
    half = np.asarray(cfg.region_size) / 2
    objects = []
    for _ in range(n):
        size = rng.uniform(*cfg.object_size)
        pts = rng.standard_normal((12, 3))
        pts = pts / np.linalg.norm(pts, axis=1, keepdims=True) * (size / 2) * rng.uniform(0.6, 1.0, (12, 1))
        mesh = convex_hull_mesh(pts)
        part = ScenePart("clutter", mesh, albedo=float(rng.uniform(*cfg.albedo)))
        where = center + rng.uniform(-1, 1, 3) * half
        objects.append((pack_parts([part]), Transform(_random_rotation(rng), where)))
    return objects


def make_background(cfg: ClutterConfig, height: int, width: int, rng) -> np.ndarray:
    gy, gx = cfg.background_grid
    coarse = rng.uniform(0.0, cfg.background_amplitude, (gy + 1, gx + 1))
    ys = np.linspace(0, gy, height)
    xs = np.linspace(0, gx, width)
    y0 = np.minimum(ys.astype(int), gy - 1)
    x0 = np.minimum(xs.astype(int), gx - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def trial_seed(base_seed: int, trial: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([base_seed, trial, stream]).generate_state(1)[0])


def make_world(cfg: WorldConfig, seed: int, clutter: bool | None = None) -> World:
    """Place the arm at a seeded starting point after the open-loop approach.

    The robot aims for a noisy estimate of the target (plus a seeded offset
    standing in for varied starting points) using its *reported* kinematics,
    so the true hand ends up displaced by the encoder bias as well.
    """
    rng = np.random.default_rng([seed, 1])
    target = target_from_goal(cfg)
    coarse = target + cfg.coarse_target_sigma * rng.standard_normal(3)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    start = coarse + cfg.start_radius * direction
    bias0 = cfg.bias.at(0.0)
    q_reported = solve_position_ik(cfg.arm, cfg.home_q + bias0, start)
    q_true = q_reported - bias0

    use_clutter = cfg.clutter.enabled if clutter is None else clutter
    objects, backgrounds = [], None
    if use_clutter:
        crng = np.random.default_rng([seed, 2])
        objects = make_clutter(cfg.clutter, target, crng)
        if cfg.clutter.background:
            backgrounds = [make_background(cfg.clutter, c.intrinsics.height, c.intrinsics.width, crng)
                           for c in cfg.cameras]
    return World(
        arm=cfg.arm, q=q_true, bias=cfg.bias, cameras=list(cfg.cameras), scene=cfg.scene,
        clutter=objects, target_point=target, rng_seed=seed,
        pixel_noise=cfg.pixel_noise if use_clutter else 0.0, backgrounds=backgrounds,
    )


# --- scenarios ----------------------------------------------------------------------

@dataclass(eq=False)
class TrialResult:
    trial: int
    seed: int
    speed: float
    status: str
    converged: bool
    iterations: int
    final_error_px: float
    final_true_error_px: float
    estimate_error_m: float  # stereo estimate vs true end-effector position
    kinematics_error_m: float  # direct kinematics of the reported angles vs truth
    collapses: int
    wall_clock: float
    servo: ServoResult | None = None


@dataclass(eq=False)
class ScenarioResult:
    name: str
    trials: list[TrialResult]

    @property
    def successes(self) -> int:
        return sum(t.converged for t in self.trials)

    @property
    def final_errors(self) -> np.ndarray:
        return np.array([t.final_error_px for t in self.trials])

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.final_errors)) if self.trials else float("nan")

    @property
    def std_error(self) -> float:
        return float(np.std(self.final_errors)) if self.trials else float("nan")

    def summary(self) -> str:
        return (f"{self.name}: {self.successes}/{len(self.trials)} converged, "
                f"final |e| = {self.mean_error:.3f} +- {self.std_error:.3f} px")


def build_filters(world: World, fcfg: FilterConfig, seed: int) -> list[ParticleFilter]:
    cams = world.cameras[:2]
    if fcfg.fused:
        return [ParticleFilter(world.arm, cams, world.scene, fcfg, seed=trial_seed(seed, 0, 1))]
    return [ParticleFilter(world.arm, [cam], world.scene, fcfg, seed=trial_seed(seed, 0, k + 2))
            for k, cam in enumerate(cams)]


def run_trial(wcfg: WorldConfig, fcfg: FilterConfig, scfg: ServoConfig, seed: int, trial: int = 0,
              clutter: bool | None = None, oracle: bool = False) -> TrialResult:
    t0 = time.perf_counter()
    world = make_world(wcfg, seed, clutter=clutter)
    filters = None if oracle else build_filters(world, fcfg, seed)
    try:
        result = servo_loop(world, filters, wcfg.goal, scfg)
    except NotConverged as exc:
        result = exc.result
    truth = forward_kinematics(world.arm, world.q).translation
    fk = forward_kinematics(world.arm, world.reported_q()).translation
    return TrialResult(
        trial=trial, seed=seed, speed=scfg.max_speed, status=result.status, converged=result.converged,
        iterations=result.iterations, final_error_px=result.final_error_px,
        final_true_error_px=result.final_true_error_px,
        estimate_error_m=float(np.linalg.norm(result.estimate_position - truth)),
        kinematics_error_m=float(np.linalg.norm(fk - truth)),
        collapses=result.collapses, wall_clock=time.perf_counter() - t0, servo=result,
    )


def _run_trials(name, wcfg, fcfg, scfg, base_seed, n_trials, clutter, oracle) -> ScenarioResult:
    trials = []
    for k in range(n_trials):
        seed = trial_seed(base_seed, k)
        res = run_trial(wcfg, fcfg, scfg, seed, trial=k, clutter=clutter, oracle=oracle)
        log.info("%s trial %d: %s after %d iterations, |e| = %.3f px (true %.3f px)", name, k, res.status,
                 res.iterations, res.final_error_px, res.final_true_error_px)
        trials.append(res)
    return ScenarioResult(name, trials)


def run_task1(wcfg: WorldConfig, fcfg: FilterConfig, scfg: ServoConfig, speeds=(0.005, 0.02),
              base_seed: int = 0, n_trials: int = 10, oracle: bool = False) -> list[ScenarioResult]:
    """Reach the goal feature from ``n_trials`` seeded starts at each speed cap, no clutter."""
    return [
        _run_trials(f"task1 v={v:g}", wcfg, fcfg, replace(scfg, max_speed=v), base_seed, n_trials,
                    clutter=False, oracle=oracle)
        for v in speeds
    ]


def run_task2(wcfg: WorldConfig, fcfg: FilterConfig, scfg: ServoConfig, speed: float = 0.02,
              base_seed: int = 0, n_trials: int = 10, clutter: bool = True) -> ScenarioResult:
    """Task 1 at one speed cap with clutter, background texture and pixel noise."""
    return _run_trials(f"task2 v={speed:g}", wcfg, fcfg, replace(scfg, max_speed=speed), base_seed,
                       n_trials, clutter=clutter, oracle=False)


# --- reporting ----------------------------------------------------------------------

TRIAL_FIELDS = ("scenario", "trial", "seed", "speed", "status", "converged", "iterations",
                "final_error_px", "std_error_px", "final_true_error_px", "estimate_error_m",
                "kinematics_error_m", "collapses")
AGGREGATE = "aggregate"


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _slug(name: str) -> str:
    return name.replace(" ", "_").replace("=", "")


def trial_rows(result: ScenarioResult) -> list[dict]:
    rows = []
    for t in result.trials:
        rows.append({
            "scenario": result.name, "trial": t.trial, "seed": t.seed, "speed": t.speed,
            "status": t.status, "converged": t.converged, "iterations": t.iterations,
            "final_error_px": t.final_error_px, "std_error_px": "",
            "final_true_error_px": t.final_true_error_px, "estimate_error_m": t.estimate_error_m,
            "kinematics_error_m": t.kinematics_error_m, "collapses": t.collapses,
        })
    if result.trials:
        rows.append({
            "scenario": result.name, "trial": AGGREGATE, "seed": "", "speed": result.trials[0].speed,
            "status": f"{result.successes}/{len(result.trials)}", "converged": result.successes,
            "iterations": sum(t.iterations for t in result.trials),
            "final_error_px": result.mean_error, "std_error_px": result.std_error,
            "final_true_error_px": float(np.mean([t.final_true_error_px for t in result.trials])),
            "estimate_error_m": float(np.median([t.estimate_error_m for t in result.trials])),
            "kinematics_error_m": float(np.median([t.kinematics_error_m for t in result.trials])),
            "collapses": sum(t.collapses for t in result.trials),
        })
    return rows


def trace_rows(servo: ServoResult) -> tuple[list[str], list[list]]:
    n_est = len(servo.trace[0].estimates) if servo.trace else 0
    header = ["iteration", "e_ul", "e_ur", "e_vl", "e_norm", "true_e_ul", "true_e_ur", "true_e_vl",
              "true_e_norm"]
    for k in range(n_est):
        header += [f"est{k}_{c}" for c in ("px", "py", "pz", "ox", "oy", "oz")]
    header += ["vx", "vy", "vz", "ess", "evidence", "collapsed"]
    rows = []
    for r in servo.trace:
        row = [r.iteration, *r.error, np.linalg.norm(r.error), *r.true_error, np.linalg.norm(r.true_error)]
        for est in r.estimates:
            row += [*est.p, *est.o]
        row += [*r.velocity, ";".join(_fmt(x) for x in r.ess), ";".join(_fmt(x) for x in r.evidence), r.collapsed]
        rows.append(row)
    return header, rows


def _plot_trajectories(results: list[ScenarioResult], world_cfg: WorldConfig | None, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cams = (("left", 0), ("right", 1))
    for name, k in cams:
        fig, ax = plt.subplots(figsize=(6.4, 4.8))
        for res in results:
            for t in res.trials:
                if t.servo is None or not t.servo.trace:
                    continue
                e = np.array([r.error for r in t.servo.trace])
                te = np.array([r.true_error for r in t.servo.trace])
                g = world_cfg.goal if world_cfg is not None else np.zeros(3)
                u, tu = g[k] - e[:, k], g[k] - te[:, k]
                v, tv = g[2] - e[:, 2], g[2] - te[:, 2]
                line, = ax.plot(u, v, lw=1)
                ax.plot(tu, tv, lw=0.8, ls="--", color=line.get_color())
                ax.plot(u[0], v[0], "o", ms=3, color=line.get_color())
        if world_cfg is not None:
            ax.plot(world_cfg.goal[k], world_cfg.goal[2], "k+", ms=12, mew=2)
        ax.set_xlabel("u [px]")
        ax.set_ylabel("v [px]")
        ax.invert_yaxis()
        ax.set_title(f"{name} camera: estimated (solid) and true (dashed) end-effector")
        fig.tight_layout()
        fig.savefig(Path(path) / f"traj_{name}.png", dpi=100)
        plt.close(fig)


def emit_report(results, path, world_cfg: WorldConfig | None = None, traces: bool = True,
                plots: bool = True) -> None:
    """Write ``trials.csv`` (+ traces, plots and ``timing.csv``) under directory ``path``.

    ``trials.csv`` holds only seed-determined fields so reruns compare byte for
    byte; wall-clock times go to ``timing.csv``.
    """
    if isinstance(results, ScenarioResult):
        results = [results]
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trials.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRIAL_FIELDS, lineterminator="\n")
        w.writeheader()
        for res in results:
            for row in trial_rows(res):
                w.writerow({k: _fmt(v) for k, v in row.items()})
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "trial", "wall_clock_s"])
        for res in results:
            for t in res.trials:
                w.writerow([res.name, t.trial, f"{t.wall_clock:.3f}"])
    if traces:
        for res in results:
            for t in res.trials:
                if t.servo is None:
                    continue
                header, rows = trace_rows(t.servo)
                with open(out / f"trace_{_slug(res.name)}_{t.trial}.csv", "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(header)
                    w.writerows([[_fmt(x) for x in row] for row in rows])
    if plots:
        _plot_trajectories(results, world_cfg, out)


def read_report(path) -> dict[str, dict]:
    """Parse ``trials.csv`` back: ``{scenario: {"trials": [...], "aggregate": {...}}}``."""
    path = Path(path)
    if path.is_dir():
        path = path / "trials.csv"
    floats = ("speed", "final_error_px", "std_error_px", "final_true_error_px", "estimate_error_m",
              "kinematics_error_m")
    out: dict[str, dict] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = dict(row)
            for k in floats:
                rec[k] = float(rec[k]) if rec[k] != "" else None
            for k in ("converged", "iterations", "collapses"):
                rec[k] = int(rec[k])
            entry = out.setdefault(rec["scenario"], {"trials": [], "aggregate": None})
            if rec["trial"] == AGGREGATE:
                entry["aggregate"] = rec
            else:
                rec["trial"] = int(rec["trial"])
                rec["seed"] = int(rec["seed"])
                rec["converged"] = bool(rec["converged"])
                entry["trials"].append(rec)
    return out
