"""Endpoint closed-loop stereo visual servoing on the tracked end-effector.

The controlled feature is ``u_e = [u_l, u_r, v_l]``; the law is
``v = K J^-1 e`` with ``e = u_g - u_e`` and ``J`` the 3x3 position image
Jacobian, saturated at ``max_speed``. Orientation is not servoed.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .camera import NonPositiveDepth, StereoFeature, image_jacobian, project_point, stereo_feature, triangulate
from .filter import AllWeightsZero, ParticleFilter
from .kinematics import Pose

log = logging.getLogger(__name__)


class SingularJacobian(np.linalg.LinAlgError):
    pass


class NotConverged(RuntimeError):
    """The loop stopped before the pixel error fell below threshold; ``result`` holds the trace."""

    def __init__(self, message: str, result: "ServoResult"):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class ServoConfig:
    gain: float = 2.0  # 1/s
    max_speed: float = 0.02  # m/s
    convergence_px: float = 1.0
    max_iters: int = 500
    dt: float = 0.2  # s per control iteration
    settle_iters: int = 15  # filter cycles with the arm still, before servoing
    ik_damping: float = 0.01
    max_collapses: int = 5  # consecutive filter collapses before giving up
    min_evidence: float = 0.0  # per-filter evidence needed to trust the estimate
    max_untracked: int = 10  # consecutive untracked iterations before giving up
    max_disagreement: float = 0.05  # m, between the per-camera position estimates

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        if not self.convergence_px > 0:
            raise ValueError("convergence threshold must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.max_speed > 0:
            raise ValueError("max_speed must be positive")
        if not self.max_disagreement > 0:
            raise ValueError("max_disagreement must be positive")
        if self.max_iters < 0 or self.settle_iters < 0 or self.max_untracked < 1:
            raise ValueError("iteration counts must be non-negative")


@dataclass(eq=False)
class ServoState:
    u_e: StereoFeature
    u_g: StereoFeature
    e: np.ndarray
    iteration: int


def compute_error(u_g, u_e) -> np.ndarray:
    g = u_g.vector if isinstance(u_g, StereoFeature) else np.asarray(u_g, dtype=float)
    c = u_e.vector if isinstance(u_e, StereoFeature) else np.asarray(u_e, dtype=float)
    return g - c


def control_velocity(J, e, cfg: ServoConfig) -> np.ndarray:
    J = np.asarray(J, dtype=float)
    if not np.all(np.isfinite(J)) or np.linalg.cond(J) >= 1e8:
        raise SingularJacobian("image Jacobian is singular or badly conditioned")
    v = cfg.gain * np.linalg.solve(J, np.asarray(e, dtype=float))
    speed = np.linalg.norm(v)
    if speed > cfg.max_speed:
        v *= cfg.max_speed / speed
    return v


@dataclass(eq=False)
class TraceRow:
    iteration: int
    error: np.ndarray  # estimated, u_g - u_e
    true_error: np.ndarray  # from the ground-truth end-effector position
    estimates: list[Pose]  # one per filter (or the true pose in oracle mode)
    velocity: np.ndarray
    ess: list[float]
    evidence: list[float]
    collapsed: bool


@dataclass(eq=False)
class ServoResult:
    converged: bool
    status: str  # converged | max_iters | diverged | lost | singular
    iterations: int
    final_error: np.ndarray
    final_true_error: np.ndarray
    estimate_position: np.ndarray  # stereo point of the final feature
    trace: list[TraceRow] = field(default_factory=list)
    collapses: int = 0
    wall_clock: float = 0.0

    @property
    def final_error_px(self) -> float:
        return float(np.linalg.norm(self.final_error))

    @property
    def final_true_error_px(self) -> float:
        return float(np.linalg.norm(self.final_true_error))


def feature_from_estimates(estimates: list[Pose], projections) -> StereoFeature:
    """Project the tracked position(s); one estimate per camera or one shared."""
    Pi_l, Pi_r = projections
    p_l = estimates[0].p
    p_r = estimates[-1].p
    left = project_point(Pi_l, p_l)
    right = project_point(Pi_r, p_r)
    return StereoFeature(left.u, right.u, left.v)


def servo_loop(world, filters: list[ParticleFilter] | None, u_g, cfg: ServoConfig,
               raise_on_failure: bool = True) -> ServoResult:
    """Track and servo until the estimated pixel error drops below threshold.

    ``world`` is a :class:`servotrack.sim.World`; its ``observe``/``command``
    are the only ways this loop sees or moves the arm. ``filters`` holds one
    filter per camera (or one fused filter); ``None`` feeds the true pose to
    the controller instead (oracle mode).
    """
    from .sim import observe  # sim depends on this module

    t0 = time.perf_counter()
    u_g = u_g if isinstance(u_g, StereoFeature) else StereoFeature.from_vector(u_g)
    projections = [cam.projection() for cam in world.cameras[:2]]
    oracle = filters is None

    images, q = observe(world)
    ess: list[float] = []
    evidence: list[float] = []
    if not oracle:
        for f in filters:
            f.initialize(q)
        for _ in range(cfg.settle_iters):
            images, q = observe(world)
            try:
                ess, evidence = _filter_step(filters, images, q)
            except AllWeightsZero:
                log.warning("filter collapsed while settling; reinitialized")
                ess, evidence = [], []

    trace: list[TraceRow] = []
    consecutive = 0
    untracked = 0
    collapses = 0
    collapsed = False
    status = "max_iters"
    velocity = np.zeros(3)
    it = 0
    while True:
        true_pose = world.end_effector_pose()
        if oracle:
            estimates = [true_pose]
        else:
            estimates = [f.estimate for f in filters]
        true_e = compute_error(u_g, stereo_feature(true_pose.p, *projections))
        tracking = oracle or _tracking(estimates, evidence, cfg)
        untracked = 0 if tracking else untracked + 1
        try:
            u_e = feature_from_estimates(estimates, projections)
        except NonPositiveDepth:
            # the estimate left the viewing volume; nothing sensible to servo on
            trace.append(TraceRow(it, np.full(3, np.nan), true_e, estimates, velocity.copy(), ess, evidence,
                                  collapsed))
            status = "lost"
            break
        e = compute_error(u_g, u_e)
        trace.append(TraceRow(it, e, true_e, estimates, velocity.copy(), ess, evidence, collapsed))
        if np.linalg.norm(e) < cfg.convergence_px and tracking and not collapsed:
            status = "converged"
            break
        if consecutive >= cfg.max_collapses:
            status = "diverged"
            break
        if untracked >= cfg.max_untracked:
            status = "lost"
            break
        if it >= cfg.max_iters:
            break
        p_hat = triangulate(u_e, *projections)
        try:
            velocity = control_velocity(image_jacobian(p_hat, *projections), e, cfg)
        except SingularJacobian:
            status = "singular"
            break
        except NonPositiveDepth:
            status = "lost"
            break
        world.command(velocity * cfg.dt, cfg.dt, damping=cfg.ik_damping)
        it += 1
        images, q = observe(world)
        collapsed = False
        ess, evidence = [], []
        if not oracle:
            try:
                ess, evidence = _filter_step(filters, images, q)
                consecutive = 0
            except AllWeightsZero:
                collapsed = True
                consecutive += 1
                collapses += 1

    last = trace[-1]
    if np.all(np.isfinite(last.error)):
        estimate_position = triangulate(u_g.vector - last.error, *projections)
    else:
        estimate_position = np.full(3, np.nan)
    result = ServoResult(
        converged=status == "converged",
        status=status,
        iterations=it,
        final_error=last.error,
        final_true_error=last.true_error,
        estimate_position=estimate_position,
        trace=trace,
        collapses=collapses,
        wall_clock=time.perf_counter() - t0,
    )
    if raise_on_failure and not result.converged:
        raise NotConverged(f"servo stopped ({status}) after {it} iterations, "
                           f"|e| = {result.final_error_px:.3f} px", result)
    return result


def _tracking(estimates: list[Pose], evidence: list[float], cfg: ServoConfig) -> bool:
    """Whether the estimates can be trusted for a convergence decision.

    A filter that explains its image no better than an empty view has lost the
    hand, and two per-camera filters that disagree about where it is cannot
    both be on it.
    """
    if not evidence or any(ev <= cfg.min_evidence for ev in evidence):
        return False
    if len(estimates) > 1 and np.linalg.norm(estimates[0].p - estimates[-1].p) > cfg.max_disagreement:
        return False
    return True


def _filter_step(filters, images, q) -> tuple[list[float], list[float]]:
    """Step every filter (one image each, or all images for a fused filter); returns ESS and evidence."""
    ess, evidence = [], []
    failed = None
    for i, f in enumerate(filters):
        cam_images = images if len(f.cameras) > 1 else [images[i]]
        try:
            res = f.step(cam_images, q)
            ess.append(res.ess)
            evidence.append(res.evidence)
        except AllWeightsZero as exc:
            failed = exc
    if failed is not None:
        raise failed
    return ess, evidence
