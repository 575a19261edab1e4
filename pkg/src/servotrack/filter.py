"""Bootstrap particle filter over end-effector poses.

Particles live in (position, scaled axis-angle) space. Prediction pushes every
particle through the world-frame motion reported by the arm's kinematics and
adds process noise; weighting renders each hypothesis, describes it with HOG
and scores it against the camera image's descriptor with
``exp(-|y - y_hat|_1 / sigma)``.

Randomness is drawn from per-particle streams keyed on (seed, step, index), so
results do not depend on how the per-particle loop is scheduled.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .camera import CameraModel
from .hog import HOGParams, compute_hog, descriptor_distance, hog_into, l1_distance
from .kinematics import (
    DHChain,
    Pose,
    Transform,
    canonical_rotvec,
    forward_kinematics,
    matrices_to_rotvecs,
    pose_from_transform,
    quat_to_rotvec,
    relative_motion,
    rotvec_to_matrix,
    rotvec_to_quat,
    rotvecs_to_matrices,
)
from .renderer import Scene, model_to_camera, render, render_into

log = logging.getLogger(__name__)

_PROPAGATE, _RESAMPLE = 0, 1
# per-particle draws: 5 normals (position xyz, cap, angle) then 3 uniforms (azimuth, fallback axis)
_NORMALS, _UNIFORMS = 5, 3


class AllWeightsZero(RuntimeError):
    """No particle explains the observation; the filter has diverged."""


class DegenerateOrientation(ValueError):
    pass


@dataclass(frozen=True)
class NoiseParams:
    sigma_p: float = 0.005  # m
    sigma_theta: float = 3.0  # deg, rotation angle
    sigma_alpha: float = 1.5  # deg, cap aperture

    def __post_init__(self):
        if min(self.sigma_p, self.sigma_theta, self.sigma_alpha) <= 0:
            raise ValueError("noise standard deviations must be positive")


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 100
    n_threshold: float = 10
    sigma_lik: float | None = None  # None: calibrate from the initial pose
    calibration_offset: float = 0.001  # m
    min_evidence: float | None = None  # in units of sigma; None disables the check in step
    fused: bool = False
    noise: NoiseParams = field(default_factory=NoiseParams)
    hog: HOGParams = field(default_factory=HOGParams)

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if not 1 <= self.n_threshold <= self.n_particles:
            raise ValueError("resampling threshold must lie in [1, N]")
        if self.sigma_lik is not None and not self.sigma_lik > 0:
            raise ValueError("sigma_lik must be positive")


@dataclass(frozen=True, eq=False)
class Particle:
    state: Pose
    weight: float


@dataclass(eq=False)
class ParticleSet:
    positions: np.ndarray  # (N, 3)
    rotvecs: np.ndarray  # (N, 3)
    weights: np.ndarray  # (N,)
    ids: np.ndarray  # (N,) identity of each particle's ancestor at the last resample
    seed: int = 0
    step: int = 0

    def __len__(self):
        return len(self.weights)

    def __getitem__(self, i) -> Particle:
        return Particle(Pose(self.positions[i], self.rotvecs[i]), float(self.weights[i]))

    @property
    def particles(self) -> list[Particle]:
        return [self[i] for i in range(len(self))]

    def copy(self, **changes) -> "ParticleSet":
        fields = dict(positions=self.positions.copy(), rotvecs=self.rotvecs.copy(),
                      weights=self.weights.copy(), ids=self.ids.copy(), seed=self.seed, step=self.step)
        fields.update(changes)
        return ParticleSet(**fields)


def stream(seed: int, step: int, purpose: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed) & (2**64 - 1), step, purpose, index])


def initialize(chain: DHChain, q0, cfg: FilterConfig, seed: int = 0) -> ParticleSet:
    """All particles at the direct-kinematics pose, uniform weights."""
    pose = pose_from_transform(forward_kinematics(chain, q0))
    return from_pose(pose, cfg.n_particles, seed)


def from_pose(pose: Pose, n: int, seed: int = 0, step: int = 0) -> ParticleSet:
    return ParticleSet(
        positions=np.tile(pose.p, (n, 1)),
        rotvecs=np.tile(pose.o, (n, 1)),
        weights=np.full(n, 1.0 / n),
        ids=np.arange(n),
        seed=seed,
        step=step,
    )


# --- process noise ----------------------------------------------------------------

def _orthonormal_pair(axis: np.ndarray):
    """Two unit vectors completing ``axis`` (n, 3) to right-handed frames."""
    helper = np.where(np.abs(axis[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    b1 = np.cross(axis, helper)
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    return b1, np.cross(axis, b1)


def perturb_rotvecs(rotvecs, cap, azimuth, dtheta, fallback_axes) -> np.ndarray:
    """Spherical-cap perturbation of scaled axis-angle vectors.

    The rotation axis is tilted by ``cap`` (rad) toward direction ``azimuth``
    and the rotation angle shifted by ``dtheta`` (rad). Identity rotations have
    no axis; they use ``fallback_axes`` instead.
    """
    O = np.asarray(rotvecs, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(O, axis=1)
    degenerate = theta < 1e-12
    axis = np.where(degenerate[:, None], fallback_axes, O / np.where(degenerate, 1.0, theta)[:, None])
    b1, b2 = _orthonormal_pair(axis)
    tilt = np.cos(azimuth)[:, None] * b1 + np.sin(azimuth)[:, None] * b2
    new_axis = np.cos(cap)[:, None] * axis + np.sin(cap)[:, None] * tilt
    new = new_axis * (theta + dtheta)[:, None]
    return np.array([canonical_rotvec(o) for o in new])


def _unit_from_uniforms(u1, u2):
    z = 2.0 * u1 - 1.0
    phi = 2.0 * math.pi * u2
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def sample_orientation_noise(rng: np.random.Generator, sigma_theta: float, sigma_alpha: float,
                             o=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Rotation ``dR`` so that ``dR @ R(o)`` is a spherical-cap perturbation of ``o``.

    Angles in degrees: ``sigma_theta`` for the rotation angle, ``sigma_alpha``
    for the cap aperture (half-normal tilt of the axis at uniform azimuth).
    """
    draws = rng.random(4)
    cap = abs(rng.standard_normal()) * math.radians(sigma_alpha)
    dtheta = rng.standard_normal() * math.radians(sigma_theta)
    azimuth = 2.0 * math.pi * draws[0]
    fallback = _unit_from_uniforms(draws[1:2], draws[2:3])
    o = np.asarray(o, dtype=float).reshape(1, 3)
    o_new = perturb_rotvecs(o, np.array([cap]), np.array([azimuth]), np.array([dtheta]), fallback)[0]
    return rotvec_to_matrix(o_new) @ rotvec_to_matrix(o[0]).T


def _draws(seed: int, step: int, n: int) -> np.ndarray:
    out = np.empty((n, _NORMALS + _UNIFORMS))
    for i in range(n):
        g = stream(seed, step, _PROPAGATE, i)
        out[i, :_NORMALS] = g.standard_normal(_NORMALS)
        out[i, _NORMALS:] = g.random(_UNIFORMS)
    return out


def predict(ps: ParticleSet, delta: Transform, noise: NoiseParams, rng=None) -> ParticleSet:
    """Move particles by world-frame ``delta`` and add process noise.

    Noise comes from the set's per-particle streams for the next step unless
    an explicit generator ``rng`` is given (then drawn from it in particle order).
    """
    n = len(ps)
    step = ps.step + 1
    if rng is None:
        draws = _draws(ps.seed, step, n)
    else:
        draws = np.hstack([rng.standard_normal((n, _NORMALS)), rng.random((n, _UNIFORMS))])

    R = np.einsum("ij,njk->nik", delta.rotation, rotvecs_to_matrices(ps.rotvecs))
    positions = ps.positions @ delta.rotation.T + delta.translation
    rotvecs = matrices_to_rotvecs(R)

    positions = positions + noise.sigma_p * draws[:, :3]
    cap = np.abs(draws[:, 3]) * math.radians(noise.sigma_alpha)
    dtheta = draws[:, 4] * math.radians(noise.sigma_theta)
    azimuth = 2.0 * math.pi * draws[:, 5]
    fallback = _unit_from_uniforms(draws[:, 6], draws[:, 7])
    rotvecs = perturb_rotvecs(rotvecs, cap, azimuth, dtheta, fallback)
    return ps.copy(positions=positions, rotvecs=rotvecs, step=step)


# --- weighting --------------------------------------------------------------------

def likelihood(y, y_hat, sigma: float) -> float:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return math.exp(-descriptor_distance(y, y_hat) / sigma)


_LOG_TINY = float(np.log(np.finfo(float).tiny))


def reweight(ps: ParticleSet, log_likelihoods) -> ParticleSet:
    """Multiply weights by ``exp(log_likelihoods)`` and normalize.

    The largest term is factored out before exponentiating; it cancels in the
    normalization, so the result equals the direct product without losing
    precision. :class:`AllWeightsZero` is raised when the direct product would
    have underflowed to zero everywhere.
    """
    ll = np.asarray(log_likelihoods, dtype=float)
    if ll.shape != ps.weights.shape:
        raise ValueError("need one likelihood per particle")
    with np.errstate(divide="ignore"):
        logw = np.log(ps.weights) + ll
    top = np.max(logw)
    if not np.isfinite(top) or np.isnan(logw).any():
        raise AllWeightsZero("all weights vanished")
    w = np.exp(logw - top)
    total = w.sum()
    if not (total > 0 and np.isfinite(total)) or top + np.log(total) < _LOG_TINY:
        raise AllWeightsZero("weight normalizer underflowed")
    return ps.copy(weights=w / total)


def update_weights(ps: ParticleSet, camera_descriptor, rendered_descriptors, sigma: float) -> ParticleSet:
    if len(rendered_descriptors) != len(ps):
        raise ValueError("need one rendered descriptor per particle")
    d = np.array([descriptor_distance(camera_descriptor, y_hat) for y_hat in rendered_descriptors])
    return reweight(ps, -d / sigma)


def effective_sample_size(ps: ParticleSet) -> float:
    n = len(ps)
    return float(min(n, max(1.0, 1.0 / np.sum(ps.weights**2))))


def systematic_resample(ps: ParticleSet, rng: np.random.Generator, n: int | None = None) -> ParticleSet:
    """Low-variance resampling: one uniform offset, ``n`` evenly spaced CDF probes."""
    n = len(ps) if n is None else n
    cdf = np.cumsum(ps.weights)
    cdf /= cdf[-1]
    probes = (rng.random() + np.arange(n)) / n
    idx = np.minimum(np.searchsorted(cdf, probes, side="right"), len(ps) - 1)
    return ParticleSet(
        positions=ps.positions[idx].copy(),
        rotvecs=ps.rotvecs[idx].copy(),
        weights=np.full(n, 1.0 / n),
        ids=ps.ids[idx].copy(),
        seed=ps.seed,
        step=ps.step,
    )


def weighted_quaternion_mean(rotvecs, weights) -> np.ndarray:
    q = np.array([rotvec_to_quat(o) for o in rotvecs])
    ref = q[int(np.argmax(weights))]
    q = np.where((q @ ref < 0)[:, None], -q, q)
    s = weights @ q
    norm = np.linalg.norm(s)
    if norm < 1e-9:
        raise DegenerateOrientation("weighted quaternion sum vanished")
    return s / norm


def eap_estimate(ps: ParticleSet) -> Pose:
    """Weighted mean: positions averaged, orientations via the quaternion mean."""
    p = ps.weights @ ps.positions
    return Pose(p, quat_to_rotvec(weighted_quaternion_mean(ps.rotvecs, ps.weights)))


# --- render + describe + compare for a whole particle set ------------------------

@nb.njit(parallel=True, cache=True)
def _particle_distances(R, t, vertices, triangles, tri_normals, tri_albedo, light, ambient,
                        fx, fy, cx, cy, height, width, cell, block_h, block_w, stride, n_bins,
                        signed, clip, eps, y_ref):
    n = R.shape[0]
    out = np.empty(n)
    cells_y, cells_x = height // cell, width // cell
    for i in nb.prange(n):
        image = np.zeros((height, width))
        inv_depth = np.zeros((height, width))
        render_into(image, inv_depth, R[i], t[i], vertices, triangles, tri_normals, tri_albedo,
                    light, ambient, fx, fy, cx, cy)
        hist = np.empty((cells_y, cells_x, n_bins))
        desc = np.empty(y_ref.shape[0])
        hog_into(image, cell, block_h, block_w, stride, n_bins, signed, clip, eps, hist, desc)
        out[i] = l1_distance(desc, y_ref)
    return out


def particle_distances(ps: ParticleSet, scene: Scene, camera: CameraModel, y_ref, params: HOGParams) -> np.ndarray:
    """``|y_ref - h(render(x_i))|_1`` for every particle, evaluated in parallel."""
    intr = camera.intrinsics
    R, t = model_to_camera(ps.positions, rotvecs_to_matrices(ps.rotvecs), camera.extrinsic())
    packed = scene.packed
    if len(packed.triangles) == 0:
        return np.full(len(ps), float(np.sum(y_ref)))
    by, bx = params.block_size
    return _particle_distances(
        R, t, packed.vertices, packed.triangles, packed.tri_normals, packed.tri_albedo,
        scene.light_dir, float(scene.ambient), intr.fx, intr.fy, intr.cx, intr.cy,
        intr.height, intr.width, params.cell_size, by, bx, params.block_stride, params.n_bins,
        params.signed, params.clip, params.epsilon, np.ascontiguousarray(y_ref, dtype=float),
    )


def calibrate_sigma(scene: Scene, pose: Pose, camera: CameraModel, params: HOGParams,
                    offset: float = 0.01) -> float:
    """Mean descriptor distance between ``pose`` and the six +-offset translations.

    With this sigma a hypothesis displaced by ``offset`` scores about 1/e of
    the exact one.
    """
    cam = (camera.intrinsics, camera.extrinsic())
    y0 = compute_hog(render(scene, pose, cam), params)
    d = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            p = pose.p.copy()
            p[axis] += sign * offset
            d.append(descriptor_distance(y0, compute_hog(render(scene, Pose(p, pose.o), cam), params)))
    sigma = float(np.mean(d))
    if not sigma > 0:
        raise ValueError("end-effector is not visible from this camera; cannot calibrate sigma")
    return sigma


@dataclass(eq=False)
class StepResult:
    particles: ParticleSet
    estimate: Pose
    ess: float
    resampled: bool
    evidence: float  # best hypothesis versus an empty render, in units of sigma


def step(ps: ParticleSet, chain: DHChain, q_prev, q_curr, camera_images, cameras, scene: Scene,
         cfg: FilterConfig, sigmas) -> StepResult:
    """One filter cycle: predict, weight, maybe resample, estimate.

    With several cameras the per-camera likelihoods are multiplied.
    """
    ps = predict(ps, relative_motion(chain, q_prev, q_curr), cfg.noise)

    loglik = np.zeros(len(ps))
    evidence = 0.0
    for image, camera, sigma in zip(camera_images, cameras, sigmas, strict=True):
        y = compute_hog(image, cfg.hog)
        d = particle_distances(ps, scene, camera, y, cfg.hog)
        loglik -= d / sigma
        evidence += (float(np.sum(y)) - float(d.min())) / sigma  # empty render has an all-zero descriptor
    if cfg.min_evidence is not None and evidence <= cfg.min_evidence:
        raise AllWeightsZero(f"best hypothesis explains the image no better than an empty view "
                             f"(evidence {evidence:.3g})")
    ps = reweight(ps, loglik)

    ess = effective_sample_size(ps)
    resampled = ess < cfg.n_threshold
    if resampled:
        ps = systematic_resample(ps, stream(ps.seed, ps.step, _RESAMPLE))
    return StepResult(ps, eap_estimate(ps), ess, resampled, evidence)


class ParticleFilter:
    """Filter state for a fixed camera set, with sigma calibration and recovery.

    ``cameras`` holds one camera for the default per-camera filter, or several
    for the fused variant.
    """

    def __init__(self, chain: DHChain, cameras, scene: Scene, cfg: FilterConfig, seed: int = 0):
        self.chain = chain
        self.cameras = list(cameras)
        self.scene = scene
        self.cfg = cfg
        self.seed = seed
        self.particles: ParticleSet | None = None
        self.sigmas: list[float] = []
        self.q_prev = None
        self.collapses = 0

    def initialize(self, q0) -> ParticleSet:
        self.q_prev = self.chain.check(q0).copy()
        step_no = self.particles.step if self.particles is not None else 0
        pose = pose_from_transform(forward_kinematics(self.chain, q0))
        self.particles = from_pose(pose, self.cfg.n_particles, self.seed, step_no)
        if not self.sigmas:
            if self.cfg.sigma_lik is not None:
                self.sigmas = [self.cfg.sigma_lik] * len(self.cameras)
            else:
                self.sigmas = [calibrate_sigma(self.scene, pose, cam, self.cfg.hog, self.cfg.calibration_offset)
                               for cam in self.cameras]
        return self.particles

    def step(self, camera_images, q_curr) -> StepResult:
        """Advance one cycle; on weight collapse, restart from direct kinematics."""
        if self.particles is None:
            raise RuntimeError("initialize the filter first")
        q_curr = self.chain.check(q_curr).copy()
        try:
            result = step(self.particles, self.chain, self.q_prev, q_curr, camera_images,
                          self.cameras, self.scene, self.cfg, self.sigmas)
        except AllWeightsZero as exc:
            log.info("filter collapse at step %d: %s", self.particles.step + 1, exc)
            self.collapses += 1
            self.particles = self.particles.copy(step=self.particles.step + 1)
            self.initialize(q_curr)
            self.q_prev = q_curr
            raise
        self.particles = result.particles
        self.q_prev = q_curr
        return result

    @property
    def estimate(self) -> Pose:
        return eap_estimate(self.particles)
