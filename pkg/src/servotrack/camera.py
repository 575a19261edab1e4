"""Pinhole cameras, stereo features and the position image Jacobian.

Pixel convention: (0, 0) is the centre of the top-left pixel, u grows to the
right and v downward. No lens distortion.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import DHChain, Transform, forward_kinematics


class NonPositiveDepth(ValueError):
    """A point projects from behind (or onto) the camera plane."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class PixelPoint:
    u: float
    v: float


@dataclass(frozen=True, eq=False)
class StereoFeature:
    u_l: float
    u_r: float
    v_l: float

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.u_l, self.u_r, self.v_l])

    @classmethod
    def from_vector(cls, u) -> "StereoFeature":
        u = np.asarray(u, dtype=float)
        return cls(float(u[0]), float(u[1]), float(u[2]))


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Intrinsics plus the world-to-camera transform.

    The extrinsic is either fixed, or derived from a mount chain: the camera
    frame sits at ``FK(chain, q) @ mount`` in the world, so the world-to-camera
    transform is the inverse of that.
    """

    name: str
    intrinsics: Intrinsics
    fixed_extrinsic: Transform | None = None
    chain: DHChain | None = None
    q: np.ndarray | None = None
    mount: Transform | None = None

    def __post_init__(self):
        if (self.fixed_extrinsic is None) == (self.chain is None):
            raise ValueError("camera needs exactly one of a fixed extrinsic or a mount chain")

    def extrinsic(self, q=None) -> Transform:
        if self.fixed_extrinsic is not None:
            return self.fixed_extrinsic
        q = self.q if q is None else q
        pose = forward_kinematics(self.chain, q)
        if self.mount is not None:
            pose = pose @ self.mount
        return pose.inverse()

    def projection(self, q=None) -> np.ndarray:
        return projection_matrix(self.intrinsics, self.extrinsic(q))


def projection_matrix(K: Intrinsics, extrinsic: Transform) -> np.ndarray:
    """3 x 4 matrix ``K [R | t]`` mapping homogeneous world points to pixels."""
    Rt = np.hstack([extrinsic.rotation, extrinsic.translation[:, None]])
    return K.K @ Rt


def _homogeneous(p) -> np.ndarray:
    p = np.asarray(p, dtype=float).reshape(-1)
    if len(p) == 3:
        return np.append(p, 1.0)
    if len(p) == 4:
        return p
    raise ValueError("expected a 3-vector or homogeneous 4-vector")


def project_point(Pi, p, min_depth: float = 0.0) -> PixelPoint:
    """Perspective projection; accepts a 3-vector or a homogeneous 4-vector."""
    X = _homogeneous(p)
    f = np.asarray(Pi) @ X
    # depth of a homogeneous point is f3 / w
    if not f[2] / X[3] > min_depth:
        raise NonPositiveDepth(f"point at depth {f[2] / X[3]:.4g} is not in front of the camera")
    return PixelPoint(float(f[0] / f[2]), float(f[1] / f[2]))


def stereo_feature(p, Pi_l, Pi_r) -> StereoFeature:
    left = project_point(Pi_l, p)
    right = project_point(Pi_r, p)
    return StereoFeature(left.u, right.u, left.v)


def image_jacobian(p, Pi_l, Pi_r) -> np.ndarray:
    """d(u_l, u_r, v_l) / d(x, y, z) at world point ``p``.

    Each coordinate is a ratio of two affine functions of the point, so the
    derivative rows follow from the quotient rule.
    """
    X = _homogeneous(p)
    rows = []
    for Pi, r in ((Pi_l, 0), (Pi_r, 0), (Pi_l, 1)):
        Pi = np.asarray(Pi)
        num = Pi[r] @ X
        lam = Pi[2] @ X
        if lam <= 0:
            raise NonPositiveDepth("point is not in front of the camera")
        rows.append((Pi[r, :3] * lam - num * Pi[2, :3]) / lam**2)
    return np.array(rows)


def triangulate(u_e, Pi_l, Pi_r) -> np.ndarray:
    """World point whose stereo feature is ``u_e`` (three linear equations)."""
    u_l, u_r, v_l = u_e.vector if isinstance(u_e, StereoFeature) else np.asarray(u_e, dtype=float)
    Pi_l, Pi_r = np.asarray(Pi_l), np.asarray(Pi_r)
    A = np.array([
        Pi_l[0] - u_l * Pi_l[2],
        Pi_r[0] - u_r * Pi_r[2],
        Pi_l[1] - v_l * Pi_l[2],
    ])
    return np.linalg.solve(A[:, :3], -A[:, 3])
