"""Denavit-Hartenberg forward kinematics and rigid-transform helpers.

Standard (distal) DH convention throughout: each link contributes
``Rz(theta) Tz(d) Tx(a) Rx(alpha)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

RIGID_TOL = 1e-9


class DimensionMismatch(ValueError):
    pass


class NotRigid(ValueError):
    pass


def _as_rotation(rotation) -> np.ndarray:
    R = np.asarray(rotation, dtype=float).reshape(3, 3)
    if not np.all(np.isfinite(R)):
        raise NotRigid("rotation has non-finite entries")
    if np.abs(R.T @ R - np.eye(3)).max() > RIGID_TOL or abs(np.linalg.det(R) - 1.0) > RIGID_TOL:
        raise NotRigid("rotation is not orthonormal with det +1")
    return R


@dataclass(frozen=True, eq=False)
class Transform:
    """Rigid homogeneous transform ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_matrix(cls, M) -> "Transform":
        M = np.asarray(M, dtype=float)
        if M.shape != (4, 4):
            raise DimensionMismatch(f"expected 4x4 matrix, got {M.shape}")
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def identity(cls) -> "Transform":
        return cls()

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "Transform":
        Rt = self.rotation.T
        return Transform(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Map a point (3,) or points (n, 3)."""
        P = np.asarray(points, dtype=float)
        return P @ self.rotation.T + self.translation

    def __matmul__(self, other: "Transform") -> "Transform":
        return Transform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def allclose(self, other: "Transform", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol))

    def __repr__(self):
        return f"Transform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


# --- rotation vector <-> matrix -------------------------------------------------

def _canonical_axis_sign(axis: np.ndarray) -> np.ndarray:
    # at theta == pi, +axis and -axis describe the same rotation: first nonzero component positive
    for c in axis:
        if abs(c) > 1e-12:
            return axis if c > 0 else -axis
    return axis


def canonical_rotvec(o) -> np.ndarray:
    """Rewrite a scaled axis-angle vector so that its angle lies in [0, pi]."""
    o = np.asarray(o, dtype=float).reshape(3)
    theta = float(np.linalg.norm(o))
    if theta == 0.0:
        return np.zeros(3)
    axis = o / theta
    theta = math.fmod(theta, 2.0 * math.pi)
    if theta > math.pi:
        theta = 2.0 * math.pi - theta
        axis = -axis
    if abs(theta - math.pi) < 1e-12:
        axis = _canonical_axis_sign(axis)
    return axis * theta


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(o) -> np.ndarray:
    o = np.asarray(o, dtype=float).reshape(3)
    theta = float(np.linalg.norm(o))
    if theta < 1e-12:
        return np.eye(3) + skew(o)
    k = skew(o / theta)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def matrix_to_quat(R) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0, via Shepperd's method."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    diag = (tr, R[0, 0], R[1, 1], R[2, 2])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif k == 1:
        s = 2.0 * math.sqrt(1.0 + 2.0 * R[0, 0] - tr)
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif k == 2:
        s = 2.0 * math.sqrt(1.0 + 2.0 * R[1, 1] - tr)
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + 2.0 * R[2, 2] - tr)
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_to_rotvec(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    v = q[1:]
    s = float(np.linalg.norm(v))
    if s < 1e-15:
        return 2.0 * v  # first-order, exact to rounding at this size
    theta = 2.0 * math.atan2(s, q[0])
    return canonical_rotvec(v / s * theta)


def rotvec_to_quat(o) -> np.ndarray:
    o = np.asarray(o, dtype=float).reshape(3)
    theta = float(np.linalg.norm(o))
    if theta < 1e-15:
        return np.array([1.0, *(0.5 * o)])
    axis = o / theta
    return np.array([math.cos(theta / 2), *(math.sin(theta / 2) * axis)])


def matrix_to_rotvec(R) -> np.ndarray:
    return quat_to_rotvec(matrix_to_quat(R))


# batched variants used by the particle filter; shapes (n, 3) <-> (n, 3, 3)

def rotvecs_to_matrices(O: np.ndarray) -> np.ndarray:
    O = np.asarray(O, dtype=float)
    theta = np.linalg.norm(O, axis=1)
    small = theta < 1e-12
    safe = np.where(small, 1.0, theta)
    k = O / safe[:, None]
    K = np.zeros((len(O), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
    K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -k[:, 1], k[:, 0]
    s = np.sin(theta)[:, None, None]
    c = (1.0 - np.cos(theta))[:, None, None]
    R = np.eye(3) + s * K + c * (K @ K)
    if small.any():
        R[small] = [rotvec_to_matrix(o) for o in O[small]]
    return R


def matrices_to_rotvecs(R: np.ndarray) -> np.ndarray:
    return np.array([matrix_to_rotvec(r) for r in R]).reshape(len(R), 3)


# --- poses ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Position ``p`` (m) and scaled axis-angle orientation ``o`` (rad)."""

    p: np.ndarray
    o: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).reshape(3)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "o", canonical_rotvec(self.o))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.o])

    @classmethod
    def from_vector(cls, x) -> "Pose":
        x = np.asarray(x, dtype=float)
        return cls(x[:3], x[3:6])

    def __repr__(self):
        return f"Pose(p={self.p.tolist()}, o={self.o.tolist()})"


def transform_from_pose(x: Pose) -> Transform:
    return Transform(rotvec_to_matrix(x.o), x.p)


def pose_from_transform(T: Transform) -> Pose:
    return Pose(T.translation.copy(), matrix_to_rotvec(T.rotation))


# --- DH chains ------------------------------------------------------------------

@dataclass(frozen=True)
class DHLink:
    a: float
    alpha: float
    d: float
    theta_offset: float = 0.0
    joint_kind: str = "revolute"

    def __post_init__(self):
        if self.joint_kind not in ("revolute", "fixed"):
            raise ValueError(f"joint_kind must be 'revolute' or 'fixed', got {self.joint_kind!r}")
        for name in ("a", "alpha", "d", "theta_offset"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"DH parameter {name} is not finite")

    @property
    def revolute(self) -> bool:
        return self.joint_kind == "revolute"


def dh_matrix(a: float, alpha: float, d: float, theta: float) -> np.ndarray:
    ct, st = math.cos(theta), math.sin(theta)
    ca, sa = math.cos(alpha), math.sin(alpha)
    return np.array([
        [ct, -st * ca, st * sa, a * ct],
        [st, ct * ca, -ct * sa, a * st],
        [0.0, sa, ca, d],
        [0.0, 0.0, 0.0, 1.0],
    ])


@dataclass(frozen=True)
class DHChain:
    links: tuple[DHLink, ...]
    base: Transform = field(default_factory=Transform.identity)

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        if not self.links:
            raise ValueError("a DH chain needs at least one link")

    @property
    def n_joints(self) -> int:
        return sum(1 for link in self.links if link.revolute)

    def check(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float).reshape(-1)
        if len(q) != self.n_joints:
            raise DimensionMismatch(f"chain has {self.n_joints} revolute joints, got {len(q)} angles")
        return q


def forward_kinematics(chain: DHChain, q) -> Transform:
    """Base-to-end-effector transform at joint angles ``q``."""
    q = chain.check(q)
    M = chain.base.matrix
    j = 0
    for link in chain.links:
        theta = link.theta_offset
        if link.revolute:
            theta += q[j]
            j += 1
        M = M @ dh_matrix(link.a, link.alpha, link.d, theta)
    return Transform.from_matrix(M)


def relative_motion(chain: DHChain, q_prev, q_curr) -> Transform:
    """World-frame delta ``FK(q_curr) FK(q_prev)^-1``."""
    return forward_kinematics(chain, q_curr) @ forward_kinematics(chain, q_prev).inverse()


def position_jacobian(chain: DHChain, q, h: float = 1e-7) -> np.ndarray:
    """3 x n Jacobian of the end-effector position (central differences)."""
    q = chain.check(q)
    J = np.zeros((3, len(q)))
    for i in range(len(q)):
        dq = np.zeros_like(q)
        dq[i] = h
        J[:, i] = (forward_kinematics(chain, q + dq).translation
                   - forward_kinematics(chain, q - dq).translation) / (2 * h)
    return J


def dls_step(chain: DHChain, q, dp, damping: float = 0.01) -> np.ndarray:
    """Joint increment moving the end-effector by ``dp`` (damped least squares)."""
    J = position_jacobian(chain, q)
    A = J @ J.T + damping**2 * np.eye(3)
    return J.T @ np.linalg.solve(A, np.asarray(dp, dtype=float))


def solve_position_ik(chain: DHChain, q0, target, iters: int = 200, tol: float = 1e-6,
                      max_step: float = 0.05) -> np.ndarray:
    """Iterated DLS toward a position target; returns the final joint angles."""
    q = chain.check(q0).copy()
    target = np.asarray(target, dtype=float)
    for _ in range(iters):
        err = target - forward_kinematics(chain, q).translation
        n = np.linalg.norm(err)
        if n < tol:
            break
        if n > max_step:
            err *= max_step / n
        q = q + dls_step(chain, q, err)
    return q
