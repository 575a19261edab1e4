"""Software z-buffer rasterizer producing grayscale predicted images.

Images are ``(height, width)`` float64 arrays with intensities in [0, 1] and a
0-valued background. Shading is flat Lambertian with one directional light
fixed in the camera frame plus an ambient term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numba as nb
import numpy as np

from .camera import Intrinsics
from .kinematics import Pose, Transform, transform_from_pose
from .mesh import TriangleMesh

NEAR_PLANE = 1e-3  # m; triangles with a vertex closer than this are dropped
AMBIENT = 0.25
DEFAULT_LIGHT = (-0.3, -0.5, -1.0)  # camera frame, pointing from the surface toward the light


@dataclass(frozen=True, eq=False)
class ScenePart:
    name: str
    mesh: TriangleMesh
    offset: Transform = field(default_factory=Transform.identity)
    albedo: float = 1.0


@dataclass(frozen=True, eq=False)
class PackedMesh:
    """All parts merged into one vertex/triangle soup in the model frame."""

    vertices: np.ndarray
    triangles: np.ndarray
    tri_normals: np.ndarray
    tri_albedo: np.ndarray


@dataclass(frozen=True, eq=False)
class Scene:
    parts: tuple[ScenePart, ...] = ()
    light_dir: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_LIGHT))
    ambient: float = AMBIENT

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        light = np.asarray(self.light_dir, dtype=float).reshape(3)
        object.__setattr__(self, "light_dir", light / np.linalg.norm(light))

    @cached_property
    def packed(self) -> PackedMesh:
        return pack_parts(self.parts)


def pack_parts(parts) -> PackedMesh:
    verts, tris, normals, albedo = [], [], [], []
    base = 0
    for part in parts:
        m = part.mesh
        verts.append(part.offset.apply(m.vertices))
        tris.append(m.triangles + base)
        normals.append(m.face_normals @ part.offset.rotation.T)
        albedo.append(np.full(len(m.triangles), float(part.albedo)))
        base += len(m.vertices)
    if not verts:
        return PackedMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros((0, 3)), np.zeros(0))
    return PackedMesh(
        np.ascontiguousarray(np.vstack(verts)),
        np.ascontiguousarray(np.vstack(tris).astype(np.int64)),
        np.ascontiguousarray(np.vstack(normals)),
        np.ascontiguousarray(np.concatenate(albedo)),
    )


# --- kernels --------------------------------------------------------------------

@nb.njit(cache=True)
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@nb.njit(cache=True)
def _top_left(ax, ay, bx, by):
    # interior lies where the edge function is positive
    dx = bx - ax
    dy = by - ay
    return (dy == 0.0 and dx > 0.0) or dy < 0.0


@nb.njit(cache=True)
def rasterize_triangle(image, inv_depth, xy, depths, shade):
    """Fill one triangle into ``image`` with a z-test against ``inv_depth``.

    Pixel (row i, column j) is sampled at (u, v) = (j, i). Coverage uses edge
    functions with the top-left rule; ``inv_depth`` holds 1/z of the nearest
    surface so far (0 means empty), interpolated linearly in screen space.
    """
    H, W = image.shape
    x0, y0 = xy[0, 0], xy[0, 1]
    x1, y1 = xy[1, 0], xy[1, 1]
    x2, y2 = xy[2, 0], xy[2, 1]
    iz0, iz1, iz2 = 1.0 / depths[0], 1.0 / depths[1], 1.0 / depths[2]
    area = _edge(x0, y0, x1, y1, x2, y2)
    if not (area != 0.0 and math.isfinite(area)):
        return
    if area < 0.0:
        x1, y1, x2, y2 = x2, y2, x1, y1
        iz1, iz2 = iz2, iz1
        area = -area
    tl0 = _top_left(x1, y1, x2, y2)
    tl1 = _top_left(x2, y2, x0, y0)
    tl2 = _top_left(x0, y0, x1, y1)
    jmin = max(0, int(math.ceil(min(x0, x1, x2))))
    jmax = min(W - 1, int(math.floor(max(x0, x1, x2))))
    imin = max(0, int(math.ceil(min(y0, y1, y2))))
    imax = min(H - 1, int(math.floor(max(y0, y1, y2))))
    for i in range(imin, imax + 1):
        py = float(i)
        for j in range(jmin, jmax + 1):
            px = float(j)
            w0 = _edge(x1, y1, x2, y2, px, py)
            if w0 < 0.0 or (w0 == 0.0 and not tl0):
                continue
            w1 = _edge(x2, y2, x0, y0, px, py)
            if w1 < 0.0 or (w1 == 0.0 and not tl1):
                continue
            w2 = _edge(x0, y0, x1, y1, px, py)
            if w2 < 0.0 or (w2 == 0.0 and not tl2):
                continue
            iz = (w0 * iz0 + w1 * iz1 + w2 * iz2) / area
            if iz > inv_depth[i, j]:
                inv_depth[i, j] = iz
                image[i, j] = shade


@nb.njit(cache=True)
def render_into(image, inv_depth, R, t, vertices, triangles, tri_normals, tri_albedo,
                light, ambient, fx, fy, cx, cy):
    """Rasterize a packed mesh placed by model-to-camera transform (R, t)."""
    nv = vertices.shape[0]
    cam = np.empty((nv, 3))
    for k in range(nv):
        for r in range(3):
            cam[k, r] = (R[r, 0] * vertices[k, 0] + R[r, 1] * vertices[k, 1]
                         + R[r, 2] * vertices[k, 2] + t[r])
    xy = np.empty((3, 2))
    depths = np.empty(3)
    for f in range(triangles.shape[0]):
        visible = True
        for c in range(3):
            v = triangles[f, c]
            z = cam[v, 2]
            if z <= NEAR_PLANE:
                visible = False
                break
            xy[c, 0] = fx * cam[v, 0] / z + cx
            xy[c, 1] = fy * cam[v, 1] / z + cy
            depths[c] = z
        if not visible:
            continue
        ndotl = 0.0
        for r in range(3):
            n_r = R[r, 0] * tri_normals[f, 0] + R[r, 1] * tri_normals[f, 1] + R[r, 2] * tri_normals[f, 2]
            ndotl += n_r * light[r]
        shade = tri_albedo[f] * (ambient + (1.0 - ambient) * max(0.0, ndotl))
        shade = min(1.0, max(0.0, shade))
        rasterize_triangle(image, inv_depth, xy, depths, shade)


# --- python-facing API ----------------------------------------------------------

def model_to_camera(positions, rotations, extrinsic: Transform):
    """Stack of (R, t) mapping model points into the camera frame.

    ``positions`` (n, 3) and ``rotations`` (n, 3, 3) place the model in the world.
    Single renders and particle batches both go through here so they agree bit for bit.
    """
    Re, te = extrinsic.rotation, extrinsic.translation
    R = np.einsum("ij,njk->nik", Re, rotations)
    t = np.einsum("ij,nj->ni", Re, positions) + te
    return np.ascontiguousarray(R), np.ascontiguousarray(t)


def new_image(intr: Intrinsics, background=None):
    if background is None:
        image = np.zeros((intr.height, intr.width))
    else:
        image = np.array(background, dtype=float, copy=True)
        if image.shape != (intr.height, intr.width):
            raise ValueError("background does not match the camera resolution")
    return image, np.zeros((intr.height, intr.width))


def draw(image, inv_depth, packed: PackedMesh, R, t, intr: Intrinsics, light, ambient) -> None:
    if len(packed.triangles) == 0:
        return
    render_into(image, inv_depth, R, t, packed.vertices, packed.triangles, packed.tri_normals,
                packed.tri_albedo, np.asarray(light, dtype=float), float(ambient),
                intr.fx, intr.fy, intr.cx, intr.cy)


def render(scene: Scene, pose: Pose, camera: tuple[Intrinsics, Transform]) -> np.ndarray:
    """Predicted image of ``scene`` with its model frame at ``pose``."""
    return render_objects([(scene.packed, transform_from_pose(pose))], camera, scene.light_dir, scene.ambient)


def render_objects(objects, camera: tuple[Intrinsics, Transform], light=None,
                   ambient: float = AMBIENT, background=None) -> np.ndarray:
    """Render several packed meshes sharing one z-buffer.

    ``objects`` is an iterable of ``(PackedMesh, Transform)`` pairs giving each
    mesh's model-to-world placement. ``light`` must be a unit vector (a
    :class:`Scene` normalizes its own); None uses the default direction.
    """
    intr, extrinsic = camera
    light = Scene().light_dir if light is None else np.asarray(light, dtype=float)
    image, inv_depth = new_image(intr, background)
    for packed, placement in objects:
        R, t = model_to_camera(placement.translation[None, :], placement.rotation[None], extrinsic)
        draw(image, inv_depth, packed, R[0], t[0], intr, light, ambient)
    return image
