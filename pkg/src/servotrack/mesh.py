"""Triangle meshes and a reader for the triangulated Wavefront OBJ subset.

Supported records: ``v x y z``, ``vn x y z`` and triangular ``f`` records in
the ``a b c``, ``a//na ...``, ``a/ta ...`` and ``a/ta/na ...`` forms (indices
may be negative, OBJ-relative). Everything else is ignored. Vertices are
split per distinct (position, normal) pair, so hard edges keep their normals.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        where = f"{path}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


class NonTriangulatedFace(ParseError):
    pass


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        V = np.ascontiguousarray(self.vertices, dtype=float).reshape(-1, 3)
        F = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        N = np.ascontiguousarray(self.normals, dtype=float).reshape(-1, 3)
        if len(F) == 0:
            raise ValueError("mesh has no triangles")
        if F.min() < 0 or F.max() >= len(V):
            raise ValueError("triangle index out of range")
        if N.shape != V.shape:
            raise ValueError("need one normal per vertex")
        if np.abs(np.linalg.norm(N, axis=1) - 1.0).max() > 1e-6:
            raise ValueError("normals must be unit length")
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "triangles", F)
        object.__setattr__(self, "normals", N)

    @property
    def face_normals(self) -> np.ndarray:
        """Unit normal per triangle from the corner normals (average, renormalized)."""
        n = self.normals[self.triangles].sum(axis=1)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


def area_weighted_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    V = np.asarray(vertices, dtype=float)
    F = np.asarray(triangles)
    cross = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])  # |cross| = 2 * area
    acc = np.zeros_like(V)
    for k in range(3):
        np.add.at(acc, F[:, k], cross)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    if (norm == 0).any():
        raise ValueError("vertex with zero-area neighbourhood has no normal")
    return acc / norm


def _index(token: str, count: int, lineno: int, path) -> int:
    try:
        i = int(token)
    except ValueError:
        raise ParseError(f"bad index {token!r}", lineno, path) from None
    if i == 0:
        raise ParseError("OBJ indices are 1-based", lineno, path)
    i = i - 1 if i > 0 else count + i
    if not 0 <= i < count:
        raise ParseError(f"index {token} out of range", lineno, path)
    return i


def parse_obj(text: str, path=None) -> TriangleMesh:
    positions: list[list[float]] = []
    normals: list[list[float]] = []
    corners: list[tuple[int, int | None]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag in ("v", "vn"):
            if len(rest) < 3:
                raise ParseError(f"'{tag}' needs 3 coordinates", lineno, path)
            try:
                xyz = [float(t) for t in rest[:3]]
            except ValueError:
                raise ParseError(f"bad coordinate in {raw!r}", lineno, path) from None
            (positions if tag == "v" else normals).append(xyz)
        elif tag == "f":
            if len(rest) != 3:
                raise NonTriangulatedFace(f"face with {len(rest)} vertices", lineno, path)
            for tok in rest:
                parts = tok.split("/")
                vi = _index(parts[0], len(positions), lineno, path)
                ni = None
                if len(parts) == 3 and parts[2]:
                    ni = _index(parts[2], len(normals), lineno, path)
                corners.append((vi, ni))
    if not corners:
        raise ParseError("no faces", None, path)

    P = np.array(positions, dtype=float)
    smooth = None
    if any(ni is None for _, ni in corners):
        smooth = area_weighted_normals(P, np.array([vi for vi, _ in corners]).reshape(-1, 3))
    Nrec = np.array(normals, dtype=float).reshape(-1, 3)
    if len(Nrec):
        lens = np.linalg.norm(Nrec, axis=1, keepdims=True)
        if (lens == 0).any():
            raise ParseError("zero-length vn record", None, path)
        Nrec = Nrec / lens

    lookup: dict[tuple[int, int | None], int] = {}
    verts, norms, tris = [], [], []
    for vi, ni in corners:
        key = (vi, ni)
        if key not in lookup:
            lookup[key] = len(verts)
            verts.append(P[vi])
            norms.append(Nrec[ni] if ni is not None else smooth[vi])
        tris.append(lookup[key])
    return TriangleMesh(np.array(verts), np.array(tris).reshape(-1, 3), np.array(norms))


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    return parse_obj(path.read_text(), path)


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.normals]
    lines += ["f " + " ".join(f"{i + 1}//{i + 1}" for i in tri) for tri in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


_BOX_FACES = [
    # outward normal, 4 corners (counter-clockwise seen from outside) as sign triples
    ((1, 0, 0), [(1, -1, -1), (1, 1, -1), (1, 1, 1), (1, -1, 1)]),
    ((-1, 0, 0), [(-1, -1, -1), (-1, -1, 1), (-1, 1, 1), (-1, 1, -1)]),
    ((0, 1, 0), [(-1, 1, -1), (-1, 1, 1), (1, 1, 1), (1, 1, -1)]),
    ((0, -1, 0), [(-1, -1, -1), (1, -1, -1), (1, -1, 1), (-1, -1, 1)]),
    ((0, 0, 1), [(-1, -1, 1), (1, -1, 1), (1, 1, 1), (-1, 1, 1)]),
    ((0, 0, -1), [(-1, -1, -1), (-1, 1, -1), (1, 1, -1), (1, -1, -1)]),
]


def box_mesh(size, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Axis-aligned box with flat per-face normals."""
    half = np.asarray(size, dtype=float) / 2
    c = np.asarray(center, dtype=float)
    verts, norms, tris = [], [], []
    for n, quad in _BOX_FACES:
        base = len(verts)
        for s in quad:
            verts.append(c + half * np.array(s))
            norms.append(n)
        tris += [(base, base + 1, base + 2), (base, base + 2, base + 3)]
    return TriangleMesh(np.array(verts), np.array(tris), np.array(norms, dtype=float))


def convex_hull_mesh(points) -> TriangleMesh:
    """Flat-shaded mesh of the convex hull of ``points`` (used for clutter)."""
    from scipy.spatial import ConvexHull

    P = np.asarray(points, dtype=float)
    hull = ConvexHull(P)
    verts, norms, tris = [], [], []
    inside = P[hull.vertices].mean(axis=0)
    for simplex in hull.simplices:
        a, b, c = P[simplex]
        n = np.cross(b - a, c - a)
        n /= np.linalg.norm(n)
        if n @ (a - inside) < 0:
            n = -n
            b, c = c, b
        base = len(verts)
        verts += [a, b, c]
        norms += [n, n, n]
        tris.append((base, base + 1, base + 2))
    return TriangleMesh(np.array(verts), np.array(tris), np.array(norms))
