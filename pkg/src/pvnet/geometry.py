"""Mesh ingestion and the two input modalities: point clouds and rendered view stacks."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from pvnet._kernels import rasterize_kernel
from pvnet.tensor import DomainError

DEFAULT_ELEVATION = 30.0
# unit sphere spans this fraction of the frame
FRAME_FILL = 0.8
# orthographic camera distance from the origin, in normalized units
CAMERA_DISTANCE = 2.0


class OffParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3)

    @property
    def n(self) -> int:
        return len(self.points)


@dataclass
class ViewSet:
    views: np.ndarray  # (V, H, W) float32 in [0, 1]
    poses: np.ndarray  # (V, 2) azimuth, elevation in degrees

    def __post_init__(self):
        if len(self.views) != len(self.poses):
            raise ValueError(f"{len(self.views)} views but {len(self.poses)} poses")


# --- OFF ------------------------------------------------------------------------

def parse_off(data: bytes | str) -> Mesh:
    """Parse ASCII OFF text. Polygons are fan-triangulated; '#' starts a comment."""
    text = data.decode("utf-8", errors="replace") if isinstance(data, (bytes, bytearray)) else data
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if body:
            lines.append((lineno, body))
    if not lines:
        raise OffParseError("empty file", 1)

    lineno, first = lines[0]
    if not first.startswith("OFF"):
        raise OffParseError(f"expected OFF header, found {first[:20]!r}", lineno)
    rest = first[3:].strip()
    pos = 1
    if not rest:
        if len(lines) < 2:
            raise OffParseError("missing counts line", lineno)
        lineno, rest = lines[1]
        pos = 2
    try:
        counts = [int(tok) for tok in rest.split()]
    except ValueError:
        raise OffParseError(f"malformed counts line {rest!r}", lineno) from None
    if len(counts) < 2 or min(counts[:2]) < 0:
        raise OffParseError(f"counts line needs vertex and face counts, got {rest!r}", lineno)
    n_vert, n_face = counts[0], counts[1]

    if len(lines) < pos + n_vert + n_face:
        last = lines[-1][0] if lines else 1
        raise OffParseError(f"truncated: expected {n_vert} vertices and {n_face} faces", last)

    verts = np.empty((n_vert, 3))
    for i in range(n_vert):
        lineno, body = lines[pos + i]
        toks = body.split()
        if len(toks) < 3:
            raise OffParseError("vertex needs 3 coordinates", lineno)
        try:
            verts[i] = [float(t) for t in toks[:3]]
        except ValueError:
            raise OffParseError(f"bad vertex {body!r}", lineno) from None
    pos += n_vert

    tris = []
    for i in range(n_face):
        lineno, body = lines[pos + i]
        try:
            toks = [int(t) for t in body.split()]
        except ValueError:
            # trailing colour components may be floats; only the leading counts matter
            toks = body.split()
            try:
                k = int(toks[0])
                toks = [k] + [int(t) for t in toks[1:k + 1]]
            except (ValueError, IndexError):
                raise OffParseError(f"bad face {body!r}", lineno) from None
        if not toks:
            raise OffParseError("empty face", lineno)
        k = toks[0]
        idx = toks[1:k + 1]
        if k < 3 or len(idx) != k:
            raise OffParseError(f"face declares {k} vertices but lists {len(idx)}", lineno)
        for v in idx:
            if not 0 <= v < n_vert:
                raise OffParseError(f"face index {v} out of range for {n_vert} vertices", lineno)
        for j in range(1, k - 1):
            tri = (idx[0], idx[j], idx[j + 1])
            if len(set(tri)) == 3:
                tris.append(tri)
    return Mesh(verts, np.array(tris, dtype=np.int64).reshape(-1, 3))


def read_off(path: str | os.PathLike) -> Mesh:
    with open(path, "rb") as fh:
        return parse_off(fh.read())


def write_off(path: str | os.PathLike, mesh: Mesh) -> None:
    with open(path, "w") as fh:
        fh.write(f"OFF\n{len(mesh.vertices)} {len(mesh.faces)} 0\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


# --- normalization ----------------------------------------------------------------

def normalize(points: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale so the farthest point has norm 1."""
    pts = np.asarray(points, dtype=np.float64)
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt((centered ** 2).sum(axis=1)).max()
    return centered / radius if radius > 0 else centered


def normalize_mesh(mesh: Mesh) -> Mesh:
    """Center on the area-weighted surface centroid and fit inside the unit sphere."""
    areas = mesh.face_areas()
    if areas.sum() > 0:
        tri_centers = mesh.vertices[mesh.faces].mean(axis=1)
        center = (tri_centers * areas[:, None]).sum(axis=0) / areas.sum()
    else:
        center = mesh.vertices.mean(axis=0)
    verts = mesh.vertices - center
    radius = np.sqrt((verts ** 2).sum(axis=1)).max()
    if radius > 0:
        verts = verts / radius
    return Mesh(verts, mesh.faces.copy())


def _canonical_faces(faces: np.ndarray) -> np.ndarray:
    # rotate each triangle so its smallest index leads (orientation preserved), then sort rows
    shift = np.argmin(faces, axis=1)
    rows = np.arange(len(faces))[:, None]
    rolled = faces[rows, (np.arange(3)[None, :] + shift[:, None]) % 3]
    order = np.lexsort(rolled.T[::-1])
    return rolled[order]


# --- sampling ---------------------------------------------------------------------

def sample_surface(mesh: Mesh, n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Area-weighted surface samples in model units.

    Returns (points, face_rows, barycentric) where ``face_rows`` index the
    canonically ordered face list and ``barycentric`` holds (n, 3) weights.
    """
    if n < 1:
        raise DomainError("need at least one sample")
    faces = _canonical_faces(mesh.faces)
    if len(faces) == 0:
        raise DomainError("mesh has no faces")
    canon = Mesh(mesh.vertices, faces)
    areas = canon.face_areas()
    total = areas.sum()
    if not total > 0:
        raise DomainError("mesh has no non-degenerate triangle")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas) / total
    rows = np.searchsorted(cdf, rng.random(n), side="right")
    rows = np.minimum(rows, len(faces) - 1)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    bary = np.stack([1 - u - v, u, v], axis=1)
    tri = mesh.vertices[faces[rows]]  # (n, 3, 3)
    points = np.einsum("nk,nkd->nd", bary, tri)
    return points, rows, bary


def sample_points(mesh: Mesh, n: int, seed: int) -> PointCloud:
    points, _, _ = sample_surface(mesh, n, seed)
    return PointCloud(normalize(points))


def subsample_points(pc: PointCloud, m: int, seed: int) -> PointCloud:
    """Uniform subset of ``m`` distinct points, kept in original order, without rescaling."""
    if not 1 <= m <= pc.n:
        raise DomainError(f"cannot take {m} of {pc.n} points")
    idx = np.sort(np.random.default_rng(seed).choice(pc.n, size=m, replace=False))
    return PointCloud(pc.points[idx].copy())


# --- rendering --------------------------------------------------------------------

def camera_ring(count: int, elevation: float = DEFAULT_ELEVATION) -> np.ndarray:
    """(count, 2) array of (azimuth, elevation) in degrees, azimuths evenly spaced from 0."""
    if count < 1:
        raise DomainError("camera count must be >= 1")
    az = np.arange(count) * (360.0 / count)
    return np.stack([az, np.full(count, float(elevation))], axis=1)


def camera_frame(azimuth: float, elevation: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(towards_camera, right, up) unit vectors for a pose; z is the vertical axis."""
    a, e = np.deg2rad(azimuth), np.deg2rad(elevation)
    toward = np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
    right = np.array([-np.sin(a), np.cos(a), 0.0])
    up = np.array([-np.sin(e) * np.cos(a), -np.sin(e) * np.sin(a), np.cos(e)])
    return toward, right, up


def render_view(mesh: Mesh, azimuth: float, elevation: float, height: int, width: int) -> np.ndarray:
    toward, right, up = camera_frame(azimuth, elevation)
    v = mesh.vertices
    px = (v @ right * FRAME_FILL + 1.0) * (width / 2.0)
    py = (1.0 - v @ up * FRAME_FILL) * (height / 2.0)
    depth = CAMERA_DISTANCE - v @ toward
    zbuf = rasterize_kernel(px, py, depth, np.ascontiguousarray(mesh.faces), height, width)
    img = np.zeros((height, width), dtype=np.float32)
    hit = np.isfinite(zbuf)
    img[hit] = np.clip(1.0 / np.maximum(zbuf[hit], 1.0), 0.0, 1.0)
    return img


def render_views(mesh: Mesh, poses, height: int = 64, width: int = 64) -> ViewSet:
    """Orthographic inverse-depth renders of a normalized mesh, one per pose.

    Pixels hold 1 / (distance to the nearest surface) with the camera two
    units from the origin, so surfaces land in [1/3, 1] and background is 0.
    """
    if height < 8 or width < 8:
        raise DomainError("render resolution must be at least 8x8")
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, 2)
    views = np.stack([render_view(mesh, az, el, height, width) for az, el in poses])
    return ViewSet(views, poses)


def rotate_z(mesh: Mesh, degrees: float) -> Mesh:
    t = np.deg2rad(degrees)
    rot = np.array([[np.cos(t), -np.sin(t), 0.0], [np.sin(t), np.cos(t), 0.0], [0.0, 0.0, 1.0]])
    return Mesh(mesh.vertices @ rot.T, mesh.faces.copy())
