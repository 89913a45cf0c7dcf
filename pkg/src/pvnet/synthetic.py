"""Procedural 4-class corpus: spheres, boxes, cylinders and tori with random proportions."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from pvnet.dataset import DatasetManifest, ManifestEntry
from pvnet.geometry import Mesh, write_off

CLASSES = ("sphere", "box", "cylinder", "torus")


def uv_sphere(n_lat: int = 12, n_lon: int = 20) -> Mesh:
    verts = [(0.0, 0.0, 1.0)]
    for i in range(1, n_lat):
        theta = np.pi * i / n_lat
        for j in range(n_lon):
            phi = 2 * np.pi * j / n_lon
            verts.append((np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)))
    verts.append((0.0, 0.0, -1.0))
    faces = []
    ring = lambda i, j: 1 + (i - 1) * n_lon + (j % n_lon)
    for j in range(n_lon):
        faces.append((0, ring(1, j), ring(1, j + 1)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces += [(a, c, d), (a, d, b)]
    south = len(verts) - 1
    for j in range(n_lon):
        faces.append((south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    return Mesh(np.array(verts), np.array(faces))


def box(subdiv: int = 4) -> Mesh:
    """Axis-aligned cube [-1, 1]^3 with each face split into a subdiv x subdiv grid."""
    verts, faces = [], []
    g = np.linspace(-1, 1, subdiv + 1)
    for axis in range(3):
        for sign in (-1.0, 1.0):
            base = len(verts)
            for a in g:
                for b in g:
                    p = [0.0, 0.0, 0.0]
                    p[axis] = sign
                    p[(axis + 1) % 3] = a
                    p[(axis + 2) % 3] = b
                    verts.append(p)
            for i in range(subdiv):
                for j in range(subdiv):
                    v00 = base + i * (subdiv + 1) + j
                    v01, v10, v11 = v00 + 1, v00 + subdiv + 1, v00 + subdiv + 2
                    faces += [(v00, v10, v11), (v00, v11, v01)] if sign > 0 else [(v00, v11, v10), (v00, v01, v11)]
    return Mesh(np.array(verts), np.array(faces))


def cylinder(n_seg: int = 24, n_h: int = 4) -> Mesh:
    verts, faces = [], []
    for i in range(n_h + 1):
        z = -1 + 2 * i / n_h
        for j in range(n_seg):
            phi = 2 * np.pi * j / n_seg
            verts.append((np.cos(phi), np.sin(phi), z))
    idx = lambda i, j: i * n_seg + (j % n_seg)
    for i in range(n_h):
        for j in range(n_seg):
            faces += [(idx(i, j), idx(i, j + 1), idx(i + 1, j + 1)), (idx(i, j), idx(i + 1, j + 1), idx(i + 1, j))]
    bottom, top = len(verts), len(verts) + 1
    verts += [(0.0, 0.0, -1.0), (0.0, 0.0, 1.0)]
    for j in range(n_seg):
        faces.append((bottom, idx(0, j + 1), idx(0, j)))
        faces.append((top, idx(n_h, j), idx(n_h, j + 1)))
    return Mesh(np.array(verts), np.array(faces))


def torus(major: float = 1.0, minor: float = 0.35, n_major: int = 24, n_minor: int = 12) -> Mesh:
    verts = []
    for i in range(n_major):
        u = 2 * np.pi * i / n_major
        for j in range(n_minor):
            v = 2 * np.pi * j / n_minor
            r = major + minor * np.cos(v)
            verts.append((r * np.cos(u), r * np.sin(u), minor * np.sin(v)))
    idx = lambda i, j: (i % n_major) * n_minor + (j % n_minor)
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            faces += [(idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)), (idx(i, j), idx(i + 1, j + 1), idx(i, j + 1))]
    return Mesh(np.array(verts), np.array(faces))


def _rotation(rng: np.random.Generator, tilt_deg: float) -> np.ndarray:
    yaw = rng.uniform(0, 2 * np.pi)
    tilt = np.deg2rad(rng.uniform(-tilt_deg, tilt_deg))
    rz = np.array([[np.cos(yaw), -np.sin(yaw), 0], [np.sin(yaw), np.cos(yaw), 0], [0, 0, 1]])
    rx = np.array([[1, 0, 0], [0, np.cos(tilt), -np.sin(tilt)], [0, np.sin(tilt), np.cos(tilt)]])
    return rz @ rx


def make_shape(kind: str, rng: np.random.Generator, tilt_deg: float = 25.0) -> Mesh:
    """One randomized instance of ``kind``: anisotropic scale, yaw, small tilt, vertex jitter."""
    if kind == "sphere":
        mesh = uv_sphere()
        scale = rng.uniform(0.75, 1.0, size=3)
    elif kind == "box":
        mesh = box()
        scale = rng.uniform(0.45, 1.0, size=3)
    elif kind == "cylinder":
        mesh = cylinder()
        r = rng.uniform(0.4, 0.8)
        scale = np.array([r, r, rng.uniform(0.6, 1.2)])
    elif kind == "torus":
        mesh = torus(minor=rng.uniform(0.25, 0.45))
        scale = np.array([1.0, rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.2)])
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    verts = mesh.vertices * scale
    verts = verts + rng.normal(scale=0.01, size=verts.shape)
    verts = verts @ _rotation(rng, tilt_deg).T
    return Mesh(verts, mesh.faces)


def build_corpus(root: str | os.PathLike, n_train: int = 200, n_test: int = 80, seed: int = 0,
                 classes=CLASSES) -> DatasetManifest:
    """Write OFF meshes plus ``manifest.json`` under ``root``; classes are balanced per split."""
    root = Path(root)
    (root / "meshes").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for split, total in (("train", n_train), ("test", n_test)):
        for i in range(total):
            kind = classes[i % len(classes)]
            shape_id = f"{split}_{kind}_{i // len(classes):04d}"
            path = root / "meshes" / f"{shape_id}.off"
            write_off(path, make_shape(kind, rng))
            entries.append(ManifestEntry(shape_id, kind, split, f"meshes/{shape_id}.off"))
    manifest = DatasetManifest(entries, root=root)
    manifest.save(root / "manifest.json")
    return manifest
