"""Dataset manifest, the per-shape artifact cache, and in-memory shape records."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pvnet import geometry, pvt
from pvnet.point_branch import knn_graph

log = logging.getLogger(__name__)


@dataclass
class ManifestEntry:
    id: str
    cls: str
    split: str
    mesh_path: str

    def to_json(self) -> dict:
        return {"id": self.id, "class": self.cls, "split": self.split, "mesh_path": self.mesh_path}


class DatasetManifest:
    """Split-labelled index of shapes, stored as JSON ``{"shapes": [{id, class, split, mesh_path}]}``.

    Relative mesh paths resolve against the manifest's directory.
    """

    def __init__(self, entries: list[ManifestEntry], root: str | os.PathLike = "."):
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate shape ids in manifest")
        self.entries = list(entries)
        self.root = Path(root)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        with open(path) as fh:
            doc = json.load(fh)
        items = doc["shapes"] if isinstance(doc, dict) else doc
        entries = []
        for item in items:
            missing = {"id", "class", "split", "mesh_path"} - set(item)
            if missing:
                raise ValueError(f"manifest entry {item!r} lacks {sorted(missing)}")
            entries.append(ManifestEntry(str(item["id"]), str(item["class"]), str(item["split"]), str(item["mesh_path"])))
        return cls(entries, root=path.parent)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump({"shapes": [e.to_json() for e in self.entries]}, fh, indent=1)

    @property
    def classes(self) -> list[str]:
        return sorted({e.cls for e in self.entries})

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def mesh_file(self, entry: ManifestEntry) -> Path:
        p = Path(entry.mesh_path)
        return p if p.is_absolute() else self.root / p


@dataclass
class Shape:
    """One preprocessed sample: normalized points, its kNN graph and the rendered views."""

    id: str
    label: int
    points: np.ndarray  # (n, 3) float32
    views: np.ndarray  # (V, H, W) float32
    neighbors: dict = field(default_factory=dict)  # k -> (n, k) int64

    def knn(self, k: int) -> np.ndarray:
        if k not in self.neighbors:
            self.neighbors[k] = knn_graph(self.points, k)
        return self.neighbors[k]


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def prep_shape(mesh_path: Path, n_points: int, n_views: int, height: int, width: int,
               seed: int) -> tuple[np.ndarray, np.ndarray]:
    mesh = geometry.read_off(mesh_path)
    points = geometry.sample_points(mesh, n_points, seed).points.astype(np.float32)
    views = geometry.render_views(geometry.normalize_mesh(mesh), geometry.camera_ring(n_views), height, width).views
    return points, views


def prepare_cache(manifest: DatasetManifest, cache_dir: str | os.PathLike, n_points: int = 1024,
                  n_views: int = 12, height: int = 64, width: int = 64, seed: int = 0) -> dict:
    """Write ``<id>.points.pvt`` / ``<id>.views.pvt`` per shape plus ``index.json``.

    Entries whose mesh digest and settings match the existing index are skipped.
    Returns a summary with ``written``, ``skipped`` and ``failed`` id lists.
    """
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    index_path = cache / "index.json"
    index = {}
    if index_path.exists():
        with open(index_path) as fh:
            index = json.load(fh).get("shapes", {})
    settings = {"n_points": n_points, "n_views": n_views, "height": height, "width": width, "seed": seed}
    summary = {"written": [], "skipped": [], "failed": {}}
    for entry in manifest.entries:
        mesh_path = manifest.mesh_file(entry)
        try:
            digest = _file_digest(mesh_path)
        except OSError as exc:
            summary["failed"][entry.id] = str(exc)
            continue
        pts_file, view_file = cache / f"{entry.id}.points.pvt", cache / f"{entry.id}.views.pvt"
        prev = index.get(entry.id)
        if (prev and prev["mesh_sha256"] == digest and prev["settings"] == settings
                and pts_file.exists() and view_file.exists()):
            summary["skipped"].append(entry.id)
            continue
        try:
            # per-shape seed keeps entries independent of manifest order
            shape_seed = int.from_bytes(hashlib.sha256(f"{seed}:{entry.id}".encode()).digest()[:8], "little")
            points, views = prep_shape(mesh_path, n_points, n_views, height, width, shape_seed)
        except (OSError, ValueError) as exc:
            summary["failed"][entry.id] = str(exc)
            continue
        pvt.save(pts_file, points)
        pvt.save(view_file, views)
        index[entry.id] = {"mesh_sha256": digest, "settings": settings, "class": entry.cls, "split": entry.split,
                           "points": pts_file.name, "views": view_file.name}
        summary["written"].append(entry.id)
    with open(index_path, "w") as fh:
        json.dump({"shapes": index}, fh, indent=1, sort_keys=True)
    for sid, err in summary["failed"].items():
        log.error("failed to prepare %s: %s", sid, err)
    return summary


def load_split(manifest: DatasetManifest, cache_dir: str | os.PathLike, split: str,
               classes: list[str] | None = None) -> list[Shape]:
    cache = Path(cache_dir)
    classes = classes or manifest.classes
    label_of = {c: i for i, c in enumerate(classes)}
    shapes = []
    for entry in manifest.split(split):
        points = pvt.load(cache / f"{entry.id}.points.pvt").astype(np.float32)
        views = pvt.load(cache / f"{entry.id}.views.pvt").astype(np.float32)
        shapes.append(Shape(entry.id, label_of[entry.cls], points, views))
    return shapes
