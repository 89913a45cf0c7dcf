"""Attention embedding fusion of the pooled view feature into point features.

The view descriptor is embedded by one affine layer, tiled onto every point
and concatenated (``phi``), mapped per point by a two-layer MLP, squashed by
``xi = sigmoid(log(|.|))`` into a soft mask in (0, 1), and applied to the
EdgeConv output as ``E * (1 + M)``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from pvnet import pvt
from pvnet import tensor as T
from pvnet.nn import Dense, ParamStore
from pvnet.point_branch import EdgeConv
from pvnet.tensor import DimensionError, Tensor

XI_EPS = 1e-30


class Embed:
    """Affine projection of the pooled view feature, (B, D) -> (B, K); no nonlinearity."""

    def __init__(self, store: ParamStore, rng: np.random.Generator, in_dim: int, out_dim: int = 64,
                 name: str = "embed"):
        self.lin = Dense(store, name, in_dim, out_dim, rng, "embed")

    def __call__(self, view_feat: Tensor) -> Tensor:
        if view_feat.ndim != 2 or view_feat.shape[1] != self.lin.n_in:
            raise DimensionError(f"embed expects (B, {self.lin.n_in}), got {view_feat.shape}")
        return self.lin(view_feat)


def phi(p: Tensor, v: Tensor) -> Tensor:
    """Tile each shape's embedded vector over its points and append it per point.

    ``p`` is (B*n, C), ``v`` is (B, K); the result is (B*n, C+K).
    """
    rows = p.shape[0]
    batch = v.shape[0]
    if rows % batch:
        raise DimensionError(f"{rows} point rows do not split into {batch} shapes")
    return T.concat([p, T.repeat_rows(v, rows // batch)], axis=1)


def xi(x: Tensor) -> Tensor:
    # eps keeps log finite at 0 and is absorbed exactly by any |x| near 1
    return T.sigmoid(T.log(T.abs(x) + XI_EPS))


def late_concat(point_global: Tensor, v_embed: Tensor) -> Tensor:
    return T.concat([point_global, v_embed], axis=1)


class AttentionFusionBlock:
    """Convention path E = EdgeConv(p); mask path M = xi(MLP(phi(p, v))); output E * (1 + M)."""

    def __init__(self, store: ParamStore, rng: np.random.Generator, name: str, c_in: int, c_out: int,
                 embed_dim: int):
        self.c_in, self.c_out = c_in, c_out
        self.edge = EdgeConv(store, f"{name}.edge", c_in, c_out, rng, group="point")
        hidden = (c_in + embed_dim) // 2
        self.mask_mlp = [Dense(store, f"{name}.mask1", c_in + embed_dim, hidden, rng, "fusion"),
                         Dense(store, f"{name}.mask2", hidden, c_out, rng, "fusion")]

    def mask(self, p: Tensor, v: Tensor) -> Tensor:
        joined = phi(p, v)
        if joined.shape[1] != self.mask_mlp[0].n_in:
            raise DimensionError(f"mask MLP expects width {self.mask_mlp[0].n_in}, got {joined.shape[1]}")
        pre = self.mask_mlp[1](T.relu(self.mask_mlp[0](joined)))
        return xi(pre)

    def __call__(self, p: Tensor, v: Tensor, nbrs: np.ndarray, mask_override: float | None = None
                 ) -> tuple[Tensor, Tensor | None]:
        e = self.edge(p, nbrs)
        if mask_override is not None:
            m = Tensor(np.full(e.shape, mask_override), dtype=e.dtype)
        else:
            m = self.mask(p, v)
        if m.shape != e.shape:
            raise DimensionError(f"mask {m.shape} and EdgeConv output {e.shape} disagree")
        return e * (m + 1.0), m


def export_masks(model, points: np.ndarray, views: np.ndarray, out_dir: str | os.PathLike, shape_id: str,
                 k: int | None = None) -> list[Path]:
    """Write each fusion block's (n, M') mask and the point coordinates as PVT1 files.

    Every mask file gets a JSON sidecar ``{shape_id, block, n, channels}``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with T.no_grad():
        result = model.forward_shapes([points], [views], k=k)
    written = []
    coords = out / f"{shape_id}.points.pvt"
    pvt.save(coords, np.asarray(points, dtype=np.float32))
    written.append(coords)
    for i, m in enumerate(result.masks, start=1):
        path = out / f"{shape_id}.mask{i}.pvt"
        pvt.save(path, m.data.astype(np.float32))
        meta = {"shape_id": shape_id, "block": i, "n": int(m.shape[0]), "channels": int(m.shape[1])}
        with open(path.with_suffix(".json"), "w") as fh:
            json.dump(meta, fh)
        written.append(path)
    return written
