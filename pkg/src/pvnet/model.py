"""End-to-end network: point branch, view branch, attention fusion and the three-layer head.

Arms:

* ``full``: transform -> EdgeConv x2 -> attention fusion block x2 -> head with late concat.
* ``late_fusion``: as ``full`` with the mask path removed (blocks become plain EdgeConv).
* ``point_only``: transform -> EdgeConv x4 -> head.
* ``view_only``: view CNN -> view pool -> head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from pvnet import tensor as T
from pvnet.fusion import AttentionFusionBlock, Embed, late_concat
from pvnet.nn import Dense, ParamStore
from pvnet.point_branch import (
    EdgeConv,
    PointBatch,
    SpatialTransform,
    knn_graph,
    orthogonality_penalty,
    point_global_feature,
)
from pvnet.tensor import Tensor
from pvnet.view_branch import ViewCNN, view_pool

ARMS = ("full", "late_fusion", "point_only", "view_only")


@dataclass
class ModelConfig:
    arm: str = "full"
    n_classes: int = 4
    k: int = 20
    edge_widths: tuple = (64, 64)
    block_widths: tuple = (128, 256)
    embed_dim: int = 64
    view_channels: tuple = (16, 32)
    view_dim: int = 256
    fc_widths: tuple = (512, 512)
    transform_widths: tuple = (32, 64, 32)

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ValueError(f"unknown arm {self.arm!r}; choose from {ARMS}")
        for name in ("edge_widths", "block_widths", "view_channels", "fc_widths", "transform_widths"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.edge_widths) != 2 or len(self.block_widths) != 2 or len(self.fc_widths) != 2:
            raise ValueError("expected two EdgeConv widths, two block widths and two hidden FC widths")

    @property
    def uses_points(self) -> bool:
        return self.arm != "view_only"

    @property
    def uses_views(self) -> bool:
        return self.arm != "point_only"

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class ForwardResult:
    logits: Tensor  # (B, C)
    feature: Tensor  # (B, fc_widths[-1]) input to the final FC
    masks: list = field(default_factory=list)  # per fusion block, (B*n, M')
    transform: Tensor | None = None  # (B, 3, 3)


class PVNet:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.params = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        cfg = config
        store = self.params
        self.transform = self.edges = self.blocks = self.view_cnn = self.embed = None

        head_in = 0
        if cfg.uses_points:
            self.transform = SpatialTransform(store, rng, widths=cfg.transform_widths)
            w1, w2 = cfg.edge_widths
            b1, b2 = cfg.block_widths
            self.edges = [EdgeConv(store, "edge1", 3, w1, rng), EdgeConv(store, "edge2", w1, w2, rng)]
            if cfg.arm == "full":
                self.blocks = [AttentionFusionBlock(store, rng, "block1", w2, b1, cfg.embed_dim),
                               AttentionFusionBlock(store, rng, "block2", b1, b2, cfg.embed_dim)]
            else:
                # same names as the blocks' convention path so weights transfer between arms
                self.blocks = [EdgeConv(store, "block1.edge", w2, b1, rng), EdgeConv(store, "block2.edge", b1, b2, rng)]
            head_in = w1 + w2 + b1 + b2
        if cfg.uses_views:
            self.view_cnn = ViewCNN(store, rng, cfg.view_channels, cfg.view_dim)
            if cfg.uses_points:
                self.embed = Embed(store, rng, cfg.view_dim, cfg.embed_dim)
            else:
                head_in = cfg.view_dim
        f1, f2 = cfg.fc_widths
        late = cfg.embed_dim if self.embed is not None else 0
        self.fc = [Dense(store, "fc1", head_in, f1, rng, "classifier"),
                   Dense(store, "fc2", f1 + late, f2, rng, "classifier"),
                   Dense(store, "fc3", f2, cfg.n_classes, rng, "classifier")]
        # small output layer keeps initial logits near uniform
        self.fc[2].weight.data *= 0.1

    @property
    def dtype(self):
        return self.params.dtype

    def forward(self, points: PointBatch | None, views: Tensor | None, batch: int,
                mask_override: float | None = None) -> ForwardResult:
        """Run the network on a batch of ``batch`` shapes.

        ``views`` is (B*V, H, W) with each shape's V views contiguous.
        """
        cfg = self.config
        v_embed = None
        if cfg.uses_views:
            if views is None:
                raise ValueError(f"arm {cfg.arm!r} needs views")
            per_view = self.view_cnn(views)
            pooled = view_pool(per_view, batch)
            if self.embed is not None:
                v_embed = self.embed(pooled)
        masks, mat = [], None
        if cfg.uses_points:
            if points is None:
                raise ValueError(f"arm {cfg.arm!r} needs points")
            nbrs = points.nbrs
            aligned, mat = self.transform(points.points, batch)
            x1 = self.edges[0](aligned, nbrs)
            x2 = self.edges[1](x1, nbrs)
            if cfg.arm == "full":
                x3, m1 = self.blocks[0](x2, v_embed, nbrs, mask_override)
                x4, m2 = self.blocks[1](x3, v_embed, nbrs, mask_override)
                masks = [m1, m2]
            else:
                x3 = self.blocks[0](x2, nbrs)
                x4 = self.blocks[1](x3, nbrs)
            head = point_global_feature(T.concat([x1, x2, x3, x4], axis=1), batch)
        else:
            head = pooled
        h = T.relu(self.fc[0](head))
        if v_embed is not None:
            h = late_concat(h, v_embed)
        feature = T.relu(self.fc[1](h))
        logits = self.fc[2](feature)
        return ForwardResult(logits, feature, masks, mat)

    def batch_inputs(self, clouds: list[np.ndarray] | None, view_stacks: list[np.ndarray] | None,
                     graphs: list[np.ndarray] | None = None, k: int | None = None):
        k = k or self.config.k
        pts = None
        if self.config.uses_points:
            if graphs is None:
                graphs = [knn_graph(c, k) for c in clouds]
            pts = PointBatch.from_clouds([np.asarray(c, dtype=self.dtype) for c in clouds], k, graphs, dtype=self.dtype)
        views = None
        if self.config.uses_views:
            views = Tensor(np.concatenate([np.asarray(v) for v in view_stacks], axis=0), dtype=self.dtype)
        return pts, views

    def forward_shapes(self, clouds, view_stacks, graphs=None, k: int | None = None,
                       mask_override: float | None = None) -> ForwardResult:
        pts, views = self.batch_inputs(clouds, view_stacks, graphs, k)
        batch = len(clouds) if clouds is not None else len(view_stacks)
        return self.forward(pts, views, batch, mask_override)

    def loss(self, result: ForwardResult, labels, ortho_weight: float = 1e-3) -> Tensor:
        """Cross entropy plus the weighted orthogonality penalty of the spatial transform."""
        loss = T.softmax_cross_entropy(result.logits, labels)
        if result.transform is not None and ortho_weight:
            loss = loss + orthogonality_penalty(result.transform) * ortho_weight
        return loss
