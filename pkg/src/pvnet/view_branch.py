"""Multi-view branch: one weight-shared CNN applied per view, then max view pooling."""

from __future__ import annotations

import numpy as np

from pvnet import tensor as T
from pvnet.geometry import ViewSet
from pvnet.nn import Dense, ParamStore, he_normal
from pvnet.tensor import DimensionError, DomainError, Tensor

MIN_RESOLUTION = 8


class ViewCNN:
    """conv5x5/2 -> ReLU -> conv3x3/2 -> ReLU -> global average -> FC(D).

    A single parameter set serves every view regardless of how many are fed.
    """

    def __init__(self, store: ParamStore, rng: np.random.Generator, channels=(16, 32), out_dim: int = 256,
                 name: str = "view_cnn"):
        c1, c2 = channels
        self.out_dim = out_dim
        self.w1 = store.add(f"{name}.conv1.weight", he_normal(rng, 25, (c1, 1, 5, 5)), "view_cnn")
        self.b1 = store.add(f"{name}.conv1.bias", np.zeros(c1), "view_cnn")
        self.w2 = store.add(f"{name}.conv2.weight", he_normal(rng, 9 * c1, (c2, c1, 3, 3)), "view_cnn")
        self.b2 = store.add(f"{name}.conv2.bias", np.zeros(c2), "view_cnn")
        self.fc = Dense(store, f"{name}.fc", c2, out_dim, rng, "view_cnn")

    def __call__(self, views: Tensor) -> Tensor:
        """(N, H, W) single-channel views -> (N, D) per-view features."""
        if views.ndim != 3:
            raise DimensionError(f"expected (N, H, W) views, got {views.shape}")
        n, h, w = views.shape
        if h < MIN_RESOLUTION or w < MIN_RESOLUTION:
            raise DimensionError(f"views must be at least {MIN_RESOLUTION}x{MIN_RESOLUTION}, got {h}x{w}")
        x = T.reshape(views, (n, 1, h, w))
        x = T.relu(T.conv2d(x, self.w1, self.b1, stride=2, padding=2))
        x = T.relu(T.conv2d(x, self.w2, self.b2, stride=2, padding=1))
        _, c, ho, wo = x.shape
        pooled = T.mean(T.reshape(x, (n, c, ho * wo)), axis=2)
        return self.fc(pooled)


def view_pool(features: Tensor, batch: int = 1) -> Tensor:
    """Channelwise max over each shape's views: (B*V, D) -> (B, D)."""
    rows, dim = features.shape
    if rows % batch:
        raise DimensionError(f"{rows} view rows do not split into {batch} shapes")
    return T.reduce_max(T.reshape(features, (batch, rows // batch, dim)), axis=1)


def subsample_views(views, wanted: int):
    """Evenly strided subset of a camera ring, preserving azimuth order.

    Accepts a :class:`ViewSet` or a (V, H, W) array and returns the same kind.
    """
    arr = views.views if isinstance(views, ViewSet) else np.asarray(views)
    count = len(arr)
    if wanted < 1 or count % wanted:
        raise DomainError(f"{wanted} views is not an even subset of a {count}-camera ring")
    stride = count // wanted
    if isinstance(views, ViewSet):
        return ViewSet(views.views[::stride].copy(), views.poses[::stride].copy())
    return arr[::stride].copy()
