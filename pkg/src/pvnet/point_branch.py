"""Point-cloud branch: kNN graphs, EdgeConv, the 3x3 spatial transform, global pooling.

Shapes in a batch are stacked row-wise: ``B`` clouds of ``n`` points become a
``(B*n, C)`` tensor, and neighbour indices are offset into that stacked frame
so every per-point operation treats the batch as one large graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pvnet import tensor as T
from pvnet.nn import Dense, ParamStore, mlp
from pvnet.tensor import DimensionError, DomainError, Tensor


def knn_graph(points, k: int) -> np.ndarray:
    """Exact Euclidean k nearest neighbours, excluding each point itself.

    Row ``i`` is sorted by ascending distance, ties by ascending index.
    Distances are computed in float64 coordinate by coordinate.
    """
    pts = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=np.float64)
    n = len(pts)
    if not 1 <= k < n:
        raise DomainError(f"k={k} requires 1 <= k < n={n}")
    d2 = np.zeros((n, n))
    for f in range(pts.shape[1]):
        diff = pts[:, None, f] - pts[None, :, f]
        d2 += diff * diff
    np.fill_diagonal(d2, np.inf)
    if k < n - 1:
        # partition first, then resolve the cut exactly: keep everything up to the k-th distance
        part = np.partition(d2, k - 1, axis=1)[:, k - 1:k]
        cand = d2 <= part
        out = np.empty((n, k), dtype=np.int64)
        for i in range(n):
            js = np.flatnonzero(cand[i])
            order = np.lexsort((js, d2[i, js]))
            out[i] = js[order[:k]]
        return out
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def batch_neighbors(graphs: list[np.ndarray]) -> np.ndarray:
    """Stack per-shape neighbour tables with row offsets into the stacked frame."""
    out, offset = [], 0
    for g in graphs:
        out.append(g + offset)
        offset += len(g)
    return np.concatenate(out, axis=0)


def edge_features(x: Tensor, nbrs: np.ndarray) -> Tensor:
    """(n, k, 2C) tensor whose entry (i, j) is concat(x_i, x_nbr - x_i)."""
    nbrs = np.asarray(nbrs)
    if nbrs.ndim != 2 or len(nbrs) != x.shape[0] or nbrs.min() < 0 or nbrs.max() >= x.shape[0]:
        raise ValueError(f"neighbour table {nbrs.shape} inconsistent with {x.shape[0]} points")
    n, k = nbrs.shape
    centre = T.gather_rows(x, np.repeat(np.arange(n)[:, None], k, axis=1))
    return T.concat([centre, T.gather_rows(x, nbrs) - centre], axis=2)


class EdgeConv:
    """h(x_i, x_j) = relu(W [x_i, x_j - x_i] + b), max-pooled over the k neighbours.

    The weight is stored as one (2C, M) matrix. The forward pass uses the
    exact factorisation ``W [x_i, x_j - x_i] = (W_c - W_d) x_i + W_d x_j``
    so the per-edge tensor is never materialised; ``reference`` evaluates the
    edge form literally.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, rng: np.random.Generator,
                 group: str = "point"):
        self.c_in, self.c_out = c_in, c_out
        self.lin = Dense(store, name, 2 * c_in, c_out, rng, group)

    @property
    def weight(self) -> Tensor:
        return self.lin.weight

    @property
    def bias(self) -> Tensor:
        return self.lin.bias

    def _check(self, x: Tensor) -> None:
        if x.ndim != 2 or x.shape[1] != self.c_in:
            raise DimensionError(f"EdgeConv expects (n, {self.c_in}) input, got {x.shape}")

    def __call__(self, x: Tensor, nbrs: np.ndarray, diff_only: bool = False) -> Tensor:
        self._check(x)
        w_centre, w_diff = T.split(self.weight, [self.c_in, self.c_in], axis=0)
        to_neighbour = T.matmul(x, w_diff)
        if diff_only:
            own = self.bias - to_neighbour
        else:
            own = T.matmul(x, w_centre - w_diff) + self.bias
        return T.relu(own + T.gather_max(to_neighbour, nbrs))

    def reference(self, x: Tensor, nbrs: np.ndarray, diff_only: bool = False) -> Tensor:
        self._check(x)
        e = edge_features(x, nbrs)
        n, k, _ = e.shape
        if diff_only:
            e = T.concat([e[:, :, :self.c_in] * 0.0, e[:, :, self.c_in:]], axis=2)
        h = T.relu(T.matmul(T.reshape(e, (n * k, 2 * self.c_in)), self.weight) + self.bias)
        return T.reduce_max(T.reshape(h, (n, k, self.c_out)), axis=1)


class SpatialTransform:
    """Regresses a per-shape 3x3 matrix from the raw points and applies it.

    Per-point MLP 3->32->64, max pool over points, MLP 64->32->9. The last
    layer starts at zero weight with identity bias, so T = I initially.
    """

    def __init__(self, store: ParamStore, rng: np.random.Generator, name: str = "transform",
                 widths=(32, 64, 32)):
        w1, w2, w3 = widths
        self.point_mlp = [Dense(store, f"{name}.p1", 3, w1, rng, "transform"),
                          Dense(store, f"{name}.p2", w1, w2, rng, "transform")]
        self.head = [Dense(store, f"{name}.g1", w2, w3, rng, "transform"),
                     Dense(store, f"{name}.g2", w3, 9, rng, "transform", zero=True)]
        self.head[-1].bias.data[...] = np.eye(3, dtype=store.dtype).reshape(1, 9)

    def matrix(self, points: Tensor, batch: int) -> Tensor:
        n = points.shape[0] // batch
        feat = mlp(self.point_mlp, points)
        pooled = T.reduce_max(T.reshape(feat, (batch, n, feat.shape[1])), axis=1)
        return T.reshape(mlp(self.head, pooled, final_relu=False), (batch, 3, 3))

    def __call__(self, points: Tensor, batch: int = 1) -> tuple[Tensor, Tensor]:
        if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] % batch:
            raise DimensionError(f"spatial transform expects (B*n, 3) points, got {points.shape}")
        n = points.shape[0] // batch
        mat = self.matrix(points, batch)
        aligned = T.matmul(T.reshape(points, (batch, n, 3)), mat)
        return T.reshape(aligned, (batch * n, 3)), mat


def orthogonality_penalty(mat: Tensor) -> Tensor:
    """Mean over the batch of ||T T^t - I||_F^2 for (B, 3, 3) matrices."""
    batch = mat.shape[0]
    gram = T.matmul(mat, T.transpose(mat, (0, 2, 1)))
    eye = Tensor(np.broadcast_to(np.eye(3), (batch, 3, 3)), dtype=mat.dtype)
    diff = gram - eye
    return T.sum(diff * diff) * (1.0 / batch)


def point_global_feature(per_point: Tensor, batch: int = 1) -> Tensor:
    """Channelwise max over each shape's points: (B*n, C) -> (B, C)."""
    rows, channels = per_point.shape
    if rows % batch:
        raise DimensionError(f"{rows} rows do not split into {batch} shapes")
    return T.reduce_max(T.reshape(per_point, (batch, rows // batch, channels)), axis=1)


@dataclass
class PointBatch:
    """Stacked points of ``batch`` equal-size clouds plus their offset neighbour table."""

    points: Tensor  # (B*n, 3)
    nbrs: np.ndarray  # (B*n, k)
    batch: int

    @classmethod
    def from_clouds(cls, clouds: list[np.ndarray], k: int, graphs: list[np.ndarray] | None = None,
                    dtype=None) -> "PointBatch":
        sizes = {len(c) for c in clouds}
        if len(sizes) != 1:
            raise DimensionError(f"clouds in one batch must share n, got sizes {sorted(sizes)}")
        graphs = graphs if graphs is not None else [knn_graph(c, k) for c in clouds]
        pts = Tensor(np.concatenate(clouds, axis=0), dtype=dtype)
        return cls(pts, batch_neighbors(graphs), len(clouds))
