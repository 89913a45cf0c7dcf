"""Registry of finite-difference checks for every differentiable operation.

Each check builds random 64-bit inputs from a seed, projects the operation's
output onto a fixed random direction to get a scalar, and returns the worst
relative error between the analytic and central-difference gradients.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from pvnet import tensor as T
from pvnet.fusion import AttentionFusionBlock, Embed, phi, xi
from pvnet.model import ModelConfig, PVNet
from pvnet.nn import ParamStore
from pvnet.point_branch import EdgeConv, SpatialTransform, knn_graph, orthogonality_penalty
from pvnet.tensor import Tensor, grad_check, grad_check_tensors
from pvnet.view_branch import ViewCNN

TOLERANCE = 1e-4


def _project(out: Tensor, seed: int) -> Tensor:
    direction = np.random.default_rng(seed + 7919).standard_normal(out.shape)
    return T.sum(out * Tensor(direction, dtype=out.dtype))


def _away_from_zero(rng, shape, margin=0.1):
    # keeps kinks (relu, abs, max ties) out of the finite-difference stencil
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    """Entries spaced well apart so max-selection is stable under perturbation."""
    size = int(np.prod(shape))
    return (rng.permutation(size) * 0.1 + rng.uniform(0, 0.01, size)).reshape(shape) - 0.05 * size


def _op(fn: Callable, *shapes, maker=None) -> Callable[[int], float]:
    def check(seed: int) -> float:
        rng = np.random.default_rng(seed)
        make = maker or (lambda r, s: r.standard_normal(s))
        inputs = [make(rng, s) for s in shapes]
        return grad_check(lambda *xs: _project(fn(*xs), seed), inputs)
    return check


def _params_check(build: Callable[[np.random.Generator, ParamStore], tuple[Callable[[], Tensor], list]],
                  max_coords: int | None = None) -> Callable[[int], float]:
    """Check a module: ``build`` returns a loss closure and extra input leaves."""
    def check(seed: int) -> float:
        with T.default_dtype(np.float64):
            rng = np.random.default_rng(seed)
            store = ParamStore(np.float64)
            loss_fn, leaves = build(rng, store)
            for _, p in store.items():
                # zero-initialized biases would park pre-activations exactly on relu/max kinks
                p.data[...] = p.data + rng.standard_normal(p.shape) * 0.1
            tensors = [p for _, p in store.items()] + leaves
            return grad_check_tensors(loss_fn, tensors, max_coords=max_coords, seed=seed)
    return check


def _edgeconv(rng, store):
    conv = EdgeConv(store, "ec", 3, 5, rng)
    x = Tensor(rng.standard_normal((10, 3)), requires_grad=True)
    nbrs = knn_graph(x.data, 4)
    return (lambda: _project(conv(x, nbrs), 1)), [x]


def _transform(rng, store):
    st = SpatialTransform(store, rng, widths=(6, 8, 5))
    # move off the identity init so the head weight gradient is exercised generically
    store["transform.g2.weight"].data[...] = rng.standard_normal((5, 9)) * 0.3
    x = Tensor(rng.standard_normal((12, 3)), requires_grad=True)

    def loss():
        aligned, mat = st(x, batch=2)
        return _project(aligned, 2) + orthogonality_penalty(mat)
    return loss, [x]


def _embed(rng, store):
    emb = Embed(store, rng, 6, 4)
    v = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
    return (lambda: _project(emb(v), 3)), [v]


def _fusion_block(rng, store):
    block = AttentionFusionBlock(store, rng, "blk", 4, 6, 3)
    p = Tensor(rng.standard_normal((16, 4)), requires_grad=True)
    v = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    g = knn_graph(p.data[:8], 3)
    nbrs = np.concatenate([g, g + 8])

    def loss():
        out, _ = block(p, v, nbrs)
        return _project(out, 4)
    return loss, [p, v]


def _view_cnn(rng, store):
    cnn = ViewCNN(store, rng, channels=(3, 4), out_dim=5)
    views = Tensor(rng.uniform(0, 1, (2, 9, 9)), requires_grad=True)
    return (lambda: _project(cnn(views), 5)), [views]


TINY_MODEL = ModelConfig(arm="full", n_classes=3, k=3, edge_widths=(4, 4), block_widths=(5, 6), embed_dim=3,
                         view_channels=(2, 3), view_dim=4, fc_widths=(6, 5), transform_widths=(4, 5, 4))


def end_to_end(seed: int, max_coords: int | None = None, arm: str = "full") -> float:
    """Whole-model check on two shapes of 8 points with 2 views of 8x8 each."""
    rng = np.random.default_rng(seed)
    config = ModelConfig(**{**TINY_MODEL.to_dict(), "arm": arm})
    model = PVNet(config, seed=seed, dtype=np.float64)
    for name, p in model.params.items():
        # generic non-zero values everywhere, including zero-initialized biases
        p.data[...] = p.data + rng.standard_normal(p.shape) * 0.1
    clouds = [rng.standard_normal((8, 3)) for _ in range(2)]
    views = [rng.uniform(0, 1, (2, 8, 8)) for _ in range(2)]
    labels = [0, 2]
    with T.default_dtype(np.float64):
        pts, view_t = model.batch_inputs(clouds, views, k=config.k)
        tensors = [p for _, p in model.params.items()]
        return grad_check_tensors(lambda: model.loss(model.forward(pts, view_t, 2), labels, 0.1),
                                  tensors, max_coords=max_coords, seed=seed)


CHECKS: dict[str, Callable[[int], float]] = {
    "add": _op(lambda a, b: a + b, (3, 4), (1, 4)),
    "sub": _op(lambda a, b: a - b, (3, 4), (3, 1)),
    "mul": _op(lambda a, b: a * b, (3, 4), (3, 4)),
    "matmul": _op(T.matmul, (4, 5), (5, 3)),
    "matmul_batched": _op(T.matmul, (2, 4, 3), (2, 3, 3)),
    "relu": _op(T.relu, (5, 6), maker=_away_from_zero),
    "sigmoid": _op(T.sigmoid, (5, 6)),
    "log": _op(T.log, (4, 5), maker=lambda r, s: r.uniform(0.2, 3.0, s)),
    "abs": _op(T.abs, (4, 5), maker=_away_from_zero),
    "exp": _op(T.exp, (4, 5)),
    "reshape": _op(lambda a: T.reshape(a, (6, 2)), (3, 4)),
    "transpose": _op(lambda a: T.transpose(a, (2, 0, 1)), (2, 3, 4)),
    "getitem": _op(lambda a: a[1:, ::2], (4, 5)),
    "concat": _op(lambda a, b: T.concat([a, b], axis=1), (3, 2), (3, 4)),
    "split": _op(lambda a: T.split(a, [2, 3], axis=1)[1] * 2.0 + T.split(a, [2, 3], axis=1)[0][:, :1], (4, 5)),
    "repeat_rows": _op(lambda a: T.repeat_rows(a, 3), (2, 4)),
    "gather_rows": _op(lambda a: T.gather_rows(a, np.array([[0, 2], [2, 1], [3, 3]])), (4, 3)),
    "sum": _op(lambda a: T.sum(a, axis=1), (3, 4)),
    "mean": _op(lambda a: T.mean(a, axis=0), (3, 4)),
    "reduce_max": _op(lambda a: T.reduce_max(a, axis=1), (3, 5, 2), maker=_distinct),
    "gather_max": _op(lambda a: T.gather_max(a, np.array([[1, 2], [0, 3], [3, 2], [1, 0]])), (4, 3),
                      maker=_distinct),
    "conv2d": _op(lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1), (2, 2, 7, 7), (3, 2, 3, 3), (3,)),
    "softmax_cross_entropy": _op(lambda z: T.softmax_cross_entropy(z, [0, 2, 1]), (3, 4)),
    "phi": _op(phi, (6, 2), (2, 3)),
    "xi": _op(xi, (4, 5), maker=_away_from_zero),
    "edgeconv": _params_check(_edgeconv),
    "spatial_transform": _params_check(_transform),
    "embed": _params_check(_embed),
    "attention_fusion": _params_check(_fusion_block),
    "view_cnn": _params_check(_view_cnn, max_coords=12),
    "end_to_end": end_to_end,
}


def run_all(seeds=range(10), names=None) -> list[dict]:
    """One row per (check, seed): ``{"op", "seed", "max_rel_err", "passed"}``."""
    rows = []
    for name in names or CHECKS:
        for seed in seeds:
            err = CHECKS[name](int(seed))
            rows.append({"op": name, "seed": int(seed), "max_rel_err": err, "passed": bool(err < TOLERANCE)})
    return rows
