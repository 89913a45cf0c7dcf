import json
import math

import numpy as np
import pytest

from pvnet import pvt
from pvnet import tensor as T
from pvnet.fusion import AttentionFusionBlock, Embed, late_concat, phi, xi
from pvnet.nn import ParamStore
from pvnet.point_branch import knn_graph
from pvnet.tensor import DimensionError, Tensor


class TestXi:
    def test_unit_magnitudes(self):
        np.testing.assert_allclose(xi(Tensor([1.0, -1.0], dtype=np.float64)).data, 0.5, atol=1e-15)

    def test_e(self):
        # sigmoid(1) from the closed form in extended precision
        assert xi(Tensor([math.e], dtype=np.float64)).data[0] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)

    def test_zero_is_finite(self):
        v = xi(Tensor([0.0], dtype=np.float64)).data[0]
        assert 0 <= v < 1e-11

    def test_equals_abs_ratio(self):
        x = np.random.default_rng(0).standard_normal(100) * 10
        np.testing.assert_allclose(xi(Tensor(x, dtype=np.float64)).data, np.abs(x) / (1 + np.abs(x)), rtol=1e-9)


class TestPhi:
    def test_shape(self):
        assert phi(Tensor(np.zeros((4, 3))), Tensor(np.zeros((1, 2)))).shape == (4, 5)

    def test_single_point(self):
        out = phi(Tensor([[1.0, 2.0]]), Tensor([[3.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2, 3]])

    def test_v_gradient_is_count(self):
        v = Tensor(np.zeros((1, 3)), requires_grad=True, dtype=np.float64)
        T.backward(T.sum(phi(Tensor(np.zeros((7, 2)), dtype=np.float64), v)))
        np.testing.assert_array_equal(v.grad, np.full((1, 3), 7.0))

    def test_batched_tiling(self):
        out = phi(Tensor(np.zeros((4, 1))), Tensor([[1.0], [2.0]])).data
        np.testing.assert_array_equal(out[:, 1], [1, 1, 2, 2])

    def test_bad_rows(self):
        with pytest.raises(DimensionError):
            phi(Tensor(np.zeros((5, 1))), Tensor(np.zeros((2, 1))))


class TestEmbed:
    def test_zero_weights(self):
        emb = Embed(ParamStore(np.float64), np.random.default_rng(0), 4, 3)
        emb.lin.weight.data[...] = 0
        emb.lin.bias.data[...] = [[1, 2, 3]]
        np.testing.assert_array_equal(emb(Tensor(np.ones((2, 4)))).data, [[1, 2, 3], [1, 2, 3]])

    def test_identity(self):
        emb = Embed(ParamStore(np.float64), np.random.default_rng(0), 3, 3)
        emb.lin.weight.data[...] = np.eye(3)
        emb.lin.bias.data[...] = 0.5
        x = np.random.default_rng(1).standard_normal((2, 3))
        np.testing.assert_allclose(emb(Tensor(x, dtype=np.float64)).data, x + 0.5)


def make_block(seed=0, c_in=4, c_out=6, k_dim=3, dtype=np.float64):
    store = ParamStore(dtype)
    return AttentionFusionBlock(store, np.random.default_rng(seed), "b", c_in, c_out, k_dim), store


def inputs(seed=0, n=12, c=4, k_dim=3, batch=1):
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((batch * n, c))
    v = rng.standard_normal((batch, k_dim))
    g = knn_graph(p[:n], 3)
    nbrs = np.concatenate([g + i * n for i in range(batch)])
    return Tensor(p, dtype=np.float64), Tensor(v, dtype=np.float64), nbrs


class TestBlock:
    def test_override_zero_is_convention_path(self):
        block, _ = make_block()
        p, v, nbrs = inputs()
        h, _ = block(p, v, nbrs, mask_override=0.0)
        np.testing.assert_array_equal(h.data, block.edge(p, nbrs).data)

    def test_override_one_doubles(self):
        block, _ = make_block()
        p, v, nbrs = inputs()
        h, _ = block(p, v, nbrs, mask_override=1.0)
        np.testing.assert_array_equal(h.data, 2 * block.edge(p, nbrs).data)

    def test_constant_preactivation(self):
        block, store = make_block()
        for name in ("b.mask2.weight", "b.mask2.bias"):
            store[name].data[...] = 0.0 if name.endswith("weight") else 1.0
        p, v, _ = inputs()
        np.testing.assert_allclose(block.mask(p, v).data, 0.5, atol=1e-15)

    @pytest.mark.parametrize("seed", range(100))
    def test_mask_range(self, seed):
        block, _ = make_block(seed, dtype=np.float32)
        rng = np.random.default_rng(seed)
        m = block.mask(Tensor(rng.standard_normal((10, 4))), Tensor(rng.standard_normal((1, 3)))).data
        assert ((m > 0) & (m < 1)).all()

    def test_identical_rows(self):
        block, _ = make_block()
        p = Tensor(np.tile(np.random.default_rng(0).standard_normal((1, 4)), (5, 1)), dtype=np.float64)
        v = Tensor(np.ones((1, 3)), dtype=np.float64)
        m = block.mask(p, v).data
        assert (m == m[0]).all()

    def test_amplifies_only(self):
        block, _ = make_block()
        p, v, nbrs = inputs(3, batch=2)
        h, _ = block(p, v, nbrs)
        e = block.edge(p, nbrs).data
        assert (np.sign(h.data) == np.sign(e)).all()
        assert (np.abs(h.data) >= np.abs(e)).all() and (np.abs(h.data) <= 2 * np.abs(e)).all()

    def test_gradient_eight_points(self):
        from pvnet.gradcheck import CHECKS

        assert max(CHECKS["attention_fusion"](s) for s in range(3)) < 1e-4


class TestLateConcat:
    def test_shape(self):
        assert late_concat(Tensor(np.zeros((1, 512))), Tensor(np.zeros((1, 64)))).shape == (1, 576)

    def test_zero_embed_passthrough(self):
        x = np.random.default_rng(0).standard_normal((2, 4))
        out = late_concat(Tensor(x, dtype=np.float64), Tensor(np.zeros((2, 3)), dtype=np.float64)).data
        np.testing.assert_array_equal(out[:, :4], x)

    def test_gradient_slots(self):
        a = Tensor(np.zeros((1, 2)), requires_grad=True, dtype=np.float64)
        b = Tensor(np.zeros((1, 3)), requires_grad=True, dtype=np.float64)
        T.backward(T.sum(late_concat(a, b) * Tensor([[1.0, 2, 3, 4, 5]], dtype=np.float64)))
        np.testing.assert_array_equal(a.grad, [[1, 2]])
        np.testing.assert_array_equal(b.grad, [[3, 4, 5]])


def test_export_masks(tmp_path):
    from pvnet.fusion import export_masks
    from pvnet.model import ModelConfig, PVNet

    cfg = ModelConfig(k=4, edge_widths=(4, 4), block_widths=(5, 7), embed_dim=3, view_channels=(2, 2),
                      view_dim=4, fc_widths=(6, 6), transform_widths=(4, 4, 4))
    model = PVNet(cfg, seed=0)
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((32, 3)).astype(np.float32)
    vs = rng.uniform(0, 1, (4, 16, 16)).astype(np.float32)
    export_masks(model, pts, vs, tmp_path / "a", "s0")
    export_masks(model, pts, vs, tmp_path / "b", "s0")
    for i, width in ((1, 5), (2, 7)):
        m = pvt.load(tmp_path / "a" / f"s0.mask{i}.pvt")
        assert m.shape == (32, width)
        assert ((m > 0) & (m < 1)).all()
        assert (tmp_path / "a" / f"s0.mask{i}.pvt").read_bytes() == (tmp_path / "b" / f"s0.mask{i}.pvt").read_bytes()
        meta = json.loads((tmp_path / "a" / f"s0.mask{i}.json").read_text())
        assert meta == {"shape_id": "s0", "block": i, "n": 32, "channels": width}
    np.testing.assert_array_equal(pvt.load(tmp_path / "a" / "s0.points.pvt"), pts)
