import struct

import numpy as np
import pytest

from pvnet import pvt
from pvnet.checkpoint import CheckpointError, load_checkpoint, read_header, restore_optimizer, save_checkpoint
from pvnet.model import ModelConfig, PVNet
from pvnet.train import Optimizer

from pvt_reference_reader import read_pvt

SMALL = dict(k=4, edge_widths=(4, 4), block_widths=(6, 8), embed_dim=3, view_channels=(2, 3), view_dim=5,
             fc_widths=(8, 8), transform_widths=(4, 4, 4))


class TestPvt:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("shape", [(), (0,), (5,), (3, 4), (2, 3, 4)])
    def test_roundtrip(self, dtype, shape):
        a = np.random.default_rng(0).standard_normal(shape).astype(dtype)
        b = pvt.loads(pvt.dumps(a))
        assert b.dtype == a.dtype and b.shape == a.shape
        assert b.tobytes() == a.tobytes()

    def test_layout(self):
        blob = pvt.dumps(np.array([[1.0, 2.0]], dtype=np.float32))
        assert blob[:4] == b"PVT1" and blob[4] == 0 and blob[5] == 2
        assert struct.unpack("<II", blob[6:14]) == (1, 2)
        assert struct.unpack("<2f", blob[14:]) == (1.0, 2.0)

    def test_reference_reader(self, tmp_path):
        a = np.random.default_rng(1).standard_normal((7, 3)).astype(np.float32)
        pvt.save(tmp_path / "a.pvt", a)
        dtype, shape, values = read_pvt(tmp_path / "a.pvt")
        assert (dtype, shape) == ("float32", (7, 3))
        assert values == a.ravel().tolist()

    def test_reference_reader_f64(self, tmp_path):
        a = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 7
        pvt.save(tmp_path / "b.pvt", a)
        assert read_pvt(tmp_path / "b.pvt") == ("float64", (2, 3, 4), a.ravel().tolist())

    @pytest.mark.parametrize("blob", [b"", b"PVT2\x00\x00", b"PVT1\x05\x00", b"PVT1\x00\x01\x02\x00\x00\x00\x00"])
    def test_rejects(self, blob):
        with pytest.raises(pvt.FormatError):
            pvt.loads(blob)

    def test_rejects_ints(self):
        with pytest.raises(pvt.FormatError):
            pvt.dumps(np.arange(3))


def trained_pair(arm="full", kind="sgd"):
    model = PVNet(ModelConfig(arm=arm, **SMALL), seed=3)
    opt = Optimizer(model.params, kind, lr=0.1)
    rng = np.random.default_rng(0)
    for _ in range(2):
        for _, p in model.params.items():
            p.grad = rng.standard_normal(p.shape).astype(p.dtype)
        opt.step()
    return model, opt


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["sgd", "adam"])
    def test_bitwise_roundtrip(self, tmp_path, kind):
        model, opt = trained_pair(kind=kind)
        save_checkpoint(tmp_path / "c.pvck", model, opt, epoch=5, run_config={"lr": 0.1})
        ck = load_checkpoint(tmp_path / "c.pvck")
        assert ck.epoch == 5 and ck.run_config == {"lr": 0.1}
        assert ck.model.config == model.config
        for name, p in model.params.items():
            q = ck.model.params[name]
            assert q.dtype == p.dtype and q.data.tobytes() == p.data.tobytes()
        assert ck.optimizer_state.keys() == opt.state.keys()
        for key, arr in opt.state.items():
            assert ck.optimizer_state[key].tobytes() == arr.tobytes()
        back = restore_optimizer(ck)
        assert back.kind == kind and back.step_count == opt.step_count
        # save again from the loaded copy: identical file
        save_checkpoint(tmp_path / "d.pvck", ck.model, back, epoch=5, run_config={"lr": 0.1})
        assert (tmp_path / "c.pvck").read_bytes() == (tmp_path / "d.pvck").read_bytes()

    def test_point_only_has_no_view_entries(self, tmp_path):
        model, opt = trained_pair("point_only")
        save_checkpoint(tmp_path / "p.pvck", model, opt)
        header, _ = read_header(tmp_path / "p.pvck")
        assert not any(e["name"].startswith("view_cnn") for e in header["params"])

    def test_payloads_are_pvt1(self, tmp_path):
        model, _ = trained_pair()
        save_checkpoint(tmp_path / "c.pvck", model)
        header, payload = read_header(tmp_path / "c.pvck")
        entry = header["params"][0]
        blob = payload[entry["offset"]:entry["offset"] + entry["length"]]
        (tmp_path / "one.pvt").write_bytes(blob)
        _, shape, values = read_pvt(tmp_path / "one.pvt")
        arr = model.params[entry["name"]].data
        assert shape == arr.shape and values == arr.ravel().tolist()

    def test_corruption_detected(self, tmp_path):
        model, _ = trained_pair()
        path = tmp_path / "c.pvck"
        save_checkpoint(path, model)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        model, _ = trained_pair()
        path = tmp_path / "c.pvck"
        save_checkpoint(path, model)
        raw = bytearray(path.read_bytes())
        raw[4:6] = struct.pack("<H", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x")
