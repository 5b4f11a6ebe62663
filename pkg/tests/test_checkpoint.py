import json
import struct

import numpy as np
import pytest
import torch

from mscan.checkpoint import MAGIC, load_into, parameter_hash, read_checkpoint, save_checkpoint
from mscan.encoder import CropEncoder
from mscan.errors import CheckpointError
from mscan.localization import UNet
from mscan.multiview import MScan
from mscan.pipeline import ModelBundle


def test_layout_is_documented_binary(tmp_path):
    lin = torch.nn.Linear(2, 3)
    path = save_checkpoint(tmp_path / "m.ckpt", lin, "linear", {"in": 2})
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    version, n = struct.unpack("<II", raw[8:16])
    header = json.loads(raw[16:16 + n])
    assert version == 1 and header["kind"] == "linear" and header["config"] == {"in": 2}
    names = [t["name"] for t in header["tensors"]]
    assert names == ["weight", "bias"]
    payload = np.frombuffer(raw[16 + n:], dtype="<f4")
    np.testing.assert_array_equal(payload[:6], lin.weight.detach().numpy().ravel())
    np.testing.assert_array_equal(payload[6:], lin.bias.detach().numpy())


@pytest.mark.parametrize("make", [lambda: UNet(base=4), lambda: MScan(dim=16), lambda: CropEncoder(widths=(4, 8))])
def test_round_trip_includes_buffers(tmp_path, make):
    a = make()
    if hasattr(a, "down"):
        a(torch.randn(4, 1, 32, 32))  # move batch-norm running statistics
    save_checkpoint(tmp_path / "x.ckpt", a, "k", {})
    b = make()
    load_into(b, tmp_path / "x.ckpt", kind="k")
    assert parameter_hash(a) == parameter_hash(b)


def test_bundle_round_trip(tmp_path):
    bundle = ModelBundle(encoder_axial=CropEncoder(widths=(4, 8)), mscan=MScan(dim=16, n_heads=2))
    bundle.save(tmp_path)
    back = ModelBundle.load(tmp_path, ["encoder_axial", "mscan"])
    assert back.mscan.config == bundle.mscan.config
    assert parameter_hash(back.mscan) == parameter_hash(bundle.mscan)
    assert back.encoder_axial.frozen


def test_errors(tmp_path):
    lin = torch.nn.Linear(2, 3)
    path = save_checkpoint(tmp_path / "m.ckpt", lin, "linear", {})
    with pytest.raises(CheckpointError):
        load_into(torch.nn.Linear(2, 3), path, kind="other")
    with pytest.raises(CheckpointError):
        load_into(torch.nn.Linear(3, 3, bias=False), path)
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "junk").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "junk")
    (tmp_path / "short").write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "short")
