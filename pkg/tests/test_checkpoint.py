import pytest
import torch

from ccnet.checkpoint import (FORMAT, load_ccnet, load_model, read_checkpoint,
                              save_checkpoint)
from ccnet.netcore import CCNet
from ccnet.training import TrainConfig


def test_roundtrip(tmp_path):
    torch.manual_seed(0)
    net = CCNet(base_channels=2)
    cfg = TrainConfig(max_iteration=7, seed=42, base_channels=2, patch_size=(16, 16, 16))
    path = save_checkpoint(tmp_path / "c.pt", net, cfg, iteration=7)
    blob = read_checkpoint(path)
    assert blob["format"] == FORMAT
    meta = blob["metadata"]
    assert meta["iteration"] == 7 and meta["seed"] == 42
    assert set(meta["spec"]) == {"main", "aux1", "aux2"}
    assert "main/decoder.head.weight" in blob["tensors"]
    assert "aux1/encoder.blocks.0.convs.0.weight" in blob["tensors"]

    main = load_model(path)
    assert main.spec.role == "main" and not main.training
    x = torch.randn(1, 1, 16, 16, 16)
    net.eval()
    with torch.no_grad():
        assert torch.equal(main(x), net.main(x))
        restored = load_ccnet(path).eval()
        for role in ("main", "aux1", "aux2"):
            assert torch.equal(getattr(restored, role)(x), getattr(net, role)(x))


def test_shared_encoder_checkpoint(tmp_path):
    net = CCNet(base_channels=2, shared_encoder=True)
    path = save_checkpoint(tmp_path / "s.pt", net)
    restored = load_ccnet(path)
    assert restored.aux1.encoder is restored.main.encoder


def test_rejects_foreign_file(tmp_path):
    torch.save({"weights": 1}, tmp_path / "x.pt")
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "x.pt")
