"""Checkpoint container.

A checkpoint is one ``torch.save`` file holding a plain dict::

    {
        "format": "ccnet-checkpoint",
        "version": 1,
        "metadata": {"spec": {...}, "iteration": int, "seed": int,
                     "train_config": {...}, ...},
        "tensors": {"<role>/<layer path>": Tensor, ...},
    }

``role`` is one of ``main``, ``aux1``, ``aux2`` and the layer path is the
module's ``state_dict`` key (for example ``main/decoder.blocks.0.convs.0.weight``).
With a shared encoder the encoder tensors are stored once per role, holding
identical values. Only plain containers and tensors are stored, so files load
with ``weights_only=True``.
"""
from __future__ import annotations

from pathlib import Path

import torch

from .netcore import CCNet, ModelSpec, VNet

FORMAT = "ccnet-checkpoint"
VERSION = 1


def state_tensors(net: CCNet, roles=CCNet.roles) -> dict[str, torch.Tensor]:
    tensors = {}
    for role in roles:
        for name, t in getattr(net, role).state_dict().items():
            tensors[f"{role}/{name}"] = t.detach().cpu().clone()
    return tensors


def save_checkpoint(path, net: CCNet, config=None, iteration: int = 0,
                    extra: dict | None = None, roles=CCNet.roles) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = {
        "spec": {role: getattr(net, role).spec.to_dict() for role in roles},
        "iteration": int(iteration),
        "seed": int(config.seed) if config is not None else None,
        "train_config": config.to_dict() if config is not None else None,
    }
    if extra:
        metadata["extra"] = extra
    torch.save({"format": FORMAT, "version": VERSION, "metadata": metadata,
                "tensors": state_tensors(net, roles)}, path)
    return path


def read_checkpoint(path) -> dict:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} file")
    if blob.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    return blob


def _role_state(tensors: dict, role: str) -> dict:
    prefix = role + "/"
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_model(path, role: str = "main") -> VNet:
    """Rebuild a single branch (the main model by default, all inference needs)."""
    blob = read_checkpoint(path)
    spec = ModelSpec.from_dict(blob["metadata"]["spec"][role])
    model = VNet(spec)
    model.load_state_dict(_role_state(blob["tensors"], role))
    model.eval()
    return model


def load_ccnet(path) -> CCNet:
    blob = read_checkpoint(path)
    specs = blob["metadata"]["spec"]
    main = ModelSpec.from_dict(specs["main"])
    net = CCNet(base_channels=main.base_channels, shared_encoder=main.shared_encoder,
                norm=main.norm, encoder_convs=main.encoder_convs,
                decoder_convs=main.decoder_convs, in_channels=main.in_channels,
                out_classes=main.out_classes)
    for role in specs:
        getattr(net, role).load_state_dict(_role_state(blob["tensors"], role))
    return net
