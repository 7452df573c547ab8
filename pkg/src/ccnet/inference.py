"""Main-model sliding-window prediction and binarization."""
from __future__ import annotations

import itertools
import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

DEFAULT_STRIDE = (18, 18, 4)


class UsageError(RuntimeError):
    pass


def window_starts(length: int, patch: int, stride: int) -> list[int]:
    """Start offsets along one axis; the last window always ends at the edge."""
    if stride < 1:
        raise ValueError("stride must be positive")
    if length <= patch:
        return [0]
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def window_corners(shape: Sequence[int], patch: Sequence[int], stride: Sequence[int]):
    return list(itertools.product(*(window_starts(n, p, s)
                                     for n, p, s in zip(shape, patch, stride))))


def coverage_count(shape, patch, stride=DEFAULT_STRIDE) -> np.ndarray:
    """How many windows cover each voxel of a (padded-if-needed) grid."""
    padded = [max(n, p) for n, p in zip(shape, patch)]
    count = np.zeros(padded, dtype=np.int32)
    for c in window_corners(padded, patch, stride):
        count[tuple(slice(o, o + p) for o, p in zip(c, patch))] += 1
    return count[tuple(slice(0, n) for n in shape)]


def _check_main(model) -> None:
    spec = getattr(model, "spec", None)
    role = getattr(spec, "role", None)
    if role != "main":
        raise UsageError(f"sliding-window inference uses the main model only, got role {role!r}")


@torch.no_grad()
def sliding_window_predict(model, volume, patch_size=(112, 112, 80), stride=DEFAULT_STRIDE,
                           batch_size: int = 1, order: Sequence[int] | None = None,
                           device: str | torch.device | None = None) -> np.ndarray:
    """Class-probability map of shape (classes, H, W, D) averaged over overlapping windows.

    Axes shorter than the patch are zero-padded symmetrically and cropped back.
    ``order`` optionally permutes the window visiting order.
    """
    _check_main(model)
    data = np.asarray(getattr(volume, "data", volume), dtype=np.float32)
    if data.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {data.shape}")
    patch_size = tuple(int(p) for p in patch_size)
    pads = [(max(p - n, 0) // 2, max(p - n, 0) - max(p - n, 0) // 2)
            for n, p in zip(data.shape, patch_size)]
    padded = np.pad(data, pads)
    corners = window_corners(padded.shape, patch_size, stride)
    if order is not None:
        corners = [corners[i] for i in order]
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    params = list(model.parameters()) if hasattr(model, "parameters") else []
    dtype = params[0].dtype if params else torch.float32
    if device is None:
        device = params[0].device if params else torch.device("cpu")
    prob_sum = None
    count = np.zeros(padded.shape, dtype=np.float64)
    try:
        for i in range(0, len(corners), batch_size):
            chunk = corners[i:i + batch_size]
            slices = [tuple(slice(o, o + p) for o, p in zip(c, patch_size)) for c in chunk]
            x = torch.from_numpy(np.stack([padded[s] for s in slices])[:, None]).to(device, dtype)
            probs = model(x).double().cpu().numpy()
            if prob_sum is None:
                prob_sum = np.zeros((probs.shape[1],) + padded.shape, dtype=np.float64)
            for s, p in zip(slices, probs):
                prob_sum[(slice(None),) + s] += p
                count[s] += 1
    finally:
        if was_training and hasattr(model, "train"):
            model.train()
    out = prob_sum / count
    crop = tuple(slice(a, a + n) for (a, _), n in zip(pads, data.shape))
    return out[(slice(None),) + crop].astype(np.float32)


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground where the foreground probability strictly exceeds ``threshold``.

    Accepts either a (classes, ...) map (channel 1 is foreground) or a bare
    foreground-probability array.
    """
    probs = np.asarray(probs)
    fg = probs[1] if probs.ndim == 4 else probs
    return (fg > threshold).astype(np.uint8)


def write_prediction(out_dir, case_id: str, mask: np.ndarray, spacing, checkpoint,
                     threshold: float, stride) -> tuple[Path, Path]:
    from .datapipe import save_nrrd

    out_dir = Path(out_dir)
    mask_path = save_nrrd(out_dir / f"{case_id}.nrrd", mask.astype(np.uint8), spacing)
    sidecar = out_dir / f"{case_id}.json"
    sidecar.write_text(json.dumps({"case_id": case_id, "checkpoint": str(checkpoint),
                                   "threshold": threshold, "stride": list(stride)}, indent=2))
    return mask_path, sidecar
