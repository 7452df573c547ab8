"""Input validation helpers shared by the estimator and the CLI."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .datapipe import Case, DataError, Volume, check_label


def check_volume(x, index: int = 0) -> Volume:
    """Coerce an array, :class:`Volume` or :class:`Case` into a finite 3D Volume."""
    if isinstance(x, Case):
        x = x.volume
    if not isinstance(x, Volume):
        x = Volume(np.asarray(x, dtype=np.float32), id=f"case_{index:03d}")
    if not np.all(np.isfinite(x.data)):
        raise DataError(f"volume {x.id!r} contains non-finite values")
    if min(x.shape) < 16:
        raise DataError(f"volume {x.id!r} of shape {x.shape} is below the 16-voxel minimum")
    return x


def check_cases(X, y=None) -> list[Case]:
    """Pair volumes with labels; a ``None`` label marks an unlabeled case.

    ``X`` may already hold :class:`Case` objects, in which case ``y`` must be None.
    """
    if isinstance(X, (np.ndarray, Volume, Case)) and np.ndim(getattr(X, "data", X)) == 3:
        X = [X]
        y = [y] if y is not None else None
    X = list(X)
    if y is None:
        cases = []
        for i, x in enumerate(X):
            if isinstance(x, Case):
                check_volume(x.volume, i)
                cases.append(x)
            else:
                cases.append(Case(check_volume(x, i)))
        return cases
    y = list(y)
    if len(y) != len(X):
        raise DataError(f"got {len(X)} volumes but {len(y)} labels")
    cases = []
    for i, (x, lab) in enumerate(zip(X, y)):
        vol = check_volume(x, i)
        label = None if lab is None else check_label(lab, vol.shape, vol.id)
        cases.append(Case(vol, label, vol.id))
    return cases


def check_stride(stride: Sequence[int]) -> tuple[int, int, int]:
    stride = tuple(int(s) for s in stride)
    if len(stride) != 3 or min(stride) < 1:
        raise ValueError(f"stride must be 3 positive integers, got {stride}")
    return stride
