"""Volumes, NRRD I/O, preprocessing, labeled/unlabeled splits, patches and synthetic data."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import nrrd
import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

SUPPORTED_ENCODINGS = {"raw", "gzip", "gz", "bzip2", "bz2", "ascii", "text", "txt"}
CROP_MARGIN = 25
VARIANCE_FLOOR = 1e-6


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class UnsupportedEncodingError(DataError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DataError(f"volume {self.id!r} must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Case:
    volume: Volume
    label: np.ndarray | None = None
    id: str = ""
    # label hidden from training for unlabeled cases, kept for oracle evaluation
    withheld_label: np.ndarray | None = None
    # (start, stop) per axis of the crop taken from the original grid
    crop: tuple[tuple[int, int], ...] | None = None
    original_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        if not self.id:
            self.id = self.volume.id
        if self.label is not None:
            self.label = check_label(self.label, self.volume.shape, self.id)


def check_label(label, shape, case_id: str = "") -> np.ndarray:
    label = np.asarray(label)
    if label.shape != tuple(shape):
        raise DataError(f"case {case_id!r}: label shape {label.shape} != volume shape {tuple(shape)}")
    values = np.unique(label)
    if not np.all(np.isin(values, (0, 1))):
        raise DataError(f"case {case_id!r}: label values {values[:10]} outside {{0, 1}}")
    return label.astype(np.uint8)


@dataclass(frozen=True)
class PatchSpec:
    size: tuple[int, int, int] = (112, 112, 80)

    def __post_init__(self):
        size = tuple(int(s) for s in self.size)
        if len(size) != 3 or any(s <= 0 or s % 16 for s in size):
            raise DataError(f"patch size {size} must be 3 positive multiples of 16")
        object.__setattr__(self, "size", size)


@dataclass(frozen=True)
class SplitSpec:
    train_count: int = 80
    test_count: int = 20
    labeled_fraction: float = 0.1
    seed: int = 1337

    @property
    def labeled_count(self) -> int:
        n = math.floor(self.labeled_fraction * self.train_count + 0.5)
        if n < 1:
            raise DataError(
                f"labeled fraction {self.labeled_fraction} of {self.train_count} gives no labeled case")
        if n > self.train_count:
            raise DataError(f"labeled fraction {self.labeled_fraction} exceeds 1")
        return n


class Split(NamedTuple):
    labeled: list[Case]
    unlabeled: list[Case]
    test: list[Case]


# --- NRRD -------------------------------------------------------------------

def _spacing_from_header(header) -> tuple[float, float, float]:
    if "spacings" in header:
        sp = np.asarray(header["spacings"], dtype=float)
        if np.all(np.isfinite(sp)):
            return tuple(sp[:3])
    if "space directions" in header:
        dirs = np.asarray(header["space directions"], dtype=float)
        return tuple(np.linalg.norm(dirs, axis=1)[:3])
    return (1.0, 1.0, 1.0)


def read_nrrd_array(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    header = nrrd.read_header(str(path))
    encoding = str(header.get("encoding", "raw")).lower()
    if encoding not in SUPPORTED_ENCODINGS:
        raise UnsupportedEncodingError(f"{path}: unsupported NRRD encoding {encoding!r}")
    data, header = nrrd.read(str(path))
    if data.ndim != 3:
        raise DataError(f"{path}: expected a 3D volume, got {data.ndim} dimensions")
    return data, header


def load_nrrd(path, label_path=None, case_id: str | None = None) -> Case:
    """Read an image (and optional label) NRRD file into a :class:`Case`."""
    data, header = read_nrrd_array(path)
    cid = case_id or Path(path).name.split(".")[0]
    volume = Volume(data.astype(np.float32), _spacing_from_header(header), cid)
    label = None
    if label_path is not None:
        label, _ = read_nrrd_array(label_path)
    return Case(volume, label, cid)


def save_nrrd(path, array: np.ndarray, spacing=(1.0, 1.0, 1.0), encoding: str = "gzip",
              detached_header: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"encoding": encoding, "space": "left-posterior-superior",
              "space directions": np.diag(np.asarray(spacing, dtype=float)),
              "space origin": np.zeros(3)}
    nrrd.write(str(path), np.ascontiguousarray(array), header, detached_header=detached_header,
               index_order="F")
    return path


# --- preprocessing -------------------------------------------------------------

def _bbox(mask: np.ndarray, margin: int) -> tuple[tuple[int, int], ...]:
    coords = np.nonzero(mask)
    return tuple((max(int(c.min()) - margin, 0), min(int(c.max()) + 1 + margin, n))
                 for c, n in zip(coords, mask.shape))


def normalize(data: np.ndarray) -> np.ndarray:
    data = data.astype(np.float64)
    std = math.sqrt(max(float(data.var()), VARIANCE_FLOOR))
    return ((data - data.mean()) / std).astype(np.float32)


def foreground_bbox(case: Case, margin: int = CROP_MARGIN) -> tuple[tuple[int, int], ...]:
    """Crop box: label bounding box for labeled cases, Otsu foreground otherwise."""
    if case.label is not None:
        if not case.label.any():
            raise DataError(f"case {case.id!r}: empty label on a labeled case")
        return _bbox(case.label, margin)
    data = case.volume.data
    if data.min() == data.max():
        return tuple((0, n) for n in data.shape)
    mask = data > threshold_otsu(data)
    return _bbox(mask, margin)


def preprocess(case: Case, margin: int = CROP_MARGIN, crop: bool = True) -> Case:
    """Crop to the foreground box (expanded by ``margin``) and z-score the crop."""
    shape = case.volume.shape
    box = foreground_bbox(case, margin) if crop else tuple((0, n) for n in shape)
    sl = tuple(slice(a, b) for a, b in box)
    volume = Volume(normalize(case.volume.data[sl]), case.volume.spacing, case.volume.id)
    label = case.label[sl] if case.label is not None else None
    withheld = case.withheld_label[sl] if case.withheld_label is not None else None
    return Case(volume, label, case.id, withheld, box, tuple(shape))


def uncrop(array: np.ndarray, case: Case, fill=0) -> np.ndarray:
    """Paste an array defined on the cropped grid back onto the original grid."""
    if case.crop is None:
        return array
    out = np.full(case.original_shape, fill, dtype=array.dtype)
    out[tuple(slice(a, b) for a, b in case.crop)] = array
    return out


def pad_to_patch(case: Case, patch: PatchSpec) -> Case:
    """Zero-pad (symmetrically) any axis shorter than the patch."""
    pads = []
    for n, p in zip(case.volume.shape, patch.size):
        extra = max(p - n, 0)
        pads.append((extra // 2, extra - extra // 2))
    if not any(a or b for a, b in pads):
        return case
    data = np.pad(case.volume.data, pads)
    label = np.pad(case.label, pads) if case.label is not None else None
    withheld = np.pad(case.withheld_label, pads) if case.withheld_label is not None else None
    return Case(Volume(data, case.volume.spacing, case.volume.id), label, case.id, withheld)


# --- splitting and sampling ------------------------------------------------------

def split(cases: Sequence[Case], spec: SplitSpec) -> Split:
    """First ``train_count`` cases train, next ``test_count`` test; a seeded subset of
    the training cases keeps its labels."""
    if len(cases) < spec.train_count + spec.test_count:
        raise DataError(
            f"need {spec.train_count + spec.test_count} cases, got {len(cases)}")
    train = list(cases[:spec.train_count])
    test = list(cases[spec.train_count:spec.train_count + spec.test_count])
    n_labeled = spec.labeled_count
    rng = np.random.default_rng(spec.seed)
    chosen = set(rng.permutation(len(train))[:n_labeled].tolist())
    labeled, unlabeled = [], []
    for i, case in enumerate(train):
        if i in chosen:
            if case.label is None:
                raise DataError(f"case {case.id!r} selected as labeled but has no label")
            labeled.append(case)
        else:
            unlabeled.append(replace(case, label=None, withheld_label=case.label))
    return Split(labeled, unlabeled, test)


def sample_patch(case: Case, patch: PatchSpec, rng: np.random.Generator):
    """Uniformly random patch-sized crop of the volume (and label)."""
    shape = case.volume.shape
    if any(n < p for n, p in zip(shape, patch.size)):
        raise DataError(
            f"case {case.id!r}: volume {shape} smaller than patch {patch.size}; pad it first "
            "(see pad_to_patch)")
    corner = [int(rng.integers(0, n - p + 1)) for n, p in zip(shape, patch.size)]
    sl = tuple(slice(c, c + p) for c, p in zip(corner, patch.size))
    label = case.label[sl] if case.label is not None else None
    return case.volume.data[sl], label


@dataclass(frozen=True)
class Augmentation:
    """Axis flips followed by ``k`` quarter turns in the (axis 0, axis 1) plane."""
    flips: tuple[bool, bool, bool] = (False, False, False)
    k: int = 0

    def apply(self, x: np.ndarray) -> np.ndarray:
        for axis, f in enumerate(self.flips):
            if f:
                x = np.flip(x, axis)
        return np.ascontiguousarray(np.rot90(x, self.k, axes=(0, 1)))

    def invert(self, x: np.ndarray) -> np.ndarray:
        x = np.rot90(x, -self.k, axes=(0, 1))
        for axis, f in enumerate(self.flips):
            if f:
                x = np.flip(x, axis)
        return np.ascontiguousarray(x)

    @classmethod
    def random(cls, shape, rng: np.random.Generator) -> "Augmentation":
        flips = tuple(bool(b) for b in rng.integers(0, 2, size=3))
        k = int(rng.integers(0, 4))
        if shape[0] != shape[1]:
            k = 2 * (k % 2)
        return cls(flips, k)


def augment(patch: np.ndarray, label: np.ndarray | None, rng: np.random.Generator):
    aug = Augmentation.random(patch.shape, rng)
    return aug.apply(patch), (aug.apply(label) if label is not None else None)


# --- synthetic corpus ------------------------------------------------------------

def _synth_mask(dims, rng: np.random.Generator, scale: float) -> np.ndarray:
    dims = np.asarray(dims)
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in dims], indexing="ij"), axis=-1).astype(float)
    center = dims / 2 + rng.uniform(-0.08, 0.08, 3) * dims
    radii = scale * dims * rng.uniform(0.14, 0.22, 3)
    # random rotation of the ellipsoid axes
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    local = (grid - center) @ q
    mask = ((local / radii) ** 2).sum(-1) <= 1.0
    for _ in range(int(rng.integers(2, 5))):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        length = radii.max() * rng.uniform(1.3, 2.0)
        tube_r = max(1.5, scale * dims.min() * rng.uniform(0.03, 0.05))
        bend = rng.normal(size=3) * 0.25
        # polyline from the body centre outward, slightly curved
        for t in np.linspace(0, 1, 24):
            d = direction + bend * t
            point = center + d / np.linalg.norm(d) * length * t
            mask |= ((grid - point) ** 2).sum(-1) <= tube_r ** 2
    return mask


def synth_case(dims, rng: np.random.Generator, fg_band=(0.02, 0.15),
               case_id: str = "case", contrast=(0.8, 1.4), noise=(0.2, 0.35),
               bias: float = 0.0) -> Case:
    """One phantom. ``contrast`` and ``noise`` are per-case uniform ranges; ``bias`` > 0
    multiplies the image by a smooth random field ``exp(bias * f)`` with ``f`` of unit scale."""
    dims = tuple(int(d) for d in dims)
    scale = 1.0
    for _ in range(20):
        mask = _synth_mask(dims, rng, scale)
        frac = mask.mean()
        if fg_band[0] <= frac <= fg_band[1]:
            break
        scale *= (np.mean(fg_band) / max(frac, 1e-6)) ** (1 / 3)
    else:
        raise DataError(f"could not hit foreground band {fg_band} for dims {dims}")
    gain = rng.uniform(*contrast)
    smooth = ndimage.gaussian_filter(mask.astype(np.float32), sigma=rng.uniform(0.8, 1.5))
    # slowly varying background clutter plus white noise
    clutter = ndimage.gaussian_filter(rng.normal(size=dims), sigma=4) * rng.uniform(3.0, 6.0)
    image = gain * smooth + 0.35 * clutter + rng.normal(0, rng.uniform(*noise), dims)
    if bias > 0:
        field = ndimage.gaussian_filter(rng.normal(size=dims), sigma=max(dims) / 4)
        image = (image + 2.0) * np.exp(bias * field / field.std())
    image = (image * 100 + 200).astype(np.float32)
    return Case(Volume(image, (0.625, 0.625, 0.625), case_id), mask.astype(np.uint8), case_id)


def synth_generate(n_cases: int, dims=(64, 64, 64), seed: int = 1337,
                   fg_band=(0.02, 0.15), **appearance) -> list[Case]:
    """Procedural ellipsoid-plus-branches volumes with exact masks; deterministic in ``seed``.

    ``appearance`` is passed to :func:`synth_case` (``contrast``, ``noise``, ``bias``).
    """
    return [synth_case(dims, np.random.default_rng([seed, i]), fg_band, f"case_{i:03d}",
                       **appearance)
            for i in range(n_cases)]


# --- manifests ---------------------------------------------------------------------

def write_dataset(root, cases: Sequence[Case], n_train: int | None = None) -> Path:
    """Write ``images/``, ``labels/`` and ``manifest.json`` under ``root``."""
    root = Path(root)
    entries = []
    for i, case in enumerate(cases):
        img = Path("images") / f"{case.id}.nrrd"
        save_nrrd(root / img, case.volume.data, case.volume.spacing)
        entry = {"id": case.id, "image_path": str(img)}
        if case.label is not None:
            lab = Path("labels") / f"{case.id}.nrrd"
            save_nrrd(root / lab, case.label, case.volume.spacing)
            entry["label_path"] = str(lab)
        entry["split"] = "train" if n_train is None or i < n_train else "test"
        entries.append(entry)
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2))
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise DataError(f"{path}: manifest must be a JSON list")
    for e in entries:
        if "image_path" not in e:
            raise DataError(f"{path}: entry {e} lacks image_path")
        e.setdefault("id", Path(e["image_path"]).name.split(".")[0])
        e.setdefault("split", "train")
    return entries


def load_manifest(path, split_name: str | None = None) -> list[Case]:
    path = Path(path)
    cases = []
    for e in read_manifest(path):
        if split_name is not None and e["split"] != split_name:
            continue
        label = path.parent / e["label_path"] if e.get("label_path") else None
        cases.append(load_nrrd(path.parent / e["image_path"], label, e["id"]))
    return cases
