import gzip

import nrrd
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from ccnet.datapipe import (Augmentation, Case, DataError, PatchSpec, SplitSpec,
                            UnsupportedEncodingError, Volume, augment, load_manifest,
                            load_nrrd, pad_to_patch, preprocess, read_manifest, sample_patch,
                            save_nrrd, split, synth_generate, uncrop, write_dataset)


def _case(shape=(40, 40, 40), seed=0, labeled=True):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=shape).astype(np.float32)
    label = None
    if labeled:
        label = np.zeros(shape, np.uint8)
        label[10:20, 12:18, 5:30] = 1
    return Case(Volume(data, (0.625, 0.625, 0.625), f"c{seed}"), label)


class TestNrrd:
    def test_gzip_roundtrip(self, tmp_path):
        data = np.arange(24 * 20 * 16, dtype=np.float32).reshape(24, 20, 16)
        label = (data % 3 == 0).astype(np.uint8)
        save_nrrd(tmp_path / "img.nrrd", data, (0.625, 0.625, 0.625))
        save_nrrd(tmp_path / "lab.nrrd", label, (0.625, 0.625, 0.625))
        case = load_nrrd(tmp_path / "img.nrrd", tmp_path / "lab.nrrd")
        assert case.volume.shape == (24, 20, 16)
        assert np.array_equal(case.volume.data, data)
        assert np.array_equal(case.label, label)
        assert case.volume.spacing == pytest.approx((0.625, 0.625, 0.625))
        assert nrrd.read_header(str(tmp_path / "img.nrrd"))["encoding"] == "gzip"

    @pytest.mark.parametrize("encoding", ["raw", "ascii"])
    def test_other_encodings_and_detached(self, tmp_path, encoding):
        data = np.random.default_rng(0).integers(0, 100, (16, 16, 16)).astype(np.int16)
        save_nrrd(tmp_path / "img.nhdr", data, (1, 2, 3), encoding=encoding, detached_header=True)
        case = load_nrrd(tmp_path / "img.nhdr")
        assert np.array_equal(case.volume.data, data)
        assert case.volume.spacing == (1.0, 2.0, 3.0)

    def test_spacings_field(self, tmp_path):
        nrrd.write(str(tmp_path / "s.nrrd"), np.zeros((16, 16, 16), np.float32),
                   {"spacings": [0.5, 0.5, 2.0]})
        assert load_nrrd(tmp_path / "s.nrrd").volume.spacing == (0.5, 0.5, 2.0)

    def test_unsupported_encoding_named(self, tmp_path):
        path = tmp_path / "bad.nrrd"
        path.write_bytes(b"NRRD0004\ntype: float\ndimension: 3\nsizes: 2 2 2\n"
                         b"encoding: hex-weird\n\n")
        with pytest.raises(UnsupportedEncodingError, match="hex-weird"):
            load_nrrd(path)

    def test_label_dimension_mismatch(self, tmp_path):
        save_nrrd(tmp_path / "img.nrrd", np.zeros((16, 16, 16), np.float32))
        save_nrrd(tmp_path / "lab.nrrd", np.zeros((16, 16, 8), np.uint8))
        with pytest.raises(DataError, match="shape"):
            load_nrrd(tmp_path / "img.nrrd", tmp_path / "lab.nrrd")

    def test_label_values_validated(self, tmp_path):
        save_nrrd(tmp_path / "img.nrrd", np.zeros((16, 16, 16), np.float32))
        lab = np.zeros((16, 16, 16), np.uint8)
        lab[0, 0, 0] = 2
        save_nrrd(tmp_path / "lab.nrrd", lab)
        with pytest.raises(DataError, match="outside"):
            load_nrrd(tmp_path / "img.nrrd", tmp_path / "lab.nrrd")


class TestVolume:
    def test_invalid_spacing(self):
        with pytest.raises(DataError):
            Volume(np.zeros((16, 16, 16)), (1, 0, 1))

    def test_not_3d(self):
        with pytest.raises(DataError):
            Volume(np.zeros((16, 16)))


class TestPreprocess:
    def test_constant_volume_normalizes_to_zero(self):
        case = Case(Volume(np.full((32, 32, 32), 7.0, np.float32)))
        out = preprocess(case)
        assert np.all(out.volume.data == 0)

    def test_zero_mean_unit_variance(self):
        out = preprocess(_case())
        assert abs(out.volume.data.mean()) < 1e-3
        assert abs(out.volume.data.var() - 1) < 1e-3

    def test_crop_is_label_bbox_with_margin(self):
        case = _case(shape=(80, 70, 60))
        # independent scan of every axis for the first/last foreground index
        box = []
        for axis in range(3):
            other = tuple(a for a in range(3) if a != axis)
            present = [i for i in range(case.label.shape[axis])
                       if case.label.take(i, axis=axis).any()]
            lo, hi = present[0], present[-1]
            box.append((max(lo - 25, 0), min(hi + 1 + 25, case.label.shape[axis])))
        out = preprocess(case)
        assert out.crop == tuple(box)
        assert out.volume.shape == tuple(b - a for a, b in box)
        assert out.label.sum() == case.label.sum()

    def test_empty_label_rejected(self):
        case = _case()
        case.label[:] = 0
        with pytest.raises(DataError, match="empty label"):
            preprocess(case)

    def test_unlabeled_crop_uses_intensity(self):
        data = np.zeros((80, 80, 80), np.float32)
        data[30:40, 30:40, 30:40] = 10
        out = preprocess(Case(Volume(data)))
        assert out.crop == ((5, 65), (5, 65), (5, 65))

    def test_uncrop_restores_grid(self):
        case = _case(shape=(80, 70, 60))
        out = preprocess(case)
        back = uncrop(out.label, out)
        assert np.array_equal(back, case.label)


class TestSplit:
    def _cases(self, n=100):
        lab = np.ones((2, 2, 2), np.uint8)
        return [Case(Volume(np.zeros((2, 2, 2)), id=f"c{i}"), lab) for i in range(n)]

    @pytest.mark.parametrize("frac,n_l,n_u", [(0.1, 8, 72), (0.2, 16, 64)])
    def test_cardinalities(self, frac, n_l, n_u):
        s = split(self._cases(), SplitSpec(80, 20, frac, seed=1337))
        assert (len(s.labeled), len(s.unlabeled), len(s.test)) == (n_l, n_u, 20)
        ids = [c.id for part in s for c in part]
        assert len(ids) == len(set(ids)) == 100
        assert all(c.label is None and c.withheld_label is not None for c in s.unlabeled)

    def test_deterministic(self):
        a = split(self._cases(), SplitSpec(seed=3))
        b = split(self._cases(), SplitSpec(seed=3))
        assert [c.id for c in a.labeled] == [c.id for c in b.labeled]
        c = split(self._cases(), SplitSpec(seed=4))
        assert [x.id for x in a.labeled] != [x.id for x in c.labeled]

    def test_invalid_fraction(self):
        with pytest.raises(DataError):
            split(self._cases(), SplitSpec(80, 20, 0.001))

    def test_too_few_cases(self):
        with pytest.raises(DataError):
            split(self._cases(50), SplitSpec(80, 20, 0.1))


class TestPatches:
    def test_identity_crop(self, rng):
        case = _case(shape=(32, 32, 16))
        x, y = sample_patch(case, PatchSpec((32, 32, 16)), rng)
        assert np.array_equal(x, case.volume.data) and np.array_equal(y, case.label)

    def test_congruent_crop(self, rng):
        case = _case(shape=(48, 40, 36))
        case.volume.data[:] = np.arange(case.volume.data.size).reshape(48, 40, 36)
        case.label[:] = (case.volume.data % 7 == 0)
        for _ in range(20):
            x, y = sample_patch(case, PatchSpec((32, 32, 16)), rng)
            assert np.array_equal(y, (x % 7 == 0).astype(np.uint8))

    def test_corner_coverage(self, rng):
        case = _case(shape=(40, 36, 20))
        case.volume.data[:] = np.arange(40)[:, None, None] * 10000 + \
            np.arange(36)[None, :, None] * 100 + np.arange(20)[None, None, :]
        corners = set()
        for _ in range(1000):
            x, _ = sample_patch(case, PatchSpec((32, 32, 16)), rng)
            v = int(x[0, 0, 0])
            corners.add((v // 10000, (v // 100) % 100, v % 100))
        for axis, hi in enumerate((8, 4, 4)):
            seen = {c[axis] for c in corners}
            assert min(seen) == 0 and max(seen) == hi

    def test_too_small(self, rng):
        with pytest.raises(DataError, match="pad"):
            sample_patch(_case(shape=(20, 40, 40)), PatchSpec((32, 32, 32)), rng)
        padded = pad_to_patch(_case(shape=(20, 40, 40)), PatchSpec((32, 32, 32)))
        assert padded.volume.shape == (32, 40, 40) and padded.label.shape == (32, 40, 40)

    def test_patch_spec_validation(self):
        with pytest.raises(DataError):
            PatchSpec((30, 32, 32))


class TestAugment:
    def test_double_flip_is_identity(self, rng):
        x = rng.normal(size=(8, 8, 4))
        for axis in range(3):
            flips = tuple(i == axis for i in range(3))
            aug = Augmentation(flips, 0)
            assert np.array_equal(aug.apply(aug.apply(x)), x)

    def test_four_rotations_identity(self, rng):
        x = rng.normal(size=(8, 8, 4))
        rot = Augmentation((False, False, False), 1)
        y = x
        for _ in range(4):
            y = rot.apply(y)
        assert np.array_equal(y, x)

    @given(st.tuples(st.booleans(), st.booleans(), st.booleans()), st.integers(0, 3))
    def test_inverse_restores(self, flips, k):
        x = np.arange(8 * 8 * 4).reshape(8, 8, 4)
        aug = Augmentation(flips, k)
        assert np.array_equal(aug.invert(aug.apply(x)), x)

    def test_label_congruent_and_count_preserved(self, rng):
        x = rng.normal(size=(16, 16, 8))
        y = (x > 0.5).astype(np.uint8)
        for _ in range(20):
            xa, ya = augment(x, y, rng)
            assert ya.sum() == y.sum()
            assert np.array_equal(ya, (xa > 0.5).astype(np.uint8))

    def test_non_square_plane_keeps_shape(self, rng):
        x = rng.normal(size=(16, 8, 4))
        for _ in range(20):
            assert augment(x, None, rng)[0].shape == x.shape


class TestSynth:
    def test_single_case_connected(self):
        (case,) = synth_generate(1, (64, 64, 64), seed=0)
        assert case.volume.shape == (64, 64, 64)
        assert case.label.any()
        _, n = ndimage.label(case.label)
        assert n == 1

    def test_deterministic(self):
        a = synth_generate(2, (32, 32, 32), seed=5)
        b = synth_generate(2, (32, 32, 32), seed=5)
        for x, y in zip(a, b):
            assert np.array_equal(x.volume.data, y.volume.data)
            assert np.array_equal(x.label, y.label)

    def test_foreground_band(self):
        for case in synth_generate(4, (48, 48, 48), seed=2):
            frac = np.count_nonzero(case.label) / case.label.size
            assert 0.02 <= frac <= 0.15

    def test_dataset_roundtrip(self, tmp_path):
        cases = synth_generate(3, (32, 32, 32), seed=1)
        manifest = write_dataset(tmp_path, cases, n_train=2)
        entries = read_manifest(manifest)
        assert [e["split"] for e in entries] == ["train", "train", "test"]
        loaded = load_manifest(manifest, "train")
        assert len(loaded) == 2
        assert np.array_equal(loaded[0].label, cases[0].label)
        assert np.allclose(loaded[0].volume.data, cases[0].volume.data)

    def test_appearance_knobs(self):
        plain = synth_generate(2, (32, 32, 32), seed=4)
        hard = synth_generate(2, (32, 32, 32), seed=4, contrast=(0.5, 1.1), noise=(0.25, 0.45),
                              bias=0.1)
        for p, h in zip(plain, hard):
            # appearance changes the image, never the mask
            assert np.array_equal(p.label, h.label)
            assert not np.allclose(p.volume.data, h.volume.data)
            assert np.all(np.isfinite(h.volume.data))
