import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ccnet.metrics import (CaseResult, EmptySurfaceError, aggregate, asd, dice,
                           evaluate_corpus, hd95, jaccard, read_results_csv,
                           surface_voxels, write_aggregate_json, write_results_csv)

masks6 = arrays(np.bool_, (6, 6, 6))


def test_dice_examples():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros_like(a)
    assert dice(a, b) == 1.0
    a.flat[:4] = True
    assert dice(a, a) == 1.0
    b.flat[10:14] = True
    assert dice(a, b) == 0.0
    b[:] = False
    b.flat[2:6] = True
    assert dice(a, b) == 0.5
    assert jaccard(a, b) == pytest.approx(1 / 3, abs=1e-15)
    assert jaccard(a, a) == 1.0


@given(masks6, masks6)
def test_jaccard_dice_identity_and_symmetry(a, b):
    d, j = dice(a, b), jaccard(a, b)
    assert j == pytest.approx(d / (2 - d), abs=1e-12)
    assert dice(b, a) == d and jaccard(b, a) == j
    assert 0 <= j <= d <= 1


def test_surface_voxels_examples():
    single = np.zeros((5, 5, 5), bool)
    single[2, 2, 2] = True
    assert np.array_equal(surface_voxels(single), single)
    cube = np.zeros((5, 5, 5), bool)
    cube[1:4, 1:4, 1:4] = True
    surf = surface_voxels(cube)
    assert surf.sum() == 26 and not surf[2, 2, 2]
    assert not surface_voxels(np.zeros((3, 3, 3), bool)).any()
    full = np.ones((3, 3, 3), bool)
    assert surface_voxels(full).sum() == 26  # grid border counts as background


def test_two_voxels_three_apart():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros_like(a)
    a[1, 2, 2] = True
    b[4, 2, 2] = True
    assert hd95(a, b) == 3.0
    assert asd(a, b) == 3.0
    assert hd95(a, a) == 0.0 and asd(a, a) == 0.0


def test_empty_surface_raises():
    a = np.zeros((4, 4, 4), bool)
    b = a.copy()
    b[1, 1, 1] = True
    with pytest.raises(EmptySurfaceError):
        hd95(a, b)
    with pytest.raises(EmptySurfaceError):
        asd(b, a)


@settings(max_examples=50)
@given(masks6, masks6)
def test_symmetry_and_spacing_scale(a, b):
    if not a.any() or not b.any():
        return
    sp = (0.7, 1.1, 1.9)
    h, s = hd95(a, b, sp), asd(a, b, sp)
    assert hd95(b, a, sp) == pytest.approx(h, abs=1e-12)
    assert asd(b, a, sp) == pytest.approx(s, abs=1e-12)
    assert hd95(a, b, tuple(2 * x for x in sp)) == 2 * h
    assert asd(a, b, tuple(2 * x for x in sp)) == pytest.approx(2 * s, rel=1e-15)


def test_evaluate_corpus_and_exports(tmp_path):
    ref = np.zeros((8, 8, 8), np.uint8)
    ref[2:6, 2:6, 2:6] = 1
    pred = np.roll(ref, 1, axis=0)
    empty = np.zeros_like(ref)
    results, agg = evaluate_corpus({"a": ref, "b": pred, "c": empty},
                                   {"a": ref, "b": ref, "c": ref})
    assert [r.id for r in results] == ["a", "b", "c"]
    assert results[0].dice == 1.0
    assert results[2].hd95 is None and not results[2].surface_defined
    assert agg["n"] == 3 and agg["skipped"] == 1
    assert agg["dice_mean"] == pytest.approx(np.mean([r.dice for r in results]))
    assert agg["hd95_mean"] == pytest.approx(np.mean([results[0].hd95, results[1].hd95]))
    path = write_results_csv(tmp_path / "r.csv", results)
    back = read_results_csv(path)
    assert back == results
    write_aggregate_json(tmp_path / "agg.json", agg)
    with pytest.raises(KeyError):
        evaluate_corpus({}, {"a": ref})


def test_perfect_single_case():
    ref = np.zeros((8, 8, 8), np.uint8)
    ref[2:5, 2:5, 2:5] = 1
    _, agg = evaluate_corpus({"x": ref}, {"x": ref})
    assert agg["dice_mean"] == 1.0 and agg["hd95_mean"] == 0.0
