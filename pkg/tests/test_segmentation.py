import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from tryonkit.fixtures import parse_art, sleeve_fixture
from tryonkit.segmentation import (
    DEFAULT_MIN_COMPONENT,
    PALETTE,
    Label,
    binarize,
    compose_agnostic_with_warp,
    components,
    connectivity_filter,
    filter_labels,
    miou,
    read_labelmap,
    recompose_segmentation,
    refine_densepose,
    write_labelmap,
)

LABELS = [int(x) for x in Label]
masks16 = arrays(np.uint8, (16, 16), elements=st.integers(0, 1))
labelmaps = arrays(np.int64, (10, 10), elements=st.sampled_from(LABELS))


def test_default_threshold():
    assert DEFAULT_MIN_COMPONENT == 12


def test_binarize():
    assert not binarize(np.zeros((4, 4), int)).any()
    lab = parse_art([".hc", "l..", "..b"])
    expected = np.array([[int(lab[i, j] != 0) for j in range(3)] for i in range(3)], np.uint8)
    assert np.array_equal(binarize(lab), expected)


@settings(max_examples=30, deadline=None)
@given(lab=labelmaps)
def test_binarize_matches_scan_and_or_idempotent(lab):
    b = binarize(lab)
    assert np.array_equal(b, np.vectorize(lambda v: int(v != 0))(lab).astype(np.uint8))
    assert np.array_equal(b | b, b)


def test_rejects_unknown_labels():
    with pytest.raises(ValueError, match="palette"):
        binarize(np.full((2, 2), 99))


def test_compose_empty_warp_is_identity():
    lab = parse_art(["hhf", "n.b", "..."])
    assert np.array_equal(compose_agnostic_with_warp(lab, np.zeros((3, 3), np.uint8)), lab)


def test_compose_cloth_overrides_on_overlap():
    lab = parse_art(["hhf", "n.b", "..."])
    warp = np.array([[0, 0, 0], [1, 1, 1], [0, 1, 0]], np.uint8)
    out = compose_agnostic_with_warp(lab, warp)
    for i in range(3):
        for j in range(3):
            assert out[i, j] == (Label.CLOTH if warp[i, j] else lab[i, j])


def test_compose_rejects_extent_mismatch():
    with pytest.raises(ValueError, match="extents"):
        compose_agnostic_with_warp(np.zeros((3, 3), int), np.zeros((3, 4), np.uint8))


def test_filter_identity_for_small_thresholds():
    m = (np.random.default_rng(0).uniform(size=(8, 8)) > 0.5).astype(np.uint8)
    assert np.array_equal(connectivity_filter(m, 0), m)
    assert np.array_equal(connectivity_filter(m, 1), m)


def test_filter_sizes_3_and_15():
    m = np.zeros((8, 8), np.uint8)
    m[0, 0:3] = 1  # 3 pixels
    m[3:8, 5:8] = 1  # 15 pixels
    sizes = sorted(len(c) for c in oracles.flood_components(m))
    assert sizes == [3, 15]
    out = connectivity_filter(m, 12)
    expected = np.zeros_like(m)
    expected[3:8, 5:8] = 1
    assert np.array_equal(out, expected)


def test_filter_uses_four_connectivity():
    m = np.eye(4, dtype=np.uint8)  # four diagonal singletons, not one 4-pixel component
    assert not connectivity_filter(m, 2).any()


def test_components_partition_support():
    m = (np.random.default_rng(2).uniform(size=(9, 9)) > 0.5).astype(np.uint8)
    comps = components(m)
    coords = np.concatenate([c.coords for c in comps])
    assert len({tuple(x) for x in coords}) == len(coords) == m.sum()
    assert all(c.size == len(c.coords) for c in comps)
    assert sorted(c.size for c in comps) == sorted(len(c) for c in oracles.flood_components(m))


@settings(max_examples=60, deadline=None)
@given(m=masks16, l=st.sampled_from([1, 5, 12]))
def test_filter_against_flood_fill(m, l):
    out = connectivity_filter(m, l)
    for comp in oracles.flood_components(m):
        kept = {int(out[p]) for p in comp}
        assert kept == ({1} if len(comp) >= l else {0})
    assert np.array_equal(connectivity_filter(out, l), out)


def test_refine_total_subtraction_is_empty():
    dp = parse_art(["ll..", "ll..", "..rr", "..rr"])
    caw = np.where(dp != 0, int(Label.CLOTH), 0)
    assert not refine_densepose(dp, caw, 1).any()


def test_refine_empty_caw_large_components_kept():
    dp = np.zeros((8, 8), int)
    dp[:, :3] = Label.LEFT_ARM
    dp[:, 5:] = Label.RIGHT_ARM
    assert np.array_equal(refine_densepose(dp, np.zeros((8, 8), int), 12), dp)


def test_refine_keeps_only_large_residue():
    # a 5x6 arm region cut by a cloth column: residues of 5 and 20 pixels
    dp = np.full((5, 6), int(Label.LEFT_ARM))
    caw = np.zeros((5, 6), int)
    caw[:, 1] = Label.CLOTH
    residue = (dp != 0) & (caw == 0)
    assert sorted(len(c) for c in oracles.flood_components(residue.astype(np.uint8))) == [5, 20]
    out = refine_densepose(dp, caw, 12)
    assert (out[:, 2:] == Label.LEFT_ARM).all() and not out[:, :2].any()


def test_per_label_filtering_keeps_distinct_small_parts():
    lab = np.zeros((4, 8), int)
    lab[:, :3] = Label.LEFT_ARM  # 12 pixels
    lab[:, 3:6] = Label.RIGHT_ARM  # 12 pixels, touching the left arm
    lab[0, 7] = Label.FACE
    out = filter_labels(lab, 12)
    expected = lab.copy()
    expected[0, 7] = 0
    assert np.array_equal(out, expected)


def test_recompose_empty_and_fixed_point():
    z = np.zeros((6, 6), int)
    assert not recompose_segmentation(z, z.astype(np.uint8), z).any()
    agn = parse_art(["..hh..", "..ff..", ".cccc.", ".cccc.", "..bb..", "..bb.."])
    warp = (agn == Label.CLOTH).astype(np.uint8)
    assert np.array_equal(recompose_segmentation(agn, warp, agn), agn)


def test_sleeve_fixture_arms_exactly_on_residue():
    fx = sleeve_fixture()
    out = recompose_segmentation(fx.agnostic, fx.warp_mask, fx.densepose, 12)
    caw = compose_agnostic_with_warp(fx.agnostic, fx.warp_mask)
    residue = (caw == 0) & np.isin(fx.densepose, [Label.LEFT_ARM, Label.RIGHT_ARM])
    speck = np.zeros_like(residue)
    speck[14, 0:2] = True
    arms = np.isin(out, [Label.LEFT_ARM, Label.RIGHT_ARM])
    assert np.array_equal(arms, residue & ~speck)
    assert np.array_equal(out, fx.expected)
    assert miou(out, fx.expected, "cloth_only") == 1.0


@settings(max_examples=40, deadline=None)
@given(agn=labelmaps, dp=labelmaps, warp=arrays(np.uint8, (10, 10), elements=st.integers(0, 1)), l=st.integers(0, 12))
def test_recompose_invariants(agn, dp, warp, l):
    caw = compose_agnostic_with_warp(agn, warp)
    out = recompose_segmentation(agn, warp, dp, l)
    dp_ref = refine_densepose(dp, caw, l)
    assert not (binarize(caw) & ~binarize(out).astype(bool)).any()
    assert not (binarize(dp_ref) & binarize(caw)).any()
    assert set(np.unique(out)) <= set(LABELS)
    assert np.array_equal(out[caw != 0], caw[caw != 0])


def test_miou_identical_and_disjoint():
    a = parse_art(["cc..", "cc..", "..ll", "..ll"])
    assert miou(a, a, "cloth_only") == 1.0
    assert miou(a, a, "all_excluding_neck") == 1.0
    b = parse_art(["..cc", "..cc", "ll..", "ll.."])
    assert miou(a, b, "cloth_only") == 0.0
    assert miou(a, b, "all_excluding_neck") == 0.0


def test_miou_half_overlap_matches_counting():
    pred = parse_art(["cccc", "cccc", "....", "...."])
    truth = parse_art(["cccc", "....", "cccc", "...."])
    inter, union = oracles.iou_counts(pred, truth, Label.CLOTH)
    assert (inter, union) == (4, 12)
    assert miou(pred, truth, "cloth_only") == inter / union
    assert miou(pred, truth) == miou(truth, pred)


def test_miou_skips_absent_labels_and_neck():
    pred = parse_art(["cnn", "c..", "..."])
    truth = parse_art(["c..", "c..", "..l"])
    # neck is never scored; left arm appears in truth only
    assert miou(pred, truth, "all_excluding_neck") == pytest.approx((1.0 + 0.0) / 2)


def test_miou_rejects_empty_evaluation_set():
    a = parse_art(["...", ".n."])
    with pytest.raises(ValueError, match="no labels"):
        miou(a, a, "cloth_only")
    with pytest.raises(ValueError, match="region"):
        miou(a, a, "everything")


@settings(max_examples=30, deadline=None)
@given(a=labelmaps, b=labelmaps)
def test_miou_symmetric_and_bounded(a, b):
    a[0, 0] = b[0, 0] = Label.CLOTH
    s = miou(a, b, "all_excluding_neck")
    assert 0.0 <= s <= 1.0
    assert s == miou(b, a, "all_excluding_neck")


def test_labelmap_png_round_trip_with_palette(tmp_path):
    from PIL import Image

    lab = np.random.default_rng(0).choice(LABELS, size=(7, 5))
    write_labelmap(tmp_path / "l.png", lab)
    assert np.array_equal(read_labelmap(tmp_path / "l.png"), lab)
    with Image.open(tmp_path / "l.png") as pil:
        assert pil.mode == "P"
        pal = pil.getpalette()
    for label, rgb in PALETTE.items():
        assert tuple(pal[3 * int(label) : 3 * int(label) + 3]) == rgb
