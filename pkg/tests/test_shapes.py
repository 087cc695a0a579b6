import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from roughctl.shapes import (BACKGROUND_COLOR, CLASS_NAMES, CONDITION_KINDS, DEFAULT_HIERARCHY, ClassHierarchy,
                             ShapeSpec, aligned_alternate, binarize, compute_masks, condition_support,
                             conflict_ratio, coverage, dilate, extract_condition, random_spec, render,
                             render_aligned_set, sample_alternate_class, save_aligned_set, segment)

CIRCLE, SQUARE = CLASS_NAMES.index("circle"), CLASS_NAMES.index("square")
RED = (0.9, 0.2, 0.2)


def masks(shape=(12, 12)):
    return arrays(bool, shape)


# -- hierarchy ------------------------------------------------------------------


def test_default_hierarchy_has_nine_classes_in_three_parents():
    assert DEFAULT_HIERARCHY.classes == list(range(9))
    assert all(len(c) == 3 for c in DEFAULT_HIERARCHY.parents.values())
    for cls in range(9):
        assert len(DEFAULT_HIERARCHY.siblings(cls)) == 2


def test_forced_choice_with_two_children():
    h = ClassHierarchy({"p": (0, 1), "q": (2, 3)})
    rng = np.random.default_rng(0)
    assert {sample_alternate_class(0, h, rng) for _ in range(50)} == {1}


def test_alternate_frequencies_are_even_across_two_siblings():
    rng = np.random.default_rng(7)
    draws = np.array([sample_alternate_class(0, DEFAULT_HIERARCHY, rng) for _ in range(10_000)])
    assert set(draws) == {1, 2}
    for cls in (1, 2):
        assert abs((draws == cls).mean() - 0.5) <= 0.05


def test_alternate_is_a_sibling():
    rng = np.random.default_rng(3)
    for cls in DEFAULT_HIERARCHY.classes:
        alt = sample_alternate_class(cls, DEFAULT_HIERARCHY, rng)
        assert alt != cls
        assert DEFAULT_HIERARCHY.parent_of(alt) == DEFAULT_HIERARCHY.parent_of(cls)


def test_unknown_class_is_rejected():
    with pytest.raises(KeyError):
        sample_alternate_class(42, DEFAULT_HIERARCHY, np.random.default_rng(0))


def test_hierarchy_validation():
    with pytest.raises(ValueError):
        ClassHierarchy({"p": (0,), "q": (1, 2)})
    with pytest.raises(ValueError):
        ClassHierarchy({"p": (0, 1), "q": (1, 2)})


def test_hierarchy_json_round_trip():
    assert ClassHierarchy.from_json(DEFAULT_HIERARCHY.to_json()) == DEFAULT_HIERARCHY


# -- rendering ------------------------------------------------------------------


def test_full_canvas_square_is_all_ones():
    size = 16
    spec = ShapeSpec(SQUARE, size / 2, size / 2, size / 1.6, 0.0, RED, size=size)
    _, m = render(spec)
    assert m.all()


@pytest.mark.parametrize("radius", [5.0, 9.0, 13.5])
def test_circle_area_matches_pi_r_squared(radius):
    spec = ShapeSpec(CIRCLE, 16.0, 16.0, radius, 0.0, RED, size=32)
    _, m = render(spec)
    assert abs(m.sum() - math.pi * radius ** 2) <= 0.02 * math.pi * radius ** 2


def test_render_is_byte_identical():
    spec = random_spec(5, np.random.default_rng(0))
    a, ma = render(spec)
    b, mb = render(spec)
    assert a.tobytes() == b.tobytes() and ma.tobytes() == mb.tobytes()


def test_render_rejects_out_of_canvas_spec():
    with pytest.raises(ValueError):
        render(ShapeSpec(CIRCLE, 2.0, 16.0, 8.0, 0.0, RED))


def test_silhouette_is_coverage_at_half():
    spec = random_spec(7, np.random.default_rng(2))
    _, m = render(spec)
    np.testing.assert_array_equal(m, coverage(spec) >= 0.5)


@settings(max_examples=40, deadline=None)
@given(cls=st.integers(0, 8), seed=st.integers(0, 2 ** 31))
def test_random_specs_fit_and_cover_thirty_percent(cls, seed):
    spec = random_spec(cls, np.random.default_rng(seed))
    image, m = render(spec)
    assert coverage(spec).mean() >= 0.30
    assert 0.0 <= image.min() and image.max() <= 1.0
    assert m.sum() > 0


def test_background_pixels_keep_the_background_colour():
    spec = random_spec(0, np.random.default_rng(5))
    image, _ = render(spec)
    outside = coverage(spec) == 0
    np.testing.assert_allclose(image[:, outside], np.asarray(BACKGROUND_COLOR)[:, None].repeat(outside.sum(), 1))


# -- conditions -----------------------------------------------------------------


@pytest.mark.parametrize("kind", CONDITION_KINDS)
def test_empty_mask_gives_zero_condition(kind):
    m = np.zeros((8, 8), bool)
    assert not extract_condition(np.zeros((3, 8, 8)), m, kind).any()


def test_unknown_condition_kind():
    with pytest.raises(ValueError):
        extract_condition(np.zeros((3, 4, 4)), np.zeros((4, 4), bool), "canny")


def test_square_edge_is_four_straight_segments():
    m = np.zeros((16, 16), bool)
    m[3:13, 4:12] = True                       # 10 rows x 8 cols
    edge = extract_condition(None, m, "edge")
    assert edge.sum() == 2 * 10 + 2 * 8 - 4    # perimeter pixels, corners counted once
    assert not edge[4:12, 5:11].any()
    assert edge[3, 4:12].all() and edge[12, 4:12].all()
    assert edge[3:13, 4].all() and edge[3:13, 11].all()


def test_depthlike_disk_peaks_at_centre_and_vanishes_on_contour():
    yy, xx = np.mgrid[:31, :31]
    m = (xx - 15) ** 2 + (yy - 15) ** 2 <= 12 ** 2
    d = extract_condition(None, m, "depthlike")
    assert d.max() == 1.0 and d[15, 15] == 1.0
    assert np.unravel_index(d.argmax(), d.shape) == (15, 15)
    assert not d[~m].any()
    # the outer contour is exactly zero and the inner rim sits one pixel above it
    contour = dilate(m, 1) & ~m
    rim = m & dilate(~m, 1)
    assert not d[contour].any()
    np.testing.assert_allclose(d[rim], d[m].min())
    assert d[m].min() < 0.1


def test_silhouette_condition_is_the_render_mask():
    for cls in range(9):
        image, m = render(random_spec(cls, np.random.default_rng(cls)))
        np.testing.assert_array_equal(extract_condition(image, m, "silhouette"), m.astype(float))


@pytest.mark.parametrize("kind", CONDITION_KINDS)
def test_condition_support_recovers_the_silhouette(kind):
    image, m = render(random_spec(3, np.random.default_rng(11)))
    support = condition_support(extract_condition(image, m, kind), kind)
    np.testing.assert_array_equal(support, m)


def test_segment_recovers_silhouette_of_a_clean_render():
    for cls in range(9):
        image, m = render(random_spec(cls, np.random.default_rng(100 + cls)))
        assert (segment(image) ^ m).sum() <= 0.03 * m.size


# -- masks ----------------------------------------------------------------------


def test_identical_masks_have_no_conflict():
    m = np.random.default_rng(0).uniform(size=(9, 9)) > 0.5
    mp = compute_masks(m, m)
    assert not mp.m_conflict.any()
    np.testing.assert_array_equal(mp.m_bg, ~m)


def test_disjoint_masks_conflict_everywhere_they_cover():
    a = np.zeros((6, 6), bool)
    b = np.zeros((6, 6), bool)
    a[:2] = True
    b[4:] = True
    np.testing.assert_array_equal(compute_masks(a, b).m_conflict, a | b)


@settings(max_examples=200)
@given(masks(), masks())
def test_subset_conflict_is_set_difference(m_init, extra):
    m_alt = m_init & ~extra
    np.testing.assert_array_equal(compute_masks(m_init, m_alt).m_conflict, m_init & ~m_alt)


@settings(max_examples=300)
@given(masks(), masks())
def test_mask_algebra(m_init, m_alt):
    mp = compute_masks(m_init, m_alt)
    np.testing.assert_array_equal(mp.m_conflict, m_init ^ m_alt)
    assert not (mp.m_conflict & mp.m_bg).any()
    total = mp.m_conflict.astype(int) + mp.m_bg.astype(int) + (m_init & m_alt).astype(int)
    assert (total == 1).all()


def test_non_binary_masks_are_rejected():
    with pytest.raises(ValueError):
        compute_masks(np.full((3, 3), 0.5), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        compute_masks(np.zeros((3, 3), bool), np.zeros((4, 4), bool))


def test_soft_masks_binarize_at_half():
    np.testing.assert_array_equal(binarize(np.array([0.2, 0.5, 0.9])), [False, True, True])


@settings(max_examples=100)
@given(masks((10, 10)), st.integers(0, 3))
def test_dilation_grows_monotonically(m, r):
    d = dilate(m, r)
    assert (d | m).sum() == d.sum()
    assert (dilate(m, r + 1) | d).sum() == dilate(m, r + 1).sum()


def test_dilation_radius_zero_is_identity_and_negative_is_rejected():
    m = np.eye(5, dtype=bool)
    np.testing.assert_array_equal(dilate(m, 0), m)
    with pytest.raises(ValueError):
        dilate(m, -1)


def test_conflict_ratio_bounds():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert conflict_ratio(a, a) == 0.0
    assert conflict_ratio(a, ~a) == 1.0
    assert conflict_ratio(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 0.0


def test_aligned_alternate_keeps_pose_and_stays_on_canvas():
    for cls in range(9):
        spec = random_spec(cls, np.random.default_rng(cls + 50))
        for alt in DEFAULT_HIERARCHY.siblings(cls):
            other = aligned_alternate(spec, alt)
            assert other.rotation == spec.rotation
            render(other)


# -- aligned sets ---------------------------------------------------------------


def test_aligned_set_cycles_classes_and_saves(tmp_path):
    data = render_aligned_set(18, seed=0, size=16)
    assert list(data.labels) == list(range(9)) * 2
    assert data.conditions("edge").shape == (18, 16, 16)
    save_aligned_set(data, tmp_path)
    index = json.loads((tmp_path / "shapes.json").read_text())
    assert len(index["items"]) == 18
    assert ShapeSpec.from_dict(index["items"][4]["spec"]) == data.specs[4]
    assert ClassHierarchy.from_json((tmp_path / "hierarchy.json").read_text()) == DEFAULT_HIERARCHY
