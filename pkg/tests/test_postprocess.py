import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from tempera.errors import GeometryError
from tempera.metrics import dice_score
from tempera.phantom import PhantomSpec, _lattice_points, _Scene, generate_case, la_geometry, sa_geometry
from tempera.postprocess import (
    PostprocessConfig,
    components,
    largest_component,
    median_smooth,
    postprocess_mask,
    to_original_space,
)
from tempera.roi import RoiConfig, crop_standardize, preprocess_view
from tempera.volume import Geometry, SegmentationMask, resample, resampled_geometry


def mask(labels, spacing=(1.25, 1.25, 10)):
    labels = np.asarray(labels, dtype=np.uint8)
    return SegmentationMask.from_geometry(labels, Geometry(labels.shape, spacing, (0, 0, 0), np.eye(3)))


def test_single_blob_unchanged():
    m = np.zeros((10, 10, 3), np.uint8)
    m[2:5, 2:6, 1] = 1
    assert np.array_equal(largest_component(mask(m)).labels, m)


def test_keeps_100_over_40():
    m = np.zeros((30, 30, 1), np.uint8)
    m[0:10, 0:10] = 1
    m[20:25, 20:28] = 1
    out = largest_component(mask(m)).labels
    assert out.sum() == 100 and out[0, 0, 0] == 1 and out[20, 20, 0] == 0


def test_empty_stays_empty():
    m = mask(np.zeros((4, 4, 2)))
    assert largest_component(m).labels.sum() == 0
    assert median_smooth(m).labels.sum() == 0


def test_tie_goes_to_lowest_seed():
    m = np.zeros((12, 12, 1), np.uint8)
    m[8:10, 0:2] = 1
    m[0:2, 8:10] = 1  # same size, lexicographically first
    out = largest_component(mask(m)).labels
    assert out[0, 8, 0] == 1 and out[8, 0, 0] == 0


def test_connectivity_defaults():
    # diagonal neighbours join under 26/8 but not under 6/4
    m = np.zeros((5, 5, 3), np.uint8)
    m[1, 1, 0] = m[2, 2, 1] = m[3, 3, 2] = 1
    assert components(mask(m))[1] == 1
    assert components(mask(m), 6)[1] == 3
    flat = np.zeros((5, 5, 1), np.uint8)
    flat[1, 1] = flat[2, 2] = 1
    assert components(mask(flat))[1] == 1
    assert components(mask(flat), 4)[1] == 2
    with pytest.raises(ValueError):
        components(mask(flat), 5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), slices=st.sampled_from([1, 3]))
def test_at_most_one_component_and_largest(seed, slices):
    rng = np.random.default_rng(seed)
    m = (rng.random((12, 12, slices)) > 0.6).astype(np.uint8)
    out = largest_component(mask(m))
    labels, n = components(out)
    assert n <= 1
    all_labels, k = components(mask(m))
    if k:
        assert out.labels.sum() == np.bincount(all_labels.ravel())[1:].max()
    assert set(np.unique(out.labels)) <= {0, 1}


def test_median_examples():
    full = mask(np.ones((5, 5, 3)))
    assert np.array_equal(median_smooth(full).labels, full.labels)
    lone = np.zeros((7, 7, 1), np.uint8)
    lone[3, 3] = 1
    assert median_smooth(mask(lone), (3, 3, 1)).labels.sum() == 0
    with pytest.raises(ValueError):
        median_smooth(full, (2, 3, 3))


def lv_cavity(seed, view):
    spec = PhantomSpec(seed=seed)
    g = sa_geometry(spec) if view == "sa" else la_geometry(spec)
    g = resampled_geometry(g, (1.25, 1.25, g.spacing[2]))
    return SegmentationMask.from_geometry(_Scene(spec, "ed").labels(_lattice_points(g))[0].astype(np.uint8), g)


@pytest.mark.parametrize("view", ["la", "sa"])
def test_median_idempotent_on_convex_phantom_masks(view):
    # the LV cavity is the convex phantom shape (a tapered cylinder)
    for seed in range(3):
        once = median_smooth(lv_cavity(seed, view))
        assert np.count_nonzero(median_smooth(once).labels != once.labels) == 0


def test_identity_round_trip_at_standard_grid():
    g = Geometry((192, 192, 17), (1.25, 1.25, 10), (3, -2, 1), np.eye(3))
    rng = np.random.default_rng(0)
    labels = (ndimage.gaussian_filter(rng.random(g.shape), 3) > 0.5).astype(np.uint8)
    m = SegmentationMask.from_geometry(labels, g)
    cropped, record = crop_standardize(m, None, g.shape)
    back = to_original_space(cropped, record, g, g)
    assert np.array_equal(back.labels, labels)
    assert back.geometry.mismatch(g) is None


def test_phantom_round_trip_dice():
    for seed in range(4):
        case = generate_case(PhantomSpec(seed=seed))
        for view in ("sa", "la"):
            pv = preprocess_view(getattr(case.ed, view), getattr(case.es, view), view, RoiConfig(),
                                 masks={"ed": getattr(case.ed, f"{view}_mask")})
            back = to_original_space(pv.masks["ed"], pv.crop, pv.resampled_geometry, pv.original_geometry)
            truth = getattr(case.ed, f"{view}_mask")
            assert back.geometry.mismatch(truth.geometry) is None
            assert set(np.unique(back.labels)) <= {0, 1}
            assert dice_score(back, truth) >= 0.97


def test_inconsistent_record_rejected():
    case = generate_case(PhantomSpec(seed=1))
    pv = preprocess_view(case.ed.sa, case.es.sa, "sa", RoiConfig(), masks={"ed": case.ed.sa_mask})
    with pytest.raises(GeometryError):
        to_original_space(pv.masks["ed"], pv.crop, pv.original_geometry, pv.original_geometry)
    shifted = pv.masks["ed"].geometry.shifted((1, 0, 0), pv.masks["ed"].shape)
    moved = SegmentationMask.from_geometry(pv.masks["ed"].labels, shifted)
    with pytest.raises(GeometryError):
        to_original_space(moved, pv.crop, pv.resampled_geometry, pv.original_geometry)


def test_pipeline_yields_single_component():
    case = generate_case(PhantomSpec(seed=2))
    pv = preprocess_view(case.ed.sa, case.es.sa, "sa", RoiConfig(), masks={"ed": case.ed.sa_mask})
    noisy = pv.masks["ed"].labels.copy()
    noisy[5:8, 5:8, 2] = 1  # a stray island
    out = postprocess_mask(pv.masks["ed"].with_labels(noisy), pv.crop, pv.resampled_geometry, pv.original_geometry)
    assert components(out)[1] == 1
    assert dice_score(out, case.ed.sa_mask) > 0.9
    after = postprocess_mask(pv.masks["ed"].with_labels(noisy), pv.crop, pv.resampled_geometry, pv.original_geometry,
                             PostprocessConfig(median_order="after"))
    assert components(after)[1] == 1
