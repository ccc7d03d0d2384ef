import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from physimg.imgcore import ImageError, new_image
from physimg.quantify import (
    CalibrationError,
    FingerTrajectory,
    Geometry,
    LinearConcentrationModel,
    calibrate,
    calibrate_signals,
    compare_segmentations,
    comparison_legend,
    concentration,
    detect_finger_tips,
    total_volume,
    track_fingers,
    trajectories_table,
    write_csv,
)
from physimg.regularize import RegularizationConfig
from physimg.synthlab import ML_PER_HOUR, SynthSpec, gen_plume_sequence

from oracles import best_assignment, region_counts


# -- model and volumes ------------------------------------------------------


def test_model_formula(rng):
    s = rng.uniform(-0.2, 0.8, 100)
    np.testing.assert_array_equal(LinearConcentrationModel(2.0)(s), np.minimum(np.maximum(2 * s, 0), 1))


def test_model_validation_and_round_trip():
    for bad in (0.0, -1.0, np.nan):
        with pytest.raises(ValueError):
            LinearConcentrationModel(bad)
    m = LinearConcentrationModel(1.25, -0.01)
    assert LinearConcentrationModel.from_dict(json.loads(json.dumps(m.to_dict()))) == m


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(-5, 5), st.integers(0, 1000))
def test_model_output_bounded(alpha, beta, seed):
    s = np.random.default_rng(seed).normal(0, 10, 50)
    c = LinearConcentrationModel(alpha, beta)(s)
    assert c.min() >= 0 and c.max() <= 1


def test_volume_examples():
    g = Geometry(np.full((100, 100), 0.4), np.full((100, 100), 0.02), 1e-4)
    assert total_volume(np.zeros((100, 100)), g) == 0.0
    assert total_volume(np.ones((100, 100)), g) == pytest.approx(0.008, rel=1e-12)


def test_volume_matches_independent_sum(rng):
    c, phi = rng.uniform(size=(2, 37, 53))
    depth = rng.uniform(0.018, 0.028, (37, 53))
    g = Geometry(phi, depth, 2.5e-7)
    ref = sum(float(c[i, j]) * float(phi[i, j]) * float(depth[i, j]) * 2.5e-7
              for i in range(37) for j in range(53))
    assert total_volume(c, g) == pytest.approx(ref, rel=1e-12)


def test_volume_additive_over_partition(rng):
    c, phi = rng.uniform(size=(2, 40, 60))
    g = Geometry(phi, np.full(phi.shape, 0.02), 1e-6)
    parts = rng.integers(0, 5, c.shape)
    total = sum(total_volume(np.where(parts == k, c, 0.0), g) for k in range(5))
    assert total == pytest.approx(total_volume(c, g), rel=1e-12)


def test_geometry_validation(gray_image):
    with pytest.raises(ValueError):
        Geometry(np.full((2, 2), 1.2), np.ones((2, 2)), 1.0)
    with pytest.raises(ValueError):
        Geometry(np.full((2, 2), 0.3), np.zeros((2, 2)), 1.0)
    with pytest.raises(ValueError):
        Geometry(np.full((2, 2), 0.3), np.ones((3, 2)), 1.0)
    g = Geometry.for_image(gray_image, 0.4, 0.02)
    assert g.pixel_area == pytest.approx(0.01 ** 2)
    with pytest.raises(ValueError):
        total_volume(np.ones((3, 3)), g)


# -- concentration and calibration ------------------------------------------


STAGES = ((3600.0, 500 * ML_PER_HOUR), (3600.0, 1000 * ML_PER_HOUR))


@pytest.fixture(scope="module")
def plume():
    spec = SynthSpec(seed=0, rows=128, cols=128, width=1.0, height=1.0, noise=0.005, stages=STAGES,
                     frames_per_stage=4, n_references=1)
    return gen_plume_sequence(spec)


def _geometry(ps):
    return Geometry(ps.porosity, ps.depth, (1.0 / 128) ** 2)


def test_reference_gives_zero_concentration(plume):
    c = concentration(plume.reference, [plume.reference], LinearConcentrationModel(1.5))
    assert np.all(c.plane == 0)


def test_uncalibrated_model_rejected(plume):
    with pytest.raises(CalibrationError):
        concentration(plume.frames[0], [plume.reference], None)


def test_reconstruction_with_known_model(plume):
    model = LinearConcentrationModel(plume.alpha, plume.beta)
    for frame, truth in zip(plume.frames, plume.concentrations):
        c = concentration(frame, [plume.reference], model).plane
        edge = (truth > 0) & (truth < truth.max())
        band = ndimage.binary_dilation(edge, iterations=3)
        assert np.sqrt(np.mean((c - truth)[~band] ** 2)) <= 0.02


def test_calibration_recovers_alpha(plume):
    cfg = RegularizationConfig(mu=0.002)
    m = calibrate(plume.frames[:4], None, 500 * ML_PER_HOUR, _geometry(plume), [plume.reference], cfg)
    assert abs(m.alpha / plume.alpha - 1) <= 0.01 and m.beta == 0.0


def test_calibration_validates_at_doubled_rate(plume):
    cfg = RegularizationConfig(mu=0.002)
    geo = _geometry(plume)
    m = calibrate(plume.frames[:4], None, 500 * ML_PER_HOUR, geo, [plume.reference], cfg)
    vols = [total_volume(concentration(f, [plume.reference], m, cfg), geo) for f in plume.frames[4:]]
    np.testing.assert_allclose(vols, plume.volumes[4:], rtol=0.02)


def test_calibration_scale_equivariance(rng):
    geo = Geometry(np.full((30, 30), 0.4), np.full((30, 30), 0.02), 1e-4)
    yy, xx = np.mgrid[0:30, 0:30]
    r = np.hypot(yy - 15, xx - 15)
    signals = [0.3 * (r < 4 + 2 * k) + 0.01 * rng.uniform(size=r.shape) for k in range(4)]
    times = [100.0, 200.0, 300.0, 400.0]
    a = calibrate_signals(signals, times, 1e-9, geo).alpha
    for k in (0.5, 3.0):
        b = calibrate_signals([k * s for s in signals], times, 1e-9, geo).alpha
        assert b == pytest.approx(a / k, rel=1e-6)


def test_calibration_errors(plume):
    geo = _geometry(plume)
    same = [plume.reference] * 3
    with pytest.raises(CalibrationError):
        calibrate(same, [1.0, 2.0, 3.0], 500 * ML_PER_HOUR, geo, [plume.reference])
    with pytest.raises(CalibrationError):
        calibrate(plume.frames[:1], [1.0], 500 * ML_PER_HOUR, geo, [plume.reference])
    with pytest.raises(CalibrationError):
        calibrate(plume.frames[:2], [2.0, 1.0], 500 * ML_PER_HOUR, geo, [plume.reference])
    with pytest.raises(CalibrationError):
        calibrate(plume.frames[:2], None, 0.0, geo, [plume.reference])


def test_beta_pinned_by_zero_region(plume):
    geo = _geometry(plume)
    shifted = [f.with_data(np.clip(f.data + 0.01, 0, 1)) for f in plume.frames[:4]]
    m = calibrate(shifted, None, 500 * ML_PER_HOUR, geo, [plume.reference],
                  zero_region=((0.0, 0.8), (0.2, 1.0)))
    assert m.beta < 0
    c = concentration(shifted[0], [plume.reference], m).plane
    assert abs(c[:25, :25].mean()) <= 0.01


# -- comparisons ------------------------------------------------------------


def test_identical_masks_full_overlap(rng):
    m = rng.uniform(size=(20, 30)) > 0.5
    _, fr = compare_segmentations([m, m, m])
    assert fr["overlap_3"] == 1.0
    assert fr["unique_0"] == fr["unique_1"] == fr["unique_2"] == fr["overlap_2"] == 0.0


def test_disjoint_masks():
    a = np.zeros((10, 10), bool)
    b = np.zeros((10, 10), bool)
    a[:3] = True
    b[5:] = True
    _, fr = compare_segmentations([a, b])
    assert fr["unique_0"] == pytest.approx(30 / 80) and fr["unique_1"] == pytest.approx(50 / 80)
    assert fr["overlap_2"] == 0.0


@pytest.mark.parametrize("n", [2, 3, 4])
def test_fractions_match_pixel_counting(n):
    rng = np.random.default_rng(n)
    masks = [rng.uniform(size=(25, 35)) > rng.uniform(0.3, 0.8) for _ in range(n)]
    _, fr = compare_segmentations(masks)
    counts, union = region_counts(masks)
    for key, count in counts.items():
        assert fr[key] == pytest.approx(count / union, abs=1e-15)
    assert sum(fr.values()) == pytest.approx(1.0, abs=1e-12)


def test_comparison_permutation_symmetry(rng):
    masks = [rng.uniform(size=(20, 20)) > 0.5 for _ in range(3)]
    _, fr = compare_segmentations(masks)
    for perm in itertools.permutations(range(3)):
        _, fp = compare_segmentations([masks[p] for p in perm])
        for new, old in enumerate(perm):
            assert fp[f"unique_{new}"] == fr[f"unique_{old}"]
        assert fp["overlap_2"] == fr["overlap_2"] and fp["overlap_3"] == fr["overlap_3"]


def test_weighted_fractions():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[:, :2] = True
    b[:, 2:] = True
    w = np.ones((4, 4))
    w[:, 2:] = 3.0
    _, fr = compare_segmentations([a, b], weights=w)
    assert fr["unique_0"] == pytest.approx(0.25) and fr["unique_1"] == pytest.approx(0.75)


def test_comparison_image_colors(rgb_image):
    a = np.zeros(rgb_image.shape, bool)
    a[:20] = True
    b = np.zeros(rgb_image.shape, bool)
    b[10:30] = True
    masks = [new_image(m.astype(float), rgb_image.width, rgb_image.height, colorspace="BINARY") for m in (a, b)]
    img, _ = compare_segmentations(masks)
    legend = comparison_legend(2)
    np.testing.assert_allclose(img.data[0, 0], legend["unique_0"])
    np.testing.assert_allclose(img.data[25, 0], legend["unique_1"])
    np.testing.assert_allclose(img.data[15, 0], legend["overlap_2"])
    np.testing.assert_allclose(img.data[35, 0], 0.0)


def test_comparison_errors():
    with pytest.raises(ValueError):
        compare_segmentations([np.ones((3, 3))])
    with pytest.raises(ImageError):
        compare_segmentations([np.ones((3, 3)), np.ones((3, 4))])
    a = new_image(np.ones((4, 4)), 1.0, 1.0, colorspace="BINARY")
    b = new_image(np.ones((4, 4)), 2.0, 1.0, colorspace="BINARY")
    with pytest.raises(ImageError):
        compare_segmentations([a, b])


# -- finger tips ------------------------------------------------------------


def _front_mask(front, rows=80):
    """Mask of all pixels whose center lies above ``front`` (one value per column)."""
    yy = np.arange(rows)[:, None] + 0.5
    return yy <= np.asarray(front)[None, :]


def test_flat_front_has_no_tips():
    assert len(detect_finger_tips(_front_mask(np.full(120, 30.0)))) == 0


def test_three_fingers():
    x = np.arange(150) + 0.5
    centers, depths = (30.5, 75.5, 120.5), (25, 35, 30)
    front = 20 + sum(d * np.exp(-((x - c) / 5) ** 2) for c, d in zip(centers, depths))
    tips = detect_finger_tips(_front_mask(front))
    assert len(tips) == 3
    truth = np.array([[np.floor(20 + d - 0.5), c - 0.5] for c, d in zip(centers, depths)])
    assert np.abs(tips - truth).max() <= 2


def test_half_disk_apex():
    yy, xx = np.mgrid[0:80, 0:128] + 0.5
    mask = (yy <= 20) | ((yy - 20) ** 2 + (xx - 64.5) ** 2 <= 15 ** 2)
    tips = detect_finger_tips(mask)
    assert len(tips) == 1
    assert np.abs(tips[0] - [34, 64]).max() <= 1


def test_tips_in_other_directions():
    x = np.arange(120) + 0.5
    front = 20 + 25 * np.exp(-((x - 60.5) / 5) ** 2)
    down = _front_mask(front)
    up = down[::-1]
    right = down.T
    assert np.abs(detect_finger_tips(up, axis="up")[0] - [80 - 1 - 44, 60]).max() <= 1
    assert np.abs(detect_finger_tips(right, axis="right")[0] - [60, 44]).max() <= 1
    assert np.abs(detect_finger_tips(right[:, ::-1], axis="left")[0] - [60, 80 - 1 - 44]).max() <= 1


def test_tips_roi_and_physical_coordinates():
    x = np.arange(150) + 0.5
    front = 20 + sum(25 * np.exp(-((x - c) / 5) ** 2) for c in (30.5, 120.5))
    img = new_image(_front_mask(front).astype(float), 1.5, 0.8, colorspace="BINARY")
    tips = detect_finger_tips(img, roi=((0.0, 0.0), (0.75, 0.8)))
    assert len(tips) == 1
    np.testing.assert_allclose(tips[0], img.coordinates.pixel_to_phys(np.array([44.0, 30.0])), atol=0.02)
    assert len(detect_finger_tips(np.zeros((20, 20), bool))) == 0
    with pytest.raises(ValueError):
        detect_finger_tips(np.ones((5, 5)), axis="sideways")


# -- tracking ---------------------------------------------------------------


def test_stationary_tips():
    tips = [np.array([[10.0, 5.0], [40.0, 5.0]])] * 5
    trs = track_fingers(tips)
    assert len(trs) == 2
    for tr in trs:
        assert tr.length == 0.0 and len(tr.times) == 5


def test_moving_tip():
    tips = [np.array([[50.0, 100.0 - 2.0 * k]]) for k in range(11)]
    trs = track_fingers(tips, times=np.arange(11) * 60.0)
    assert len(trs) == 1
    np.testing.assert_allclose(trs[0].steps, np.tile([0.0, -2.0], (10, 1)), atol=0.5)
    assert trs[0].weight == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_crossing_matches_assignment_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 6, (2, 2))
    b = a[::-1] + rng.normal(0, 1.0, (2, 2))  # tips swap places
    trs = track_fingers([a, b], hop_radius=20.0)
    assert len(trs) == 2
    perm = best_assignment(a, b)
    for i, j in enumerate(perm):
        tr = next(t for t in trs if np.array_equal(t.tips[0], a[i]))
        np.testing.assert_array_equal(tr.tips[1], b[j])


def test_hop_radius_starts_new_tracks():
    trs = track_fingers([np.array([[0.0, 0.0]]), np.array([[50.0, 0.0]])], hop_radius=10.0)
    assert len(trs) == 2 and all(len(t.times) == 1 for t in trs)


def test_tracking_deterministic_and_table(rng):
    tips = [rng.uniform(0, 100, (4, 2)) for _ in range(6)]
    a = track_fingers(tips, hop_radius=30.0)
    b = track_fingers([t[::-1] for t in tips], hop_radius=30.0)
    assert trajectories_table(a) == trajectories_table(b)
    lengths = [t.length for t in a]
    assert max(t.weight for t in a) == 1.0
    for t in a:
        assert t.weight == pytest.approx(t.length / max(lengths))
    text = write_csv(["trajectory", "time", "x", "y"], trajectories_table(a))
    assert text.splitlines()[0] == "trajectory,time,x,y"
    assert len(text.splitlines()) == 1 + sum(len(t.times) for t in a)


def test_tracking_errors():
    with pytest.raises(ValueError):
        track_fingers([np.zeros((1, 2))])
    with pytest.raises(ValueError):
        track_fingers([np.zeros((1, 2))] * 2, times=[1.0, 1.0])


def test_trajectory_length():
    tr = FingerTrajectory(np.arange(3.0), np.array([[0.0, 0.0], [3.0, 4.0], [3.0, 0.0]]))
    assert tr.length == 9.0
