import math

import numpy as np
import pytest

from physimg.synthlab import (
    ML_PER_HOUR,
    SynthSpec,
    gen_color_checker,
    gen_facies,
    gen_grain_pack,
    gen_laser_grid,
    gen_plume_sequence,
    gen_warp_pair,
    sand_texture,
)

from oracles import line_centroids


# -- grain packs ------------------------------------------------------------


def test_empty_pack():
    g = gen_grain_pack(SynthSpec(rows=64, cols=64, n_grains=0))
    assert g.porosity == 1.0 and np.all(g.indicator.plane == 1)


def test_single_disk():
    r = 10.0
    g = gen_grain_pack(SynthSpec(rows=101, cols=101, width=0.101, height=0.101, n_grains=1, grain_radius_px=r))
    # the pixel count of a rasterized disk approximates its area to O(r)
    assert g.porosity == pytest.approx(1 - math.pi * r * r / 101 ** 2, abs=2 * math.pi * r / 101 ** 2)
    assert g.porosity == 1.0 - (1.0 - g.indicator.plane).mean()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_target_porosity(seed):
    g = gen_grain_pack(SynthSpec(seed=seed, rows=200, cols=200, target_porosity=0.4))
    assert abs(g.porosity - 0.4) <= 0.01
    assert g.porosity == g.indicator.plane.mean()


def test_grains_do_not_overlap():
    g = gen_grain_pack(SynthSpec(seed=3, rows=160, cols=160, target_porosity=0.35))
    d = np.linalg.norm(g.centers[:, None] - g.centers[None], axis=-1)
    gap = d - (g.radii[:, None] + g.radii[None])
    np.fill_diagonal(gap, np.inf)
    assert gap.min() >= -1e-9


def test_grain_pack_preconditions():
    with pytest.raises(ValueError):
        gen_grain_pack(SynthSpec(target_porosity=0.7))
    with pytest.raises(ValueError):
        gen_grain_pack(SynthSpec(grain_radius_px=2.0))


# -- warp pairs -------------------------------------------------------------


def test_zero_amplitude_pair_identical():
    p = gen_warp_pair(SynthSpec(seed=1, rows=64, cols=96, amplitude_px=0.0))
    np.testing.assert_array_equal(p.reference.plane, p.secondary.plane)


def test_constant_shift_by_indexing():
    p = gen_warp_pair(SynthSpec(seed=2, rows=64, cols=96, amplitude_px=6.0, direction=(1.0, 0.0)))
    # reference(x) = secondary(x + u): column j of the reference is column j + 6 of the secondary
    np.testing.assert_array_equal(p.reference.plane[:, :-6], p.secondary.plane[:, 6:])
    assert np.all(p.field_px[0] == 6.0) and np.all(p.field_px[1] == 0.0)


def test_sinusoid_amplitude():
    p = gen_warp_pair(SynthSpec(seed=3, rows=128, cols=128, field_kind="sinusoidal", amplitude_px=4.0,
                                wavelength_px=64.0))
    assert np.hypot(*p.field_px).max() == pytest.approx(4.0, abs=1e-12)


def test_field_phys_units():
    spec = SynthSpec(seed=3, rows=64, cols=128, width=0.256, height=0.064, amplitude_px=2.0, direction=(0.0, 1.0))
    ux, uy = gen_warp_pair(spec).field_phys()
    np.testing.assert_allclose(ux, 0.0, atol=1e-15)
    np.testing.assert_allclose(uy, -2.0 * 1e-3)  # two rows down is negative physical y


def test_fine_band_mask():
    p = gen_warp_pair(SynthSpec(rows=100, cols=50, fine_band=(0.25, 0.5)))
    assert p.fine_mask[25:50].all() and not p.fine_mask[:25].any() and not p.fine_mask[50:].any()


def test_texture_statistics(rng):
    t = sand_texture((256, 256), 2.0, 0.1, rng, mean=0.4)
    assert t.mean() == pytest.approx(0.4, abs=1e-12) and t.std() == pytest.approx(0.1, rel=1e-12)


# -- plume sequences --------------------------------------------------------


def _plume(**kw):
    base = dict(seed=0, rows=96, cols=96, width=1.0, height=1.0, frames_per_stage=3)
    base.update(kw)
    return gen_plume_sequence(SynthSpec(**base))


def test_zero_rate_frames_equal_reference():
    ps = _plume(stages=((3600.0, 0.0),))
    for f in ps.frames:
        np.testing.assert_array_equal(f.data, ps.reference.data)


def test_volume_follows_injection():
    stages = ((3600.0, 500 * ML_PER_HOUR), (1800.0, 1000 * ML_PER_HOUR), (1800.0, 0.0))
    ps = _plume(stages=stages)
    for t, v in zip(ps.times, ps.volumes):
        expected = 500 * ML_PER_HOUR * min(t, 3600) + 1000 * ML_PER_HOUR * min(max(t - 3600, 0), 1800)
        assert v == pytest.approx(expected, rel=1e-9)


def test_masks_are_thresholded_concentration():
    ps = _plume()
    for c, m in zip(ps.concentrations, ps.masks):
        np.testing.assert_array_equal(m, c >= 0.5)


def test_signal_is_inverse_model():
    ps = _plume(noise=0.0, alpha=2.0)
    for f, c in zip(ps.frames, ps.concentrations):
        s = f.data.max(axis=-1) - ps.reference.data.max(axis=-1)
        np.testing.assert_allclose(s, c / 2.0, atol=1e-12)


def test_timestamps():
    ps = _plume(stages=((600.0, ML_PER_HOUR),), frames_per_stage=3)
    np.testing.assert_allclose(ps.times, [200.0, 400.0, 600.0])
    assert [f.timestamp for f in ps.frames] == list(ps.times)


def test_overfull_injection_rejected():
    with pytest.raises(ValueError):
        _plume(stages=((3600.0, 1e-5),))


# -- facies, charts and grids -----------------------------------------------


def test_facies_labels_follow_interfaces():
    fa = gen_facies(SynthSpec(seed=4, rows=120, cols=80, layers=4, noise=0.0))
    assert set(np.unique(fa.labels)) == {0, 1, 2, 3}
    values = [np.unique(fa.image.plane[fa.labels == k]) for k in range(4)]
    assert all(len(v) == 1 for v in values)
    assert sorted(float(v[0]) for v in values) == pytest.approx([0.2, 0.4, 0.6, 0.8])


def test_color_checker_cast():
    M = [[0.9, 0.05, 0.0], [0.0, 0.85, 0.1], [0.05, 0.0, 0.8]]
    ch = gen_color_checker(SynthSpec(rows=200, cols=300, cast_matrix=M, cast_offset=(0.05, 0.08, 0.1)))
    np.testing.assert_allclose(ch.observed, ch.targets @ np.array(M).T + [0.05, 0.08, 0.1], atol=1e-15)
    with pytest.raises(ValueError):
        gen_color_checker(SynthSpec(cast_matrix=np.eye(3) * 2))


def test_identity_laser_grid_spacing():
    lg = gen_laser_grid(SynthSpec(rows=300, cols=500, width=0.5, height=0.3, spacing=0.1))
    assert lg.image.shape == (300, 500)
    cols = line_centroids(lg.image.plane[150], 100, 5)
    rows = line_centroids(lg.image.plane[:, 250], 100, 3)
    # the centroid window is one pixel off-center, which biases each line equally
    np.testing.assert_allclose(np.diff(cols), 100.0, atol=1e-9)
    np.testing.assert_allclose(np.diff(rows), 100.0, atol=1e-9)
    np.testing.assert_allclose(cols, [100, 200, 300, 400], atol=1e-3)


def test_laser_grid_corners():
    H = np.array([[1.05, 0.04, 30.0], [0.02, 0.98, 25.0], [4e-5, 2e-5, 1.0]])
    lg = gen_laser_grid(SynthSpec(rows=300, cols=500, width=0.5, height=0.3, homography=H.tolist()))
    for k, (x, y) in enumerate([(0, 0), (500, 0), (500, 300), (0, 300)]):
        w = H[2, 0] * x + H[2, 1] * y + H[2, 2]
        expect = ((H[0, 0] * x + H[0, 1] * y + H[0, 2]) / w, (H[1, 0] * x + H[1, 1] * y + H[1, 2]) / w)
        np.testing.assert_allclose(lg.corners[k], expect, rtol=1e-12)


# -- determinism ------------------------------------------------------------


@pytest.mark.parametrize("gen, spec", [
    (gen_grain_pack, SynthSpec(seed=9, rows=96, cols=96, noise=0.02)),
    (gen_warp_pair, SynthSpec(seed=9, rows=96, cols=96, field_kind="sinusoidal", amplitude_px=3.0, noise=0.02)),
    (gen_plume_sequence, SynthSpec(seed=9, rows=64, cols=64, width=1.0, height=1.0, noise=0.02, ripple=0.02)),
    (gen_facies, SynthSpec(seed=9, rows=64, cols=64, layers=3, noise=0.02)),
    (gen_laser_grid, SynthSpec(seed=9, rows=100, cols=100, width=0.1, height=0.1, noise=0.02,
                               homography=[[1, 0.01, 5], [0, 1, 5], [0, 0, 1]])),
])
def test_generators_deterministic(gen, spec):
    a, b = gen(spec), gen(SynthSpec.from_dict(spec.to_dict()))
    for name, va in vars(a).items():
        vb = getattr(b, name)
        if hasattr(va, "data"):
            np.testing.assert_array_equal(va.data, vb.data)
        elif isinstance(va, list):
            for x, y in zip(va, vb):
                np.testing.assert_array_equal(getattr(x, "data", x), getattr(y, "data", y))
        else:
            np.testing.assert_array_equal(va, vb)


def test_seed_changes_output():
    a = gen_warp_pair(SynthSpec(seed=1, rows=32, cols=32)).reference.plane
    b = gen_warp_pair(SynthSpec(seed=2, rows=32, cols=32)).reference.plane
    assert not np.array_equal(a, b)


def test_spec_round_trip():
    spec = SynthSpec(seed=5, stages=((10.0, 1e-7), (5.0, 0.0)), fine_band=(0.1, 0.2), direction=(0.0, 1.0))
    assert SynthSpec.from_dict(spec.to_dict()) == spec
