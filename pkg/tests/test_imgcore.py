import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from physimg.imgcore import (
    ColorSpace,
    CoordinateSystem,
    ImageError,
    add_grid,
    assemble,
    blend_weights_1d,
    extract_roi,
    load,
    make_patches,
    new_image,
    save,
    to_colorspace,
)


# -- construction -----------------------------------------------------------


def test_benchmark_scale_pitch_is_one_millimeter():
    img = new_image(np.zeros((1500, 2800, 3)), 2.8, 1.5)
    assert img.pitch == pytest.approx((1e-3, 1e-3), abs=1e-15)
    assert img.colorspace is ColorSpace.RGB


def test_zero_gray_image():
    img = new_image(np.zeros((2, 2, 1)), 1.0, 1.0, origin=(0.0, 0.0))
    assert img.colorspace is ColorSpace.GRAY
    assert img.channels == 1
    assert np.all(img.data == 0)


@pytest.mark.parametrize(
    "data, width, height",
    [
        (np.full((4, 4, 3), np.nan), 1.0, 1.0),
        (np.zeros((4, 4)), 0.0, 1.0),
        (np.zeros((4, 4)), 1.0, -2.0),
        (np.zeros((4, 4, 2)), 1.0, 1.0),
        (np.zeros((1, 4)), 1.0, 1.0),
    ],
)
def test_invalid_images_rejected(data, width, height):
    with pytest.raises(ImageError):
        new_image(data, width, height)


def test_single_nan_rejected():
    data = np.zeros((4, 4, 3))
    data[1, 2, 0] = np.nan
    with pytest.raises(ImageError):
        new_image(data, 1.0, 1.0)


def test_binary_must_be_zero_one():
    with pytest.raises(ImageError):
        new_image(np.full((3, 3), 0.5), 1.0, 1.0, colorspace="BINARY")


def test_image_is_immutable(gray_image):
    with pytest.raises(ValueError):
        gray_image.data[0, 0, 0] = 1.0


# -- coordinates ------------------------------------------------------------


def test_pixel_centers_map_to_expected_coordinates():
    cs = CoordinateSystem(rows=4, cols=5, width=5.0, height=2.0, origin=(1.0, -1.0))
    xy = cs.pixel_to_phys([[0, 0], [3, 4]])
    np.testing.assert_allclose(xy, [[1.5, 0.75], [5.5, -0.75]])


@settings(max_examples=50, deadline=None)
@given(
    rows=st.integers(2, 300),
    cols=st.integers(2, 300),
    width=st.floats(1e-3, 10.0),
    height=st.floats(1e-3, 10.0),
    ox=st.floats(-5, 5),
    oy=st.floats(-5, 5),
)
def test_coordinate_round_trip(rows, cols, width, height, ox, oy):
    cs = CoordinateSystem(rows, cols, width, height, (ox, oy))
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    pix = np.stack([r, c], axis=-1)
    back = cs.phys_to_pixel(cs.pixel_to_phys(pix))
    assert np.array_equal(np.rint(back).astype(int), pix)
    assert np.abs(back - pix).max() < 1e-6
    # physical round trip in meters
    xy = cs.pixel_to_phys(pix)
    assert np.abs(cs.pixel_to_phys(cs.phys_to_pixel(xy)) - xy).max() <= 1e-9


# -- I/O --------------------------------------------------------------------


@pytest.mark.parametrize("suffix", [".png", ".tif"])
@pytest.mark.parametrize("channels", [1, 3])
def test_save_load_round_trip(tmp_path, rng, suffix, channels):
    data = rng.uniform(0, 1, (8, 8, channels))
    if suffix == ".png":
        # PNG stores 16-bit integers; representable values round-trip exactly
        data = np.round(data * 65535) / 65535
    img = new_image(data, 2.8, 1.5, origin=(0.25, -0.5), timestamp=123.5)
    path = save(img, tmp_path / f"x{suffix}")
    back = load(path)
    assert np.array_equal(back.data, img.data)
    assert back.width == 2.8 and back.height == 1.5
    assert back.origin == (0.25, -0.5)
    assert back.timestamp == 123.5
    assert back.colorspace is img.colorspace


def test_binary_round_trip(tmp_path, rng):
    img = new_image((rng.uniform(size=(9, 7)) > 0.5).astype(float), 1.0, 1.0, colorspace="BINARY")
    back = load(save(img, tmp_path / "m.png"))
    assert back.colorspace is ColorSpace.BINARY
    assert np.array_equal(back.data, img.data)


def test_load_rejects_inconsistent_sidecar(tmp_path, gray_image):
    import json

    path = save(gray_image, tmp_path / "g.tif")
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text())
    meta["rows"] += 1
    side.write_text(json.dumps(meta))
    with pytest.raises(ImageError):
        load(path)


def test_load_requires_sidecar(tmp_path, gray_image):
    path = save(gray_image, tmp_path / "g.tif")
    path.with_suffix(".json").unlink()
    with pytest.raises(ImageError):
        load(path)


# -- ROI --------------------------------------------------------------------


def test_roi_full_domain_is_identity(rgb_image):
    x0, x1, y0, y1 = rgb_image.coordinates.extent
    roi = extract_roi(rgb_image, (x0, y0), (x1, y1))
    assert np.array_equal(roi.data, rgb_image.data)
    assert roi.same_geometry(rgb_image)


def test_roi_size_on_benchmark_image():
    img = new_image(np.zeros((1500, 2800)), 2.8, 1.5)
    roi = extract_roi(img, (1.0, 0.5), (1.4, 0.9))
    assert roi.shape == (400, 400)
    assert roi.origin == pytest.approx((1.0, 0.5))
    assert roi.width == pytest.approx(0.4) and roi.height == pytest.approx(0.4)


def test_roi_outside_domain_raises(rgb_image):
    with pytest.raises(ImageError):
        extract_roi(rgb_image, (5.0, 5.0), (6.0, 6.0))


def test_roi_is_clipped(rgb_image):
    roi = extract_roi(rgb_image, (-1.0, -1.0), (0.3, 0.3))
    assert roi.origin == pytest.approx(rgb_image.origin)


def test_roi_pixels_are_parent_pixels_with_centers_inside(rgb_image):
    ll, ur = (0.237, 0.31), (0.452, 0.55)
    roi = extract_roi(rgb_image, ll, ur)
    xy = rgb_image.coordinates.pixel_to_phys(
        np.stack(np.meshgrid(np.arange(rgb_image.rows), np.arange(rgb_image.cols), indexing="ij"), -1))
    inside = (xy[..., 0] >= ll[0]) & (xy[..., 0] <= ur[0]) & (xy[..., 1] >= ll[1]) & (xy[..., 1] <= ur[1])
    assert roi.data.shape[0] * roi.data.shape[1] == inside.sum()
    assert np.array_equal(roi.data.reshape(-1, 3), rgb_image.data[inside])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=8, max_size=8))
def test_roi_composition(u):
    img = new_image(np.arange(50 * 70, dtype=float).reshape(50, 70) / (50 * 70), 0.7, 0.5)
    ax0, ax1 = sorted((u[0] * 0.7, u[1] * 0.7))
    ay0, ay1 = sorted((u[2] * 0.5, u[3] * 0.5))
    bx0, bx1 = sorted((u[4] * 0.7, u[5] * 0.7))
    by0, by1 = sorted((u[6] * 0.5, u[7] * 0.5))
    # keep boxes well away from pixel-center ties
    for v in (ax0, ax1, ay0, ay1, bx0, bx1, by0, by1):
        if abs((v / 0.01) % 1 - 0.5) < 1e-6:
            return
    try:
        a = extract_roi(img, (ax0, ay0), (ax1, ay1))
        nested = extract_roi(a, (bx0, by0), (bx1, by1))
    except ImageError:
        return
    direct = extract_roi(img, (max(ax0, bx0), max(ay0, by0)), (min(ax1, bx1), min(ay1, by1)))
    assert np.array_equal(nested.data, direct.data)
    assert nested.origin == pytest.approx(direct.origin)


# -- color spaces -----------------------------------------------------------


def _pixel(rgb):
    return new_image(np.tile(np.asarray(rgb, float), (2, 2, 1)), 1.0, 1.0)


def test_black_and_white_conversions():
    from physimg.imgcore import key_channel

    black, white = _pixel([0, 0, 0]), _pixel([1, 1, 1])
    assert np.all(key_channel(black) == 1.0)
    assert np.all(to_colorspace(black, "NEGKEY").data == 0.0)
    assert np.allclose(to_colorspace(white, "GRAY").data, 1.0)
    assert np.all(to_colorspace(white, "NEGKEY").data == 1.0)


def test_negkey_is_channel_max():
    assert np.all(to_colorspace(_pixel([0.5, 0.25, 0.0]), "NEGKEY").data == 0.5)


def test_gray_is_luma():
    out = to_colorspace(_pixel([0.2, 0.4, 0.6]), "GRAY").data
    assert np.allclose(out, 0.2126 * 0.2 + 0.7152 * 0.4 + 0.0722 * 0.6, atol=1e-15)


def test_unsupported_conversion(gray_image):
    with pytest.raises(ImageError):
        to_colorspace(gray_image, "HSV")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.integers(0, 2), st.floats(0, 1))
def test_negkey_and_gray_monotone(rgb, channel, bump):
    lo = np.array(rgb)
    hi = lo.copy()
    hi[channel] = max(hi[channel], bump)
    for target in ("NEGKEY", "GRAY"):
        a = to_colorspace(_pixel(lo), target).data[0, 0, 0]
        b = to_colorspace(_pixel(hi), target).data[0, 0, 0]
        assert b >= a - 1e-15


# -- patches ----------------------------------------------------------------


def test_exact_tiling():
    img = new_image(np.random.default_rng(0).uniform(size=(100, 100)), 1.0, 1.0)
    ps = make_patches(img, 2, 2, 0.0)
    assert [[p.shape for p in row] for row in ps] == [[(50, 50)] * 2] * 2
    # patch (0, 1) is the top right quarter
    assert ps[0][1].origin == pytest.approx((0.5, 0.5))
    assert np.array_equal(assemble(ps).data, img.data)


def test_single_patch_is_identity(rgb_image):
    ps = make_patches(rgb_image, 1, 1, 0.2)
    assert np.array_equal(ps[0][0].data, rgb_image.data)
    assert ps[0][0].same_geometry(rgb_image)


def test_benchmark_partition_count():
    img = new_image(np.zeros((150, 280)), 2.8, 1.5)
    assert make_patches(img, 16, 32).count == 512


def test_too_small_patches(gray_image):
    with pytest.raises(ImageError):
        make_patches(gray_image, 20, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.0, 0.49))
def test_partition_of_unity(num_v, num_h, overlap):
    rng = np.random.default_rng(num_v * 7 + num_h)
    img = new_image(rng.uniform(size=(37, 53, 3)), 0.53, 0.37)
    ps = make_patches(img, num_v, num_h, overlap)
    total = np.zeros(img.shape)
    for i in range(num_v):
        for j in range(num_h):
            rs, cs = ps.footprint(i, j)
            total[rs, cs] += ps.weights(i, j)
    assert np.abs(total - 1).max() <= 1e-12
    assert np.abs(assemble(ps).data - img.data).max() <= 1e-12


def test_overlap_strip_follows_weight_profile():
    img = new_image(np.full((20, 40), 0.5), 0.4, 0.2)
    ps = make_patches(img, 1, 2, 0.25)
    ps.patches[0][0] = ps[0][0].with_data(np.ones(ps[0][0].shape))
    ps.patches[0][1] = ps[0][1].with_data(np.zeros(ps[0][1].shape))
    out = assemble(ps).plane[0]
    w_left = blend_weights_1d(40, ps.col_edges, ps.col_pad)[0]
    np.testing.assert_allclose(out, w_left, atol=1e-15)
    # the strip is a genuine ramp, not a step
    assert np.any((out > 0) & (out < 1))


# -- grid -------------------------------------------------------------------


def test_grid_lines_every_100_px():
    img = new_image(np.zeros((300, 500)), 0.5, 0.3)
    out = add_grid(img, 0.1, 0.1).plane
    cols = np.flatnonzero(out.all(axis=0))
    rows = np.flatnonzero(out.all(axis=1))
    assert np.all(np.diff(cols) == 100)
    assert np.all(np.diff(rows) == 100)


def test_grid_spacing_larger_than_domain():
    img = new_image(np.zeros((30, 50)), 0.5, 0.3)
    out = add_grid(img, 1.0, 1.0).plane
    assert np.flatnonzero(out.all(axis=0)).tolist() == [0]
    assert np.flatnonzero(out.all(axis=1)).tolist() == [29]


def test_grid_pixel_count():
    img = new_image(np.zeros((300, 500)), 0.5, 0.3)
    out = add_grid(img, 0.1, 0.1).plane
    n_v, n_h = 5, 3  # x = 0..0.4, y = 0..0.2 (the far edges fall outside)
    expected = n_v * 300 + n_h * 500 - n_v * n_h
    assert int(out.sum()) == expected


def test_grid_too_fine(gray_image):
    with pytest.raises(ImageError):
        add_grid(gray_image, gray_image.pitch[0], 0.1)
