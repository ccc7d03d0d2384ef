import numpy as np
import pytest

from physimg.corrections import (
    ColorCorrection,
    CorrectionError,
    GeometricCorrection,
    apply_color_correction,
    apply_corrections,
    apply_drift_correction,
    apply_geometric_correction,
    build_geometric_correction,
    checker_swatches,
    classic_checker,
    estimate_drift,
    fit_color_correction,
    fit_drift_correction,
    homography_from_corners,
    shift_image,
    swatch_means,
)
from physimg.imgcore import extract_roi, new_image
from physimg.synthlab import SynthSpec, gen_color_checker, gen_laser_grid, sand_texture

from oracles import line_centroids

ROI = ((0.075, 0.05), (0.225, 0.15))


def _checker(matrix=None, offset=(0.0, 0.0, 0.0), noise=0.0, seed=0):
    spec = SynthSpec(seed=seed, rows=200, cols=300, width=0.3, height=0.2, cast_matrix=matrix,
                     cast_offset=offset, noise=noise)
    return gen_color_checker(spec)


# -- color ------------------------------------------------------------------


def test_classic_checker_data():
    c = classic_checker()
    assert c.shape == (24, 3)
    assert np.all((c >= 0) & (c <= 1))


def test_identity_fit():
    ch = _checker()
    cc = fit_color_correction(ch.image, ch.swatch_roi)
    np.testing.assert_allclose(cc.matrix, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(cc.offset, 0.0, atol=1e-10)


def test_half_intensity_gives_double_matrix():
    ch = _checker(matrix=0.5 * np.eye(3))
    cc = fit_color_correction(ch.image, ch.swatch_roi)
    np.testing.assert_allclose(cc.matrix, 2 * np.eye(3), atol=1e-8)
    np.testing.assert_allclose(cc.offset, 0.0, atol=1e-8)


def test_noisy_fit_matches_independent_least_squares():
    sigma = 0.01
    ch = _checker(noise=sigma, seed=3)
    cc = fit_color_correction(ch.image, ch.swatch_roi)
    boxes = [b for b, _ in checker_swatches(ch.swatch_roi)]
    obs = swatch_means(ch.image, boxes)
    # normal equations solved independently
    A = np.hstack([obs, np.ones((24, 1))])
    X = np.linalg.solve(A.T @ A, A.T @ ch.targets)
    np.testing.assert_allclose(cc.matrix, X[:3].T, atol=1e-8)
    np.testing.assert_allclose(cc.offset, X[3], atol=1e-8)
    # swatch means average hundreds of pixels, so the residual is far below 3 sigma
    assert cc.residual <= 3 * sigma


def test_cast_is_recovered_and_swatches_match():
    M = [[0.8, 0.1, 0.02], [0.05, 0.75, 0.1], [0.03, 0.08, 0.7]]
    ch = _checker(matrix=M, offset=(0.05, 0.08, 0.1))
    cc = fit_color_correction(ch.image, ch.swatch_roi)
    assert cc.residual <= 1e-6
    out = apply_color_correction(cc, ch.image)
    boxes = [b for b, _ in checker_swatches(ch.swatch_roi)]
    assert np.abs(swatch_means(out, boxes) - ch.targets).max() <= cc.residual + 1e-12


def test_refit_on_corrected_is_identity():
    M = [[0.9, 0.05, 0.0], [0.0, 0.85, 0.05], [0.02, 0.0, 0.8]]
    ch = _checker(matrix=M, offset=(0.02, 0.03, 0.04))
    out = apply_color_correction(fit_color_correction(ch.image, ch.swatch_roi), ch.image)
    cc2 = fit_color_correction(out, ch.swatch_roi)
    np.testing.assert_allclose(cc2.matrix, np.eye(3), atol=1e-8)
    np.testing.assert_allclose(cc2.offset, 0.0, atol=1e-8)


def test_apply_identity_and_doubling(rng):
    img = new_image(rng.uniform(0, 0.5, (10, 12, 3)), 1.2, 1.0)
    assert np.array_equal(apply_color_correction(ColorCorrection.identity(), img).data, img.data)
    doubled = apply_color_correction(ColorCorrection(2 * np.eye(3), np.zeros(3)), img)
    np.testing.assert_allclose(doubled.data, 2 * img.data, atol=1e-15)
    clipped = apply_color_correction(ColorCorrection(4 * np.eye(3), np.zeros(3)), img)
    assert clipped.data.max() <= 1.0


def test_color_errors(gray_image):
    ch = _checker()
    with pytest.raises(CorrectionError):
        apply_color_correction(ColorCorrection.identity(), gray_image)
    with pytest.raises(CorrectionError):
        fit_color_correction(ch.image, ((5.0, 5.0), (6.0, 6.0)))
    flat = new_image(np.full((200, 300, 3), 0.5), 0.3, 0.2)
    with pytest.raises(CorrectionError):
        fit_color_correction(flat, ch.swatch_roi)


def test_color_commutes_with_roi():
    ch = _checker(matrix=0.7 * np.eye(3), offset=(0.1, 0.1, 0.1))
    cc = fit_color_correction(ch.image, ch.swatch_roi)
    a = extract_roi(apply_color_correction(cc, ch.image), (0.05, 0.02), (0.2, 0.12))
    b = apply_color_correction(cc, extract_roi(ch.image, (0.05, 0.02), (0.2, 0.12)))
    assert np.abs(a.data - b.data).max() <= 1e-10


def test_color_serialization():
    ch = _checker(matrix=0.7 * np.eye(3))
    cc = fit_color_correction(ch.image, ch.swatch_roi)
    back = ColorCorrection.from_dict(cc.to_dict())
    np.testing.assert_array_equal(back.matrix, cc.matrix)
    np.testing.assert_array_equal(back.offset, cc.offset)


# -- geometry ---------------------------------------------------------------


def _rect(rows, cols):
    return np.array([[0.0, 0.0], [cols, 0.0], [cols, rows], [0.0, rows]])


def test_homography_maps_corners():
    src = _rect(100, 200)
    dst = np.array([[10.0, 5.0], [215.0, 12.0], [205.0, 118.0], [3.0, 101.0]])
    H = homography_from_corners(src, dst)
    p = np.hstack([src, np.ones((4, 1))]) @ H.T
    np.testing.assert_allclose(p[:, :2] / p[:, 2:], dst, atol=1e-9)


def test_collinear_corners_rejected():
    with pytest.raises(CorrectionError):
        homography_from_corners(_rect(10, 10), [[0, 0], [1, 1], [2, 2], [0, 5]])
    with pytest.raises(CorrectionError):
        build_geometric_correction([[0, 0], [10, 0], [5, 5], [10, 10]], 1.0, 1.0)


def test_identity_correction(rng):
    img = new_image(rng.uniform(size=(30, 40, 3)), 0.4, 0.3)
    gc = build_geometric_correction(_rect(30, 40), 0.4, 0.3)
    out = apply_geometric_correction(gc, img)
    assert np.abs(out.data - img.data).max() <= 1e-12
    assert out.width == 0.4 and out.height == 0.3


def test_crop_reduces_size(rng):
    img = new_image(rng.uniform(size=(100, 200)), 0.2, 0.1)
    corners = np.array([[90.0, 0.0], [200.0, 0.0], [200.0, 100.0], [90.0, 100.0]])
    gc = build_geometric_correction(corners, 0.11, 0.1)
    out = apply_geometric_correction(gc, img)
    assert out.shape == (100, 110)
    assert np.abs(out.plane - img.plane[:, 90:]).max() <= 1e-12


def test_known_homography_is_inverted():
    H = np.array([[1.05, 0.04, 30], [0.02, 0.98, 25], [4e-5, 2e-5, 1.0]])
    corners = np.array([H @ [x, y, 1] for x, y in _rect(300, 500)])
    corners = corners[:, :2] / corners[:, 2:]
    gc = build_geometric_correction(corners, 0.5, 0.3, shape=(300, 500))
    gx, gy = np.meshgrid(np.linspace(0, 500, 11), np.linspace(0, 300, 7))
    pts = np.stack([gx.ravel(), gy.ravel()], -1)
    expect = np.hstack([pts, np.ones((len(pts), 1))]) @ H.T
    expect = expect[:, :2] / expect[:, 2:]
    assert np.abs(gc.forward(pts) - expect).max() <= 0.1


def test_bijectivity_with_bulge_and_stretch(rng):
    corners = np.array([[12.0, 8.0], [410.0, 15.0], [402.0, 298.0], [5.0, 290.0]])
    gc = build_geometric_correction(corners, 0.4, 0.3, bulge=(0.03, -0.02), stretch=(0.05, -0.04, 0.2, -0.1),
                                    shape=(300, 400))
    pts = rng.uniform([0, 0], [400, 300], (1000, 2))
    assert np.abs(gc.inverse(gc.forward(pts)) - pts).max() <= 0.1


def test_stretch_fold_rejected():
    with pytest.raises(CorrectionError):
        build_geometric_correction(_rect(10, 10), 1, 1, stretch=(1.5, 0, 0, 0))


def test_warp_then_correct_checkerboard():
    rows, cols = 240, 320
    yy, xx = np.mgrid[0:rows, 0:cols]
    board = (((yy // 20) + (xx // 20)) % 2).astype(float)
    H = np.array([[0.95, 0.03, 20], [-0.02, 1.02, 15], [2e-5, -1e-5, 1.0]])
    corners = np.array([H @ [x, y, 1] for x, y in _rect(rows, cols)])
    corners = corners[:, :2] / corners[:, 2:]
    gc = build_geometric_correction(corners, 0.32, 0.24, shape=(rows, cols))
    # forward-warp oracle: render the distorted image by inverting H per pixel
    out_shape = (int(np.ceil(corners[:, 1].max())) + 2, int(np.ceil(corners[:, 0].max())) + 2)
    py, px = np.mgrid[0:out_shape[0], 0:out_shape[1]].astype(float) + 0.5
    q = np.stack([px, py, np.ones_like(px)], -1) @ np.linalg.inv(H).T
    tx, ty = q[..., 0] / q[..., 2], q[..., 1] / q[..., 2]
    inside = (tx >= 0) & (tx < cols) & (ty >= 0) & (ty < rows)
    distorted = np.where(inside, (((np.floor(ty) // 20) + (np.floor(tx) // 20)) % 2), 0.0)
    img = new_image(distorted, out_shape[1] * 1e-3, out_shape[0] * 1e-3)
    back = apply_geometric_correction(gc, img).plane > 0.5
    # compare away from checker edges and the image border
    edge = np.zeros((rows, cols), bool)
    for k in range(0, max(rows, cols) + 1, 20):
        edge[:, max(k - 2, 0):k + 2] = True
        edge[max(k - 2, 0):k + 2, :] = True
    edge[:2] = edge[-2:] = True
    edge[:, :2] = edge[:, -2:] = True
    assert np.mean(back[~edge] == board.astype(bool)[~edge]) >= 0.99


def test_laser_grid_spacing_uniform_after_correction():
    H = np.array([[1.05, 0.04, 30], [0.02, 0.98, 25], [4e-5, 2e-5, 1.0]])
    lg = gen_laser_grid(SynthSpec(rows=600, cols=1000, width=1.0, height=0.6, homography=H.tolist(),
                                  bulge=(0.02, 0.015), noise=0.01))
    gc = build_geometric_correction(lg.corners, 1.0, 0.6, bulge=lg.bulge, shape=(600, 1000))
    out = apply_geometric_correction(gc, lg.image).plane
    cx = line_centroids(out.mean(axis=0), 100, 10)
    cy = line_centroids(out[::-1].mean(axis=1), 100, 6)
    spacings = np.concatenate([np.diff(cx), np.diff(cy)])
    assert np.abs(spacings / 100 - 1).max() <= 1e-3


def test_identity_laser_grid_spacing_is_exact():
    lg = gen_laser_grid(SynthSpec(rows=300, cols=500, width=0.5, height=0.3))
    cx = line_centroids(lg.image.plane.mean(axis=0), 100, 5)
    np.testing.assert_allclose(np.diff(cx), 100.0, atol=1e-9)


def test_geometry_serialization():
    corners = np.array([[2.0, 1.0], [98.0, 3.0], [97.0, 51.0], [1.0, 49.0]])
    gc = build_geometric_correction(corners, 1.0, 0.5, bulge=(0.01, 0.02), shape=(50, 100))
    back = GeometricCorrection.from_dict(gc.to_dict())
    np.testing.assert_allclose(back.homography, gc.homography)
    assert back.bulge == gc.bulge and back.shape == gc.shape


# -- drift ------------------------------------------------------------------


@pytest.fixture(scope="module")
def textured():
    rng = np.random.default_rng(7)
    return new_image(np.clip(sand_texture((200, 200), 2.5, 0.15, rng), 0, 1), 0.2, 0.2)


DRIFT_ROI = ((0.04, 0.04), (0.16, 0.16))


def test_drift_of_reference_is_zero(textured):
    assert estimate_drift(textured, textured, DRIFT_ROI) == (0.0, 0.0)


@pytest.mark.parametrize("t", [(5, -3), (-7, 2), (0, 9), (-12, -12)])
def test_integer_drift_exact(textured, t):
    moved = shift_image(textured, *t)
    dx, dy = estimate_drift(moved, textured, DRIFT_ROI)
    assert (dx, dy) == pytest.approx(t, abs=1e-6)


def test_subpixel_drift(textured):
    moved = shift_image(textured, 0.5, 0.0)
    dx, dy = estimate_drift(moved, textured, DRIFT_ROI)
    assert abs(dx - 0.5) <= 0.25 and abs(dy) <= 0.25


def test_drift_correction_reestimate_small(textured):
    moved = shift_image(textured, 3.4, -2.3)
    dc = fit_drift_correction(moved, textured, DRIFT_ROI)
    fixed = apply_drift_correction(dc, moved)
    dx, dy = estimate_drift(fixed, textured, DRIFT_ROI)
    assert np.hypot(dx, dy) <= 0.25


def test_flat_roi_rejected():
    flat = new_image(np.full((50, 50), 0.4), 0.05, 0.05)
    with pytest.raises(CorrectionError):
        estimate_drift(flat, flat, ((0.01, 0.01), (0.04, 0.04)))


def test_corrections_compose_in_order(textured):
    calls = []

    def deformation(img):
        calls.append("deformation")
        return img

    rgb = textured.with_data(np.repeat(textured.data, 3, axis=-1), "RGB")
    out = apply_corrections(rgb, color=ColorCorrection.identity(), deformation=deformation)
    assert calls == ["deformation"]
    assert np.array_equal(out.data, rgb.data)
