"""Systematic corrections: color normalization, rectification and drift.

Corrections are immutable once fitted and are applied in the order
color -> geometry -> drift (-> deformation, see :mod:`physimg.align`), which is
what :func:`apply_corrections` does.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .imgcore import ColorSpace, ImageError, PhysicalImage, new_image, roi_slices
from .matching import match_translation

__all__ = [
    "CorrectionError",
    "ColorCorrection",
    "GeometricCorrection",
    "DriftCorrection",
    "classic_checker",
    "checker_swatches",
    "fit_color_correction",
    "apply_color_correction",
    "homography_from_corners",
    "build_geometric_correction",
    "apply_geometric_correction",
    "estimate_drift",
    "fit_drift_correction",
    "apply_drift_correction",
    "apply_corrections",
]

Box = tuple[tuple[float, float], tuple[float, float]]


class CorrectionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Color


def classic_checker() -> np.ndarray:
    """Reference colors of the 24-patch classic checker as a (24, 3) array in [0, 1]."""
    text = resources.files("physimg.data").joinpath("colorchecker.json").read_text()
    data = json.loads(text)
    return np.array([s["rgb8"] for s in data["swatches"]], dtype=float) / 255.0


def checker_swatches(swatch_roi: Box, layout=(4, 6), inset: float = 0.25, targets=None) -> list:
    """Swatch boxes of a checker filling ``swatch_roi`` in a row-major grid.

    Each cell is shrunk by ``inset`` of its size on every side so that swatch
    means avoid the borders between patches. Targets default to the classic
    checker colors.
    """
    (x0, y0), (x1, y1) = swatch_roi
    nr, nc = layout
    cw, ch = (x1 - x0) / nc, (y1 - y0) / nr
    if targets is None:
        targets = classic_checker()
    out = []
    for k in range(nr * nc):
        i, j = divmod(k, nc)
        top = y1 - i * ch
        box = ((x0 + (j + inset) * cw, top - (1 - inset) * ch), (x0 + (j + 1 - inset) * cw, top - inset * ch))
        out.append((box, np.asarray(targets[k], dtype=float)))
    return out


@dataclass(frozen=True)
class ColorCorrection:
    """Affine color map ``c -> M @ c + b`` fitted on reference swatches."""

    matrix: np.ndarray
    offset: np.ndarray
    swatch_roi: Optional[Box] = None
    reference_swatches: tuple = ()
    residual: float = 0.0  # max abs deviation on the swatches after fitting
    rms: float = 0.0

    @classmethod
    def identity(cls) -> "ColorCorrection":
        return cls(np.eye(3), np.zeros(3))

    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "offset": self.offset.tolist(),
            "swatch_roi": None if self.swatch_roi is None else [list(p) for p in self.swatch_roi],
            "residual": self.residual,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ColorCorrection":
        roi = d.get("swatch_roi")
        return cls(
            np.asarray(d["matrix"], dtype=float),
            np.asarray(d["offset"], dtype=float),
            None if roi is None else (tuple(roi[0]), tuple(roi[1])),
            residual=float(d.get("residual", 0.0)),
        )


def swatch_means(image: PhysicalImage, boxes: Sequence[Box]) -> np.ndarray:
    out = []
    for ll, ur in boxes:
        try:
            rs, cs = roi_slices(image.coordinates, ll, ur)
        except ImageError as exc:
            raise CorrectionError(f"swatch {ll}-{ur} lies outside the image") from exc
        out.append(image.data[rs, cs].reshape(-1, image.channels).mean(axis=0))
    return np.array(out)


def fit_color_correction(image: PhysicalImage, swatch_roi: Box, reference_swatches=None) -> ColorCorrection:
    """Least-squares affine color map sending observed swatch means to targets.

    ``reference_swatches`` is a list of ``(box, rgb)`` pairs with boxes in
    physical coordinates; by default the classic 24-patch checker layout inside
    ``swatch_roi`` is used.
    """
    if image.colorspace is not ColorSpace.RGB:
        raise CorrectionError("color correction requires an RGB image")
    if reference_swatches is None:
        reference_swatches = checker_swatches(swatch_roi)
    if len(reference_swatches) < 4:
        raise CorrectionError("at least 4 swatches are required")
    boxes = [b for b, _ in reference_swatches]
    targets = np.array([t for _, t in reference_swatches], dtype=float)
    obs = swatch_means(image, boxes)
    if np.linalg.matrix_rank(obs - obs.mean(axis=0), tol=1e-8) < 3:
        raise CorrectionError("observed swatch colors are degenerate (rank < 3)")
    A = np.hstack([obs, np.ones((len(obs), 1))])
    X, *_ = np.linalg.lstsq(A, targets, rcond=None)
    M, b = X[:3].T, X[3]
    fitted = obs @ M.T + b
    res = fitted - targets
    return ColorCorrection(
        M, b, swatch_roi, tuple((tuple(map(tuple, bx)), tuple(t)) for bx, t in zip(boxes, targets)),
        float(np.abs(res).max()), float(np.sqrt(np.mean(res ** 2))),
    )


def apply_color_correction(correction: ColorCorrection, image: PhysicalImage) -> PhysicalImage:
    """Pointwise ``M @ c + b`` clamped to [0, 1]."""
    if image.colorspace is not ColorSpace.RGB:
        raise CorrectionError("color correction requires an RGB image")
    out = image.data @ correction.matrix.T + correction.offset
    return image.with_data(np.clip(out, 0.0, 1.0), ColorSpace.RGB)


# ---------------------------------------------------------------------------
# Geometry
#
# Points are continuous pixel coordinates (x, y) with the top-left corner of
# the image at (0, 0) and pixel centers at half-integers.


def _apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p = pts @ H[:, :2].T + H[:, 2]
    return p[..., :2] / p[..., 2:3]


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def homography_from_corners(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 homography H with ``H(src[k]) = dst[k]`` for four correspondences."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    for pts in (src, dst):
        for k in range(4):
            tri = [pts[k], pts[(k + 1) % 4], pts[(k + 2) % 4]]
            if abs(_cross(*tri)) < 1e-9 * max(1.0, np.ptp(pts) ** 2):
                raise CorrectionError("corner points are collinear")
    A = np.zeros((8, 8))
    rhs = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * k], rhs[2 * k + 1] = u, v
    h = np.linalg.solve(A, rhs)
    return np.append(h, 1.0).reshape(3, 3)


def _is_convex(quad: np.ndarray) -> bool:
    signs = [np.sign(_cross(quad[k], quad[(k + 1) % 4], quad[(k + 2) % 4])) for k in range(4)]
    return all(s == signs[0] and s != 0 for s in signs)


def _hat(t: np.ndarray, c: float) -> np.ndarray:
    """Piecewise-linear profile on [-1, 1]: 0 at both ends, 1 at ``c``."""
    return np.where(t <= c, (t + 1) / (c + 1), (1 - t) / (1 - c)).clip(0.0, 1.0)


@dataclass(frozen=True)
class GeometricCorrection:
    """Rectification ``target -> source``: homography o bulge o stretch.

    Bulge displaces normalized coordinates by ``(bx * xi * (1 - eta^2),
    by * eta * (1 - xi^2))``; stretch moves the line ``xi = cx`` by ``sx``
    (and ``eta = cy`` by ``sy``) with piecewise-linear profiles. Both fix the
    corners of the target rectangle, so the homography is determined by the
    four corner correspondences alone.
    """

    corners: np.ndarray  # (4, 2) source positions of TL, TR, BR, BL
    target_width: float
    target_height: float
    shape: tuple[int, int]
    bulge: tuple[float, float] = (0.0, 0.0)
    stretch: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)  # sx, sy, cx, cy
    homography: np.ndarray = field(default=None)

    def _normalized(self, pts):
        rows, cols = self.shape
        return 2 * pts[..., 0] / cols - 1, 2 * pts[..., 1] / rows - 1

    def _denormalized(self, xi, eta):
        rows, cols = self.shape
        return np.stack([(xi + 1) * cols / 2, (eta + 1) * rows / 2], axis=-1)

    def _warp(self, pts: np.ndarray) -> np.ndarray:
        xi, eta = self._normalized(pts)
        sx, sy, cx, cy = self.stretch
        xi, eta = xi + sx * _hat(xi, cx), eta + sy * _hat(eta, cy)
        bx, by = self.bulge
        xi, eta = xi + bx * xi * (1 - eta ** 2), eta + by * eta * (1 - xi ** 2)
        return self._denormalized(xi, eta)

    def forward(self, pts) -> np.ndarray:
        """Target pixel coordinates -> source pixel coordinates."""
        pts = np.asarray(pts, dtype=float)
        return _apply_homography(self.homography, self._warp(pts))

    def inverse(self, pts, iterations: int = 100) -> np.ndarray:
        """Source pixel coordinates -> target pixel coordinates."""
        w = _apply_homography(np.linalg.inv(self.homography), np.asarray(pts, dtype=float))
        z = w.copy()
        for _ in range(iterations):
            step = self._warp(z) - w
            z = z - step
            if np.max(np.abs(step), initial=0.0) < 1e-12:
                break
        return z

    def to_dict(self) -> dict:
        return {
            "corners": np.asarray(self.corners).tolist(),
            "target_width": self.target_width,
            "target_height": self.target_height,
            "shape": list(self.shape),
            "bulge": list(self.bulge),
            "stretch": list(self.stretch),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeometricCorrection":
        return build_geometric_correction(
            d["corners"], d["target_width"], d["target_height"], d.get("bulge", (0, 0)),
            d.get("stretch", (0, 0, 0, 0)), tuple(d["shape"]) if d.get("shape") else None,
        )


def build_geometric_correction(
    corners,
    target_w: float,
    target_h: float,
    bulge=(0.0, 0.0),
    stretch=(0.0, 0.0, 0.0, 0.0),
    shape: Optional[tuple[int, int]] = None,
) -> GeometricCorrection:
    """Rectification from four source corners (TL, TR, BR, BL) onto a
    ``target_w x target_h`` meter rectangle sampled with ``shape`` pixels.

    Without ``shape`` the pixel size follows the mean side lengths of the
    source quadrilateral.
    """
    corners = np.asarray(corners, dtype=float)
    if corners.shape != (4, 2):
        raise CorrectionError("expected four (x, y) corners")
    if target_w <= 0 or target_h <= 0:
        raise CorrectionError("target dimensions must be positive")
    if not _is_convex(corners):
        raise CorrectionError("corners must form a convex quadrilateral")
    if shape is None:
        w = 0.5 * (np.linalg.norm(corners[1] - corners[0]) + np.linalg.norm(corners[2] - corners[3]))
        h = 0.5 * (np.linalg.norm(corners[3] - corners[0]) + np.linalg.norm(corners[2] - corners[1]))
        shape = (int(round(h)), int(round(w)))
    rows, cols = shape
    sx, sy, cx, cy = stretch
    if abs(sx) >= min(1 + cx, 1 - cx) or abs(sy) >= min(1 + cy, 1 - cy):
        raise CorrectionError("stretch would fold the domain")
    rect = np.array([[0.0, 0.0], [cols, 0.0], [cols, rows], [0.0, rows]])
    H = homography_from_corners(rect, corners)
    return GeometricCorrection(corners, float(target_w), float(target_h), (int(rows), int(cols)),
                               tuple(map(float, bulge)), tuple(map(float, stretch)), H)


def _sample(data: np.ndarray, pts: np.ndarray, fill: float = 0.0, order: int = 1) -> np.ndarray:
    """Bilinear lookup of a (rows, cols, p) array at continuous (x, y) points."""
    coords = []
    for v, n in ((pts[..., 1] - 0.5, data.shape[0]), (pts[..., 0] - 0.5, data.shape[1])):
        # points inside the outer half pixel belong to the image, not the fill
        inside = (v >= -0.5) & (v <= n - 0.5)
        coords.append(np.where(inside, np.clip(v, 0, n - 1), v))
    out = np.empty(pts.shape[:-1] + (data.shape[2],))
    for c in range(data.shape[2]):
        out[..., c] = ndimage.map_coordinates(data[..., c], coords, order=order, mode="constant", cval=fill)
    return out


def apply_geometric_correction(correction: GeometricCorrection, image: PhysicalImage,
                               fill: float = 0.0) -> PhysicalImage:
    """Resample ``image`` onto the target rectangle with bilinear interpolation."""
    rows, cols = correction.shape
    yy, xx = np.mgrid[0:rows, 0:cols].astype(float) + 0.5
    src = correction.forward(np.stack([xx, yy], axis=-1))
    out = _sample(image.data, src, fill)
    if image.colorspace is ColorSpace.BINARY:
        out = (out >= 0.5).astype(float)
    return new_image(np.clip(out, 0, 1), correction.target_width, correction.target_height,
                     timestamp=image.timestamp, colorspace=image.colorspace)


# ---------------------------------------------------------------------------
# Drift


@dataclass(frozen=True)
class DriftCorrection:
    """Translation aligning images to ``reference`` on a static ROI."""

    reference: PhysicalImage
    drift_roi: Box
    max_shift: int = 20
    shift: tuple[float, float] = (0.0, 0.0)


def _gray(image: PhysicalImage) -> np.ndarray:
    if image.channels == 1:
        return image.plane
    return image.data.mean(axis=-1)


def estimate_drift(image: PhysicalImage, reference: PhysicalImage, drift_roi: Box,
                   max_shift: int = 20) -> tuple[float, float]:
    """Pixel translation ``(dx, dy)`` of ``image`` relative to ``reference``.

    ``dx`` counts columns (positive right), ``dy`` rows (positive down), so
    ``image(x) ~ reference(x - (dx, dy))``. The estimate maximizes the
    normalized cross-correlation of the ROI and is refined to subpixel accuracy.
    """
    if not image.same_geometry(reference):
        raise CorrectionError("image and reference differ in geometry")
    rs, cs = roi_slices(reference.coordinates, *drift_roi)
    ref = _gray(reference)
    if np.std(ref[rs, cs]) < 1e-9:
        raise CorrectionError("drift ROI has no texture (zero variance)")
    m = match_translation(ref, _gray(image), rs, cs, max_shift)
    return float(m.shift[1]), float(m.shift[0])


def shift_image(image: PhysicalImage, dx: float, dy: float) -> PhysicalImage:
    """Translate image content by (dx, dy) pixels; edges are extended."""
    out = np.empty_like(image.data)
    for c in range(image.channels):
        if float(dx).is_integer() and float(dy).is_integer():
            out[..., c] = ndimage.shift(image.data[..., c], (dy, dx), order=0, mode="nearest")
        else:
            out[..., c] = ndimage.shift(image.data[..., c], (dy, dx), order=1, mode="nearest")
    return image.with_data(np.clip(out, 0, 1), image.colorspace)


def fit_drift_correction(image: PhysicalImage, reference: PhysicalImage, drift_roi: Box,
                         max_shift: int = 20) -> DriftCorrection:
    shift = estimate_drift(image, reference, drift_roi, max_shift)
    return DriftCorrection(reference, drift_roi, max_shift, shift)


def apply_drift_correction(correction: DriftCorrection, image: PhysicalImage) -> PhysicalImage:
    """Estimate the drift of ``image`` against the correction's reference and undo it."""
    dx, dy = estimate_drift(image, correction.reference, correction.drift_roi, correction.max_shift)
    return shift_image(image, -dx, -dy)


def apply_corrections(image: PhysicalImage, color: Optional[ColorCorrection] = None,
                      geometry: Optional[GeometricCorrection] = None, drift: Optional[DriftCorrection] = None,
                      deformation=None) -> PhysicalImage:
    """Apply corrections in initialization order: color, geometry, drift, deformation.

    ``deformation`` is a callable taking and returning a PhysicalImage, e.g. a
    bound :func:`physimg.align.warp`.
    """
    if color is not None:
        image = apply_color_correction(color, image)
    if geometry is not None:
        image = apply_geometric_correction(geometry, image)
    if drift is not None:
        image = apply_drift_correction(drift, image)
    if deformation is not None:
        image = deformation(image)
    return image
