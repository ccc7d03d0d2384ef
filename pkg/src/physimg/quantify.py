"""Concentration, volumes, segmentation comparison and finger tracking."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.optimize import brentq, linear_sum_assignment
from scipy.signal import find_peaks

from .imgcore import ColorSpace, ImageError, PhysicalImage, new_image, roi_slices
from .regularize import RegularizationConfig, regularize_array
from .segment import ChannelSelector, ReferenceStack, difference_signal

logger = logging.getLogger(__name__)

__all__ = [
    "CalibrationError",
    "LinearConcentrationModel",
    "Geometry",
    "FingerTrajectory",
    "signal_field",
    "concentration",
    "total_volume",
    "volume_series",
    "calibrate_signals",
    "calibrate",
    "compare_segmentations",
    "comparison_legend",
    "detect_finger_tips",
    "track_fingers",
    "write_csv",
    "trajectories_table",
]


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class LinearConcentrationModel:
    """``c = clip(alpha * s + beta, 0, 1)`` for a signal ``s``."""

    alpha: float
    beta: float = 0.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError("alpha must be positive")

    def __call__(self, signal: np.ndarray) -> np.ndarray:
        return np.clip(self.alpha * np.asarray(signal, dtype=float) + self.beta, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearConcentrationModel":
        return cls(float(d["alpha"]), float(d.get("beta", 0.0)))


FieldLike = Union[float, np.ndarray, PhysicalImage]


def _plane(value: FieldLike, shape: tuple[int, int], name: str) -> np.ndarray:
    if isinstance(value, PhysicalImage):
        arr = value.plane
    else:
        arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(shape, float(arr))
    if arr.shape != shape:
        raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
    return arr


@dataclass
class Geometry:
    """Volume measure per pixel: porosity x depth x pixel area."""

    porosity: np.ndarray
    depth: np.ndarray
    pixel_area: float

    def __post_init__(self) -> None:
        self.porosity = np.asarray(self.porosity, dtype=float)
        self.depth = np.asarray(self.depth, dtype=float)
        if self.porosity.shape != self.depth.shape:
            raise ValueError("porosity and depth differ in shape")
        if np.any((self.porosity < 0) | (self.porosity > 1)):
            raise ValueError("porosity must lie in [0, 1]")
        if np.any(self.depth <= 0):
            raise ValueError("depth must be positive")
        if self.pixel_area <= 0:
            raise ValueError("pixel area must be positive")

    @classmethod
    def for_image(cls, image: PhysicalImage, porosity: FieldLike = 1.0, depth: FieldLike = 1.0) -> "Geometry":
        shape = image.shape
        return cls(_plane(porosity, shape, "porosity"), _plane(depth, shape, "depth"),
                   image.coordinates.pixel_area)

    @property
    def shape(self) -> tuple[int, int]:
        return self.porosity.shape

    @property
    def cell_volume(self) -> np.ndarray:
        return self.porosity * self.depth * self.pixel_area


def total_volume(concentration_field: Union[np.ndarray, PhysicalImage], geometry: Geometry) -> float:
    """``sum(c * porosity * depth * pixel_area)`` in m^3."""
    c = concentration_field.plane if isinstance(concentration_field, PhysicalImage) else np.asarray(concentration_field)
    if c.shape != geometry.shape:
        raise ValueError(f"field shape {c.shape} does not match geometry {geometry.shape}")
    return float(np.sum(c * geometry.cell_volume))


def signal_field(image: PhysicalImage, references: Union[ReferenceStack, Sequence[PhysicalImage]],
                 reg_config: RegularizationConfig = RegularizationConfig(), channel: ChannelSelector = "negkey",
                 use_floor: bool = False) -> np.ndarray:
    """Difference signal to the base reference, TV-regularized at the configured scale.

    The signed difference is regularized before any cutoff, so zero-mean noise
    outside the plume averages out instead of accumulating as a positive bias.
    Subtracting the fused noise floor (``use_floor``) lowers the signal
    everywhere and hence biases volumes; it is off by default here.
    """
    stack = references if isinstance(references, ReferenceStack) else ReferenceStack(list(references))
    s = difference_signal(image, stack, channel, use_floor, clamp=False)
    mu = reg_config.mu
    if isinstance(mu, PhysicalImage) or np.any(np.asarray(mu) > 0):
        s, _ = regularize_array(s, image.pitch, reg_config, like=image)
    return s


def concentration(image: PhysicalImage, references: Union[ReferenceStack, Sequence[PhysicalImage]],
                  model: Optional[LinearConcentrationModel], reg_config: RegularizationConfig = RegularizationConfig(),
                  channel: ChannelSelector = "negkey", use_floor: bool = False) -> PhysicalImage:
    """Concentration image ``clip(alpha * s + beta, 0, 1)`` of a prepared secondary image."""
    if model is None:
        raise CalibrationError("no concentration model given; calibrate first")
    c = model(signal_field(image, references, reg_config, channel, use_floor))
    out = new_image(c, image.width, image.height, image.origin, image.timestamp, ColorSpace.GRAY)
    out.metadata["model"] = model.to_dict()
    return out


def volume_series(signals: Sequence[np.ndarray], model: LinearConcentrationModel, geometry: Geometry) -> np.ndarray:
    return np.array([total_volume(model(s), geometry) for s in signals])


def _slope(times: np.ndarray, values: np.ndarray) -> float:
    t = times - times.mean()
    return float(np.dot(t, values - values.mean()) / np.dot(t, t))


def calibrate_signals(signals: Sequence[np.ndarray], times: Sequence[float], injection_rate: float,
                      geometry: Geometry, beta: float = 0.0) -> LinearConcentrationModel:
    """Scale ``alpha`` such that the fitted volume growth rate equals ``injection_rate``.

    The growth rate is the least-squares slope of the total volume over the
    series; it increases monotonically with ``alpha``, so the root is
    bracketed and found with Brent's method.

    Raises:
        CalibrationError: fewer than two frames, no signal growth, or no
            positive ``alpha`` matching the rate.
    """
    times = np.asarray(times, dtype=float)
    if len(signals) < 2 or len(signals) != len(times):
        raise CalibrationError("calibration needs at least two frames with times")
    if np.any(np.diff(times) <= 0):
        raise CalibrationError("times must increase strictly")
    if injection_rate <= 0:
        raise CalibrationError("injection rate must be positive")

    sig = [np.asarray(s, dtype=float) for s in signals]

    def rate(alpha: float) -> float:
        return _slope(times, volume_series(sig, LinearConcentrationModel(alpha, beta), geometry))

    # no-clipping estimate as the starting point of the bracket
    raw = _slope(times, np.array([float(np.sum(s * geometry.cell_volume)) for s in sig]))
    if not raw > 0:
        raise CalibrationError("signal does not grow over the series")
    lo = hi = injection_rate / raw
    for _ in range(200):
        if rate(lo) <= injection_rate:
            break
        lo /= 2
    else:
        raise CalibrationError("no positive alpha matches the injection rate")
    for _ in range(200):
        if rate(hi) >= injection_rate:
            break
        hi *= 2
    else:
        raise CalibrationError("injection rate cannot be reached before saturation")
    if lo == hi:
        return LinearConcentrationModel(lo, beta)
    alpha = brentq(lambda a: rate(a) - injection_rate, lo, hi, xtol=1e-15, rtol=1e-13, maxiter=200)
    return LinearConcentrationModel(float(alpha), beta)


def calibrate(image_series: Sequence[PhysicalImage], times: Optional[Sequence[float]], injection_rate: float,
              geometry: Geometry, references: Union[ReferenceStack, Sequence[PhysicalImage]],
              reg_config: RegularizationConfig = RegularizationConfig(), channel: ChannelSelector = "negkey",
              use_floor: bool = False, zero_region=None) -> LinearConcentrationModel:
    """Fit the linear model to a constant-rate injection series.

    ``times`` default to the image timestamps. ``zero_region`` (a physical
    box ``((x0, y0), (x1, y1))``) pins ``beta`` so that the mean concentration
    there is zero for the first frame; otherwise ``beta = 0``.
    """
    if times is None:
        times = [im.timestamp for im in image_series]
        if any(t is None for t in times):
            raise CalibrationError("images lack timestamps; pass times explicitly")
    signals = [signal_field(im, references, reg_config, channel, use_floor) for im in image_series]
    beta = 0.0
    model = calibrate_signals(signals, times, injection_rate, geometry)
    if zero_region is not None:
        rs, cs = roi_slices(image_series[0].coordinates, *zero_region)
        for _ in range(20):
            beta_new = -model.alpha * float(np.mean(signals[0][rs, cs]))
            if abs(beta_new - beta) <= 1e-12:
                break
            beta = beta_new
            model = calibrate_signals(signals, times, injection_rate, geometry, beta)
    return model


# ---------------------------------------------------------------------------
# Segmentation comparison

_PALETTE = np.array([
    [0.894, 0.102, 0.110], [0.216, 0.494, 0.722], [0.302, 0.686, 0.290], [0.596, 0.306, 0.639],
    [1.000, 0.498, 0.000], [1.000, 1.000, 0.200], [0.651, 0.337, 0.157], [0.969, 0.506, 0.749],
])


def _overlap_gray(k: int, n: int) -> float:
    """Linear gray ramp: light for two masks, dark for all ``n``."""
    if n <= 2:
        return 0.3
    return 0.8 - 0.5 * (k - 2) / (n - 2)


def _mask_array(m) -> np.ndarray:
    return (m.plane if isinstance(m, PhysicalImage) else np.asarray(m)) > 0.5


def compare_segmentations(masks: Sequence[Union[PhysicalImage, np.ndarray]], weights: Optional[FieldLike] = None):
    """Comparison image and fractions of unique and overlapping regions.

    Categories are ``unique_i`` (only mask ``i``) and ``overlap_k`` (exactly
    ``k >= 2`` masks). Fractions are (weighted) shares of the union; empty
    categories are reported as 0. The image is RGB: mask colors for unique
    regions, a gray ramp over the overlap count, black outside the union.

    Returns:
        (image, fractions) where image is a PhysicalImage if the first mask
        is one, else a plain array.
    """
    n = len(masks)
    if n < 2:
        raise ValueError("comparison needs at least two masks")
    arrs = [_mask_array(m) for m in masks]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ImageError("masks differ in shape")
    physical = [m for m in masks if isinstance(m, PhysicalImage)]
    if any(not physical[0].same_geometry(m) for m in physical[1:]):
        raise ImageError("masks differ in geometry")
    w = np.ones(shape) if weights is None else _plane(weights, shape, "weights")
    stack = np.stack(arrs)
    card = stack.sum(axis=0)
    union_weight = float(np.sum(w[card > 0]))
    rgb = np.zeros(shape + (3,))
    fractions: dict[str, float] = {}
    for i in range(n):
        sel = (card == 1) & stack[i]
        rgb[sel] = _PALETTE[i % len(_PALETTE)]
        fractions[f"unique_{i}"] = float(np.sum(w[sel])) / union_weight if union_weight > 0 else 0.0
    for k in range(2, n + 1):
        sel = card == k
        rgb[sel] = _overlap_gray(k, n)
        fractions[f"overlap_{k}"] = float(np.sum(w[sel])) / union_weight if union_weight > 0 else 0.0
    if physical:
        p = physical[0]
        return new_image(rgb, p.width, p.height, p.origin, colorspace=ColorSpace.RGB), fractions
    return rgb, fractions


def comparison_legend(n: int) -> dict:
    """Category colors used by :func:`compare_segmentations`."""
    out = {f"unique_{i}": _PALETTE[i % len(_PALETTE)].tolist() for i in range(n)}
    out.update({f"overlap_{k}": [_overlap_gray(k, n)] * 3 for k in range(2, n + 1)})
    return out


# ---------------------------------------------------------------------------
# Fingers

_AXES = ("down", "up", "left", "right")


def detect_finger_tips(mask: Union[PhysicalImage, np.ndarray], roi=None, axis: str = "down",
                       min_spacing_px: float = 10.0, min_prominence_px: float = 3.0) -> np.ndarray:
    """Tips of a binary front: local extrema of the front in the growth direction.

    For each column (or row, for horizontal growth) inside the ROI the
    outermost mask pixel along ``axis`` defines the front; tips are its peaks
    with prominence of at least ``min_prominence_px`` and mutual distance of
    at least ``min_spacing_px``.

    Args:
        mask: BINARY image or boolean array.
        roi: physical box ``((x0, y0), (x1, y1))`` (PhysicalImage input only)
            or a pair of pixel slices.
        axis: growth direction in image terms: ``down``, ``up``, ``left``,
            ``right``.

    Returns:
        Array (n, 2). For a PhysicalImage these are physical (x, y) tip
        coordinates; for an array they are pixel (row, col) positions.
    """
    if axis not in _AXES:
        raise ValueError(f"axis must be one of {_AXES}")
    arr = _mask_array(mask)
    if roi is None:
        rs, cs = slice(0, arr.shape[0]), slice(0, arr.shape[1])
    elif isinstance(roi[0], slice):
        rs, cs = roi
    else:
        if not isinstance(mask, PhysicalImage):
            raise ValueError("physical ROI requires a PhysicalImage mask")
        rs, cs = roi_slices(mask.coordinates, *roi)
    sub = arr[rs, cs]
    # orient so that growth points toward increasing row index
    view = {"down": sub, "up": sub[::-1], "left": sub.T[::-1], "right": sub.T}[axis]
    if not view.any():
        return np.zeros((0, 2))
    n_rows = view.shape[0]
    has = view.any(axis=0)
    front = np.where(has, n_rows - 1 - np.argmax(view[::-1], axis=0), -1).astype(float)
    # columns without mask sit below any real front
    front[~has] = -float(n_rows)
    peaks, _ = find_peaks(front, prominence=min_prominence_px, distance=max(min_spacing_px, 1))
    peaks = peaks[has[peaks]]
    tips = []
    for p in peaks:
        r, c = front[p], p
        if axis == "down":
            rc = (r, c)
        elif axis == "up":
            rc = (sub.shape[0] - 1 - r, c)
        elif axis == "left":
            rc = (c, sub.shape[1] - 1 - r)
        else:
            rc = (c, r)
        tips.append((rc[0] + rs.start, rc[1] + cs.start))
    tips = np.array(tips, dtype=float).reshape(-1, 2)
    if isinstance(mask, PhysicalImage):
        return mask.coordinates.pixel_to_phys(tips)
    return tips


@dataclass
class FingerTrajectory:
    times: np.ndarray
    tips: np.ndarray  # (n, 2)
    roi: Optional[tuple] = None
    weight: float = 1.0

    @property
    def length(self) -> float:
        if len(self.tips) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(self.tips, axis=0), axis=1)))

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.tips, axis=0)


def track_fingers(tip_lists: Sequence[np.ndarray], times: Optional[Sequence[float]] = None,
                  hop_radius: float = 10.0, roi=None) -> list[FingerTrajectory]:
    """Link tips of consecutive frames into trajectories.

    Tips of consecutive frames are paired by minimum total displacement
    (optimal assignment) among pairs closer than ``hop_radius`` (same units
    as the tips). Unmatched tips start new trajectories; trajectories without
    a successor end. Tips are processed in lexicographic coordinate order so
    ties resolve deterministically. Each trajectory gets a plotting weight
    equal to its length relative to the longest one.
    """
    if len(tip_lists) < 2:
        raise ValueError("tracking needs at least two frames")
    times = np.arange(len(tip_lists), dtype=float) if times is None else np.asarray(times, dtype=float)
    if len(times) != len(tip_lists) or np.any(np.diff(times) <= 0):
        raise ValueError("times must increase strictly, one per frame")

    def ordered(t):
        t = np.asarray(t, dtype=float).reshape(-1, 2)
        return t[np.lexsort((t[:, 1], t[:, 0]))]

    tracks: list[tuple[list, list]] = []
    active: list[int] = []  # track index per tip of the previous frame
    prev = ordered(tip_lists[0])
    for tip in prev:
        tracks.append(([times[0]], [tip]))
        active.append(len(tracks) - 1)
    for k in range(1, len(tip_lists)):
        cur = ordered(tip_lists[k])
        assigned = [-1] * len(cur)
        if len(prev) and len(cur):
            d = np.linalg.norm(prev[:, None] - cur[None], axis=-1)
            big = hop_radius * 1e6 + d.max() * len(d) + 1.0
            rows, cols = linear_sum_assignment(np.where(d <= hop_radius, d, big))
            for r, c in zip(rows, cols):
                if d[r, c] <= hop_radius:
                    assigned[c] = active[r]
        new_active = []
        for c, tip in enumerate(cur):
            if assigned[c] < 0:
                tracks.append(([], []))
                assigned[c] = len(tracks) - 1
            tracks[assigned[c]][0].append(times[k])
            tracks[assigned[c]][1].append(tip)
            new_active.append(assigned[c])
        prev, active = cur, new_active
    out = [FingerTrajectory(np.array(t), np.array(p).reshape(-1, 2), roi) for t, p in tracks]
    longest = max((tr.length for tr in out), default=0.0)
    for tr in out:
        tr.weight = tr.length / longest if longest > 0 else 1.0
    return out


# ---------------------------------------------------------------------------
# Tables


def trajectories_table(trajectories: Sequence[FingerTrajectory]) -> list[list]:
    rows = []
    for i, tr in enumerate(trajectories):
        for t, (x, y) in zip(tr.times, tr.tips):
            rows.append([i, float(t), float(x), float(y)])
    return rows


def write_csv(header: Sequence[str], rows: Sequence[Sequence], path=None) -> str:
    """CSV text with full float precision; also written to ``path`` if given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
