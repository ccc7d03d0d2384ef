"""Facies labeling, histogram thresholds and binary phase extraction."""

from __future__ import annotations

import heapq
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy import ndimage
from scipy.signal import find_peaks
from skimage.segmentation import watershed

from .imgcore import ColorSpace, ImageError, PhysicalImage, key_channel, new_image
from .regularize import RegularizationConfig, tv_denoise

logger = logging.getLogger(__name__)

__all__ = [
    "SegmentationError",
    "LabelMap",
    "Histogram",
    "ThresholdModel",
    "ReferenceStack",
    "watershed_labels",
    "histogram",
    "otsu_threshold",
    "is_bimodal",
    "dynamic_threshold",
    "select_channel",
    "fuse_references",
    "difference_signal",
    "binary_concentration",
    "remove_small_components",
    "save_labels",
    "load_labels",
]


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer labels ``0..label_count-1`` with the physical geometry of an image."""

    labels: np.ndarray
    width: float
    height: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or not np.issubdtype(lab.dtype, np.integer):
            raise SegmentationError("labels must be a 2D integer array")
        present = np.unique(lab)
        if present[0] != 0 or present[-1] != len(present) - 1:
            raise SegmentationError("labels must form a contiguous range starting at 0")

    @classmethod
    def like(cls, labels: np.ndarray, image: PhysicalImage) -> "LabelMap":
        return cls(labels, image.width, image.height, image.origin)

    @property
    def label_count(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def matches(self, image: PhysicalImage, tol: float = 1e-9) -> bool:
        return (
            self.shape == image.shape
            and abs(self.width - image.width) <= tol * max(1.0, image.width)
            and abs(self.height - image.height) <= tol * max(1.0, image.height)
        )

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label


def _relabel(labels: np.ndarray) -> np.ndarray:
    """Contiguous relabeling ordered by first occurrence in raster order."""
    flat = labels.ravel()
    _, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inverse].reshape(labels.shape).astype(np.int32)


def _split_disconnected(labels: np.ndarray) -> np.ndarray:
    out = np.zeros_like(labels)
    nxt = 0
    for lab in np.unique(labels):
        comp, n = ndimage.label(labels == lab)
        mask = comp > 0
        out[mask] = comp[mask] - 1 + nxt
        nxt += n
    return _relabel(out)


def _merge_similar(labels: np.ndarray, values: np.ndarray, tol: float) -> np.ndarray:
    """Greedily merge adjacent regions whose mean values differ by less than ``tol``.

    The closest pair is merged first and means are updated by size weighting,
    so the result does not depend on label numbering.
    """
    n = int(labels.max()) + 1
    size = np.bincount(labels.ravel(), minlength=n).astype(float)
    total = np.bincount(labels.ravel(), weights=values.ravel(), minlength=n)
    pairs = np.concatenate([
        np.stack([labels[:, :-1].ravel(), labels[:, 1:].ravel()], 1),
        np.stack([labels[:-1].ravel(), labels[1:].ravel()], 1),
    ])
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    adj: dict[int, set] = {i: set() for i in range(n)}
    for a, b in pairs:
        adj[int(a)].add(int(b))
        adj[int(b)].add(int(a))
    parent = list(range(n))
    mean = total / np.maximum(size, 1)
    heap = [(abs(mean[a] - mean[b]), int(a), int(b)) for a, b in pairs]
    heapq.heapify(heap)
    alive = np.ones(n, dtype=bool)
    while heap:
        d, a, b = heapq.heappop(heap)
        if d >= tol:
            break
        if not (alive[a] and alive[b]) or abs(mean[a] - mean[b]) != d:
            continue
        # merge b into a
        alive[b] = False
        parent[b] = a
        size[a] += size[b]
        total[a] += total[b]
        mean[a] = total[a] / size[a]
        adj[a] |= adj.pop(b)
        adj[a].discard(a)
        adj[a].discard(b)
        for c in list(adj[a]):
            adj[c].discard(b)
            adj[c].add(a)
            heapq.heappush(heap, (abs(mean[a] - mean[c]), min(a, c), max(a, c)))

    def root(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    lut = np.array([root(i) for i in range(n)])
    return lut[labels]


def watershed_labels(
    image: PhysicalImage,
    smoothing_mu: float = 2e-4,
    marker_quantile: float = 0.2,
    merge_tol: Optional[float] = 0.05,
) -> LabelMap:
    """Facies labels from a marker-based watershed on the gradient modulus.

    The image is TV-smoothed with ``smoothing_mu`` (meters; the fidelity is
    quadratic in intensity, so useful values are well below the pixel size
    times the facies contrast). Markers are the connected low-gradient pixels
    below the ``marker_quantile`` of the gradient modulus. After flooding,
    adjacent regions whose mean smoothed values differ by less than
    ``merge_tol`` are merged; ``None`` disables merging.

    Raises:
        SegmentationError: no marker pixels found.
    """
    if image.channels != 1:
        raise ImageError("watershed labeling requires a single-channel image")
    if not 0 < marker_quantile <= 1:
        raise ValueError("marker_quantile must lie in (0, 1]")
    u = tv_denoise(image, RegularizationConfig(mu=smoothing_mu)).plane if smoothing_mu > 0 else image.plane
    gy, gx = np.gradient(u)
    g = np.hypot(gx, gy)
    markers, n = ndimage.label(g <= np.quantile(g, marker_quantile))
    if n == 0:
        raise SegmentationError("no markers found; relax marker_quantile")
    labels = watershed(g, markers) - 1
    if merge_tol is not None and n > 1:
        labels = _merge_similar(labels, u, merge_tol)
    labels = _split_disconnected(labels)
    logger.info("watershed: %d markers, %d labels", n, labels.max() + 1)
    return LabelMap.like(labels, image)


def save_labels(labels: LabelMap, path, metadata: Optional[dict] = None) -> Path:
    """16-bit single-channel raster plus JSON sidecar."""
    path = Path(path)
    if labels.label_count > 65536:
        raise SegmentationError("too many labels for a 16-bit raster")
    arr = labels.labels.astype(np.uint16)
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        tifffile.imwrite(path, arr)
    elif path.suffix.lower() == ".png":
        import cv2

        if not cv2.imwrite(str(path), arr):
            raise OSError(f"failed to write {path}")
    else:
        raise ImageError("label maps are stored as .png or .tif")
    side = path.with_suffix(".json")
    side.write_text(json.dumps({
        "width_m": labels.width,
        "height_m": labels.height,
        "origin_m": list(labels.origin),
        "label_count": labels.label_count,
        "extra": metadata or {},
    }, indent=2, sort_keys=True))
    return path


def load_labels(path) -> LabelMap:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        raw = tifffile.imread(path)
    else:
        import cv2

        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise OSError(f"could not decode {path}")
    return LabelMap(raw.astype(np.int32), meta["width_m"], meta["height_m"], tuple(meta["origin_m"]))


# ---------------------------------------------------------------------------
# Histograms and thresholds


@dataclass(frozen=True)
class Histogram:
    counts: np.ndarray
    edges: np.ndarray

    def __post_init__(self) -> None:
        if len(self.edges) != len(self.counts) + 1:
            raise ValueError("edges must have one more entry than counts")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def bin_width(self) -> float:
        return float(np.mean(np.diff(self.edges)))


def histogram(values: np.ndarray, bins: int = 256, value_range=None) -> Histogram:
    values = np.asarray(values, dtype=float).ravel()
    if value_range is None:
        lo, hi = float(values.min()), float(values.max())
        if hi <= lo:
            hi = lo + 1e-12
        value_range = (lo, hi)
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    return Histogram(counts.astype(float), edges)


def _between_class_variance(counts: np.ndarray) -> np.ndarray:
    """Between-class variance (up to a constant factor) of every split ``k``.

    Split ``k`` puts bins ``0..k`` in the lower class. Bin indices serve as
    values; the criterion is invariant under affine changes of the values.
    """
    c = np.asarray(counts, dtype=float)
    idx = np.arange(len(c), dtype=float)
    n = np.cumsum(c)[:-1]
    s = np.cumsum(c * idx)[:-1]
    N, S = n[-1] + c[-1], s[-1] + c[-1] * idx[-1]
    denom = n * (N - n)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = (N * s - S * n) ** 2 / denom
    return np.where(denom > 0, v, -np.inf)


def otsu_threshold(hist: Histogram, rtol: float = 1e-12) -> float:
    """Otsu threshold of a histogram.

    The maximizer of the between-class variance is taken over all splits;
    ties (within ``rtol``) go to the lowest bin. The threshold is the upper
    edge of the last bin of the lower class.

    Raises:
        SegmentationError: fewer than two nonempty bins.
    """
    counts = np.asarray(hist.counts, dtype=float)
    if np.count_nonzero(counts) < 2:
        raise SegmentationError("Otsu thresholding needs at least two nonempty bins")
    v = _between_class_variance(counts)
    best = v.max()
    k = int(np.flatnonzero(v >= best - rtol * abs(best))[0])
    return float(hist.edges[k + 1])


def is_bimodal(hist: Histogram, min_separation: int = 10, valley_fraction: float = 0.5, smooth: float = 2.0) -> bool:
    """Two peaks at least ``min_separation`` bins apart with a deep valley.

    Peaks are searched on a Gaussian-smoothed histogram; the valley between
    the two highest peaks must not exceed ``valley_fraction`` of the lower one.
    """
    h = ndimage.gaussian_filter1d(np.asarray(hist.counts, dtype=float), smooth, mode="constant") if smooth > 0 \
        else np.asarray(hist.counts, dtype=float)
    padded = np.concatenate([[0.0], h, [0.0]])
    peaks, _ = find_peaks(padded)
    peaks = peaks - 1
    if len(peaks) < 2:
        return False
    top = np.sort(peaks[np.argsort(h[peaks], kind="stable")[::-1][:2]])
    a, b = int(top[0]), int(top[1])
    if b - a < min_separation:
        return False
    valley = h[a:b + 1].min()
    return bool(valley <= valley_fraction * min(h[a], h[b]))


def dynamic_threshold(hist: Histogram, prior: float, drift_band: float, min_separation: int = 10,
                      valley_fraction: float = 0.5) -> float:
    """Otsu value clamped to ``prior +- drift_band`` for bimodal data, else the prior."""
    if not hist.edges[0] <= prior <= hist.edges[-1]:
        raise ValueError("prior lies outside the histogram support")
    if drift_band < 0:
        raise ValueError("drift_band must be nonnegative")
    if np.count_nonzero(hist.counts) >= 2 and is_bimodal(hist, min_separation, valley_fraction):
        return float(np.clip(otsu_threshold(hist), prior - drift_band, prior + drift_band))
    return float(prior)


@dataclass
class ThresholdModel:
    """Per-label signal intervals ``[lower, upper]``.

    In dynamic mode the lower bounds are re-estimated per image from the label
    histogram, starting from the prior and allowed to drift by ``drift_band``.
    A label key of ``-1`` (or the single key ``"*"`` in serialized form)
    applies to every label without its own entry.
    """

    intervals: dict[int, tuple[float, float]]
    mode: str = "static"
    drift_band: float = 0.0
    bins: int = 256

    def __post_init__(self) -> None:
        if self.mode not in ("static", "dynamic"):
            raise ValueError("mode must be 'static' or 'dynamic'")
        self.intervals = {int(k): (float(v[0]), float(v[1])) for k, v in self.intervals.items()}
        for k, (lo, hi) in self.intervals.items():
            if not lo < hi:
                raise ValueError(f"label {k}: lower bound must be below upper bound")

    @classmethod
    def uniform(cls, lower: float, upper: float = np.inf, **kw) -> "ThresholdModel":
        return cls({-1: (lower, upper)}, **kw)

    def interval(self, label: int) -> tuple[float, float]:
        if label in self.intervals:
            return self.intervals[label]
        if -1 in self.intervals:
            return self.intervals[-1]
        raise SegmentationError(f"no threshold for label {label}")

    def apply(self, signal: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, dict[int, tuple[float, float]]]:
        """Mask and the intervals actually used per label."""
        mask = np.zeros(signal.shape, dtype=bool)
        used = {}
        for lab in np.unique(labels):
            sel = labels == lab
            lo, hi = self.interval(int(lab))
            if self.mode == "dynamic":
                vals = signal[sel]
                top = max(float(vals.max()), lo + 1e-9)
                bottom = min(float(vals.min()), lo)
                lo = dynamic_threshold(histogram(vals, self.bins, (bottom, top)), lo, self.drift_band)
            mask[sel] = (signal[sel] >= lo) & (signal[sel] <= hi)
            used[int(lab)] = (lo, hi)
        return mask, used

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "drift_band": self.drift_band,
            "bins": self.bins,
            "intervals": {("*" if k == -1 else str(k)): [lo, hi if np.isfinite(hi) else "inf"]
                          for k, (lo, hi) in sorted(self.intervals.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ThresholdModel":
        iv = {(-1 if k == "*" else int(k)): (float(v[0]), float(v[1])) for k, v in d["intervals"].items()}
        return cls(iv, d.get("mode", "static"), float(d.get("drift_band", 0.0)), int(d.get("bins", 256)))


# ---------------------------------------------------------------------------
# References and phase extraction

ChannelSelector = Union[str, int]


def select_channel(image: PhysicalImage, channel: ChannelSelector = "negkey") -> np.ndarray:
    """Scalar plane used for difference signals.

    ``"negkey"`` is ``max(R, G, B)``, i.e. one minus the CMYK key; it grows
    as the image brightens. ``"r"``, ``"g"``, ``"b"``, ``"gray"`` or an
    integer index select a single channel.
    """
    if isinstance(channel, (int, np.integer)):
        return image.data[..., int(channel)]
    name = str(channel).lower()
    if name == "negkey":
        return 1.0 - key_channel(image)
    if name == "gray":
        return image.plane if image.channels == 1 else image.data @ np.array([0.2126, 0.7152, 0.0722])
    if name in "rgb" and len(name) == 1:
        if image.colorspace is not ColorSpace.RGB:
            raise ImageError("channel letters require an RGB image")
        return image.data[..., "rgb".index(name)]
    raise ValueError(f"unknown channel selector {channel!r}")


@dataclass
class ReferenceStack:
    """Co-registered reference images; ``references[base]`` is the base."""

    references: list[PhysicalImage]
    base: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self.references:
            raise ValueError("reference stack is empty")
        first = self.references[0]
        for r in self.references[1:]:
            if not first.same_geometry(r) or r.colorspace is not first.colorspace:
                raise ImageError("references differ in geometry or colorspace")

    @property
    def base_image(self) -> PhysicalImage:
        return self.references[self.base]

    def floor(self, channel: ChannelSelector = "negkey") -> np.ndarray:
        key = str(channel)
        if key not in self._cache:
            self._cache[key] = fuse_references(self, channel)
        return self._cache[key]


def fuse_references(stack: Union[ReferenceStack, Sequence[PhysicalImage]], channel: ChannelSelector = "negkey"):
    """Noise floor: pointwise max over references of ``|ref_k - base|``."""
    if not isinstance(stack, ReferenceStack):
        stack = ReferenceStack(list(stack))
    if len(stack.references) < 2:
        raise ValueError("fusing needs at least two references")
    base = select_channel(stack.base_image, channel)
    floor = np.zeros_like(base)
    for k, ref in enumerate(stack.references):
        if k != stack.base:
            np.maximum(floor, np.abs(select_channel(ref, channel) - base), out=floor)
    return floor


def difference_signal(image: PhysicalImage, stack: ReferenceStack, channel: ChannelSelector = "negkey",
                      use_floor: bool = True, clamp: bool = True) -> np.ndarray:
    """``image - base - floor`` on the selected channel, clamped at 0 unless ``clamp`` is off."""
    if not image.same_geometry(stack.base_image):
        raise ImageError("image and references differ in geometry")
    if image.colorspace is not stack.base_image.colorspace:
        raise ImageError("image and references differ in colorspace")
    diff = select_channel(image, channel) - select_channel(stack.base_image, channel)
    if use_floor and len(stack.references) > 1:
        diff = diff - stack.floor(channel)
    return np.maximum(diff, 0.0) if clamp else diff


def remove_small_components(mask: np.ndarray, min_pixels: int) -> np.ndarray:
    if min_pixels <= 1:
        return mask
    comp, n = ndimage.label(mask)
    if n == 0:
        return mask
    sizes = np.bincount(comp.ravel())
    keep = sizes >= min_pixels
    keep[0] = False
    return keep[comp]


def binary_concentration(
    secondary: PhysicalImage,
    references: Union[ReferenceStack, Sequence[PhysicalImage]],
    labels: Optional[LabelMap],
    model: ThresholdModel,
    reg_config: RegularizationConfig = RegularizationConfig(),
    channel: ChannelSelector = "negkey",
    use_floor: bool = True,
    min_area: Optional[float] = None,
) -> PhysicalImage:
    """Phase indicator of a (pre-aligned) secondary image.

    The floor-cleaned difference signal is TV-regularized with ``reg_config``
    and thresholded per label. Components smaller than ``min_area`` (m^2;
    default ``(5 * pore_length)^2`` when the config knows the pore length)
    are removed.
    """
    stack = references if isinstance(references, ReferenceStack) else ReferenceStack(list(references))
    if labels is None:
        lab = np.zeros(secondary.shape, dtype=np.int32)
    else:
        if not labels.matches(secondary):
            raise ImageError("label map geometry does not match the image")
        lab = labels.labels
    signal = difference_signal(secondary, stack, channel, use_floor)
    sig_img = new_image(signal, secondary.width, secondary.height, secondary.origin, secondary.timestamp,
                        ColorSpace.GRAY)
    if _has_regularization(reg_config):
        signal = tv_denoise(sig_img, reg_config).plane
    mask, used = model.apply(signal, lab)
    if min_area is None and reg_config.pore_length:
        min_area = (5 * reg_config.pore_length) ** 2
    if min_area:
        mask = remove_small_components(mask, int(np.ceil(min_area / secondary.coordinates.pixel_area)))
    out = new_image(mask.astype(float), secondary.width, secondary.height, secondary.origin, secondary.timestamp,
                    ColorSpace.BINARY)
    out.metadata["thresholds"] = {str(k): list(v) for k, v in used.items()}
    return out


def _has_regularization(config: RegularizationConfig) -> bool:
    mu = config.mu
    arr = mu.data if isinstance(mu, PhysicalImage) else np.asarray(mu)
    return bool(np.any(arr > 0))
