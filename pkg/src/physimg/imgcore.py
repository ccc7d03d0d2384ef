"""Physical images: intensity arrays tied to a rectangular physical domain.

An image is stored in matrix convention (row 0 is the top of the picture) while
physical coordinates are Cartesian with the origin at the lower-left corner.
:class:`CoordinateSystem` converts between the two.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, Sequence]
PathLike = Union[str, Path]

__all__ = [
    "ColorSpace",
    "CoordinateSystem",
    "PhysicalImage",
    "PatchSet",
    "ImageError",
    "new_image",
    "save",
    "load",
    "extract_roi",
    "to_colorspace",
    "make_patches",
    "assemble",
    "add_grid",
    "blend_weights_1d",
]

LUMA = np.array([0.2126, 0.7152, 0.0722])


class ImageError(ValueError):
    """Raised for invalid image data, geometry or metadata."""


class ColorSpace(str, enum.Enum):
    RGB = "RGB"
    GRAY = "GRAY"
    HSV = "HSV"
    NEGKEY = "NEGKEY"
    BINARY = "BINARY"

    @property
    def channels(self) -> int:
        return 3 if self in (ColorSpace.RGB, ColorSpace.HSV) else 1


@dataclass(frozen=True)
class CoordinateSystem:
    """Affine map between pixel indices (row, col) and physical (x, y).

    Pixel centers sit at half-integer offsets; the vertical axis is flipped so
    that row 0 is the top of the domain.
    """

    rows: int
    cols: int
    width: float
    height: float
    origin: tuple[float, float] = (0.0, 0.0)

    @property
    def dx(self) -> float:
        return self.width / self.cols

    @property
    def dy(self) -> float:
        return self.height / self.rows

    @property
    def pixel_area(self) -> float:
        return self.dx * self.dy

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax)."""
        x0, y0 = self.origin
        return x0, x0 + self.width, y0, y0 + self.height

    def pixel_to_phys(self, pixel: ArrayLike) -> np.ndarray:
        """Map (..., 2) arrays of (row, col) indices to (..., 2) arrays of (x, y)."""
        p = np.asarray(pixel, dtype=float)
        x = self.origin[0] + (p[..., 1] + 0.5) * self.dx
        y = self.origin[1] + self.height - (p[..., 0] + 0.5) * self.dy
        return np.stack([x, y], axis=-1)

    def phys_to_pixel(self, coord: ArrayLike) -> np.ndarray:
        """Inverse of :meth:`pixel_to_phys`; returns continuous (row, col)."""
        c = np.asarray(coord, dtype=float)
        col = (c[..., 0] - self.origin[0]) / self.dx - 0.5
        row = (self.origin[1] + self.height - c[..., 1]) / self.dy - 0.5
        return np.stack([row, col], axis=-1)

    def phys_to_index(self, coord: ArrayLike) -> np.ndarray:
        """Nearest integer pixel index for physical coordinates."""
        return np.rint(self.phys_to_pixel(coord)).astype(int)

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical (X, Y) of all pixel centers, each of shape (rows, cols)."""
        x = self.origin[0] + (np.arange(self.cols) + 0.5) * self.dx
        y = self.origin[1] + self.height - (np.arange(self.rows) + 0.5) * self.dy
        return np.meshgrid(x, y)


@dataclass(frozen=True, eq=False)
class PhysicalImage:
    """Intensity tensor of shape (rows, cols, channels) with physical geometry.

    Instances are immutable: the array is flagged read-only and every operation
    returns a new image.
    """

    data: np.ndarray
    width: float
    height: float
    origin: tuple[float, float] = (0.0, 0.0)
    timestamp: Optional[float] = None
    colorspace: ColorSpace = ColorSpace.RGB
    metadata: dict = field(default_factory=dict)

    dim_image = 2
    dim_physical = 2

    def __post_init__(self) -> None:
        data = self.data
        if data.ndim != 3:
            raise ImageError(f"expected (rows, cols, channels) array, got shape {data.shape}")
        rows, cols, channels = data.shape
        if rows < 2 or cols < 2:
            raise ImageError(f"image must be at least 2x2 pixels, got {rows}x{cols}")
        if not (self.width > 0 and self.height > 0):
            raise ImageError("width and height must be positive")
        if channels not in (1, 3):
            raise ImageError(f"unsupported channel count {channels}")
        if channels != self.colorspace.channels:
            raise ImageError(f"{self.colorspace.value} requires {self.colorspace.channels} channel(s)")
        if not np.all(np.isfinite(data)):
            raise ImageError("image data contains NaN or Inf")
        if self.colorspace is ColorSpace.BINARY:
            if not np.all((data == 0) | (data == 1)):
                raise ImageError("BINARY image must contain only 0 and 1")
        elif data.size and (data.min() < 0 or data.max() > 1):
            raise ImageError("intensities must lie in [0, 1]")
        data.setflags(write=False)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def plane(self) -> np.ndarray:
        """2D view of a single-channel image."""
        if self.channels != 1:
            raise ImageError("plane is only defined for single-channel images")
        return self.data[..., 0]

    @property
    def coordinates(self) -> CoordinateSystem:
        return CoordinateSystem(self.rows, self.cols, self.width, self.height, tuple(self.origin))

    @property
    def pitch(self) -> tuple[float, float]:
        """Pixel size (dx, dy) in meters."""
        return self.width / self.cols, self.height / self.rows

    def with_data(self, data: np.ndarray, colorspace: Optional[ColorSpace] = None) -> "PhysicalImage":
        """Copy of this image's geometry carrying new pixel data."""
        data = np.asarray(data, dtype=float)
        if data.ndim == 2:
            data = data[..., None]
        if data.shape[:2] != self.shape:
            raise ImageError(f"data shape {data.shape[:2]} does not match image shape {self.shape}")
        if colorspace is None:
            colorspace = self.colorspace if data.shape[2] == self.channels else ColorSpace.GRAY
        return replace(self, data=np.array(data, dtype=float), colorspace=ColorSpace(colorspace),
                       metadata=dict(self.metadata))

    def same_geometry(self, other: "PhysicalImage", tol: float = 1e-9) -> bool:
        return (
            self.shape == other.shape
            and abs(self.width - other.width) <= tol
            and abs(self.height - other.height) <= tol
            and np.allclose(self.origin, other.origin, atol=tol)
        )

    def __repr__(self) -> str:
        return (
            f"PhysicalImage({self.rows}x{self.cols}x{self.channels} {self.colorspace.value}, "
            f"width={self.width:g} m, height={self.height:g} m, origin={tuple(self.origin)})"
        )


def new_image(
    data: ArrayLike,
    width: float,
    height: float,
    origin: tuple[float, float] = (0.0, 0.0),
    timestamp: Optional[float] = None,
    colorspace: Optional[Union[ColorSpace, str]] = None,
) -> PhysicalImage:
    """Create a :class:`PhysicalImage`.

    Integer arrays are scaled to [0, 1] by their dtype range. A 2D array is
    treated as a single channel. If no colorspace is given, three channels are
    read as RGB and one channel as GRAY.
    """
    arr = np.asarray(data)
    if np.issubdtype(arr.dtype, np.bool_):
        arr = arr.astype(float)
    elif np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(float) / np.iinfo(arr.dtype).max
    else:
        arr = np.array(arr, dtype=float)
    if arr.ndim == 2:
        arr = arr[..., None]
    if colorspace is None:
        colorspace = ColorSpace.RGB if arr.ndim == 3 and arr.shape[-1] == 3 else ColorSpace.GRAY
    return PhysicalImage(
        data=arr,
        width=float(width),
        height=float(height),
        origin=(float(origin[0]), float(origin[1])),
        timestamp=None if timestamp is None else float(timestamp),
        colorspace=ColorSpace(colorspace),
    )


# ---------------------------------------------------------------------------
# I/O


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def _metadata(image: PhysicalImage) -> dict:
    return {
        "width_m": image.width,
        "height_m": image.height,
        "origin_m": list(image.origin),
        "timestamp_s": image.timestamp,
        "colorspace": image.colorspace.value,
        "rows": image.rows,
        "cols": image.cols,
        "channels": image.channels,
    }


def write_raster(path: PathLike, data: np.ndarray, colorspace: ColorSpace = ColorSpace.GRAY) -> None:
    """Write a (rows, cols, p) array in [0, 1] to PNG (16-bit) or TIFF (float64).

    TIFF storage is exact; PNG is exact for values on the 1/65535 grid and for
    BINARY data, which is stored as 8-bit 0/255.
    """
    import cv2
    import tifffile

    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".tif", ".tiff"):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        tifffile.imwrite(path, arr, photometric="rgb" if arr.shape[-1] == 3 else "minisblack")
        return
    if suffix != ".png":
        raise ImageError(f"lossless save supports .png and .tif, not {suffix!r}")
    if colorspace is ColorSpace.BINARY:
        arr = (np.asarray(data)[..., 0] > 0.5).astype(np.uint8) * 255
    else:
        arr = np.rint(np.asarray(data) * 65535).astype(np.uint16)
        arr = arr[..., 0] if arr.shape[-1] == 1 else arr[..., ::-1]
    if not cv2.imwrite(str(path), arr):
        raise OSError(f"failed to write {path}")


def read_raster(path: PathLike) -> np.ndarray:
    """Read PNG/JPEG/TIFF into a float (rows, cols, p) array in [0, 1]."""
    import cv2
    import tifffile

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        arr = tifffile.imread(path)
    else:
        arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if arr is None:
            raise OSError(f"could not decode {path}")
        if arr.ndim == 3:
            arr = arr[..., :3][..., ::-1]
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(float) / np.iinfo(arr.dtype).max
    else:
        arr = arr.astype(float)
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def save(image: PhysicalImage, path: PathLike) -> Path:
    """Save pixel data plus a JSON sidecar with the same basename."""
    path = Path(path)
    write_raster(path, image.data, image.colorspace)
    meta = _metadata(image)
    if image.metadata:
        meta["extra"] = image.metadata
    sidecar_path(path).write_text(json.dumps(meta, indent=2))
    return path


def load(path: PathLike, timestamp: Optional[float] = None) -> PhysicalImage:
    """Load an image written by :func:`save`.

    Raises :class:`ImageError` if the sidecar is missing or disagrees with the
    raster dimensions.
    """
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise ImageError(f"metadata sidecar {side} missing")
    meta = json.loads(side.read_text())
    data = read_raster(path)
    expected = (meta["rows"], meta["cols"], meta["channels"])
    if data.shape != expected:
        raise ImageError(f"sidecar declares shape {expected}, raster has {data.shape}")
    colorspace = ColorSpace(meta["colorspace"])
    if colorspace is ColorSpace.BINARY:
        data = (data > 0.5).astype(float)
    ts = meta.get("timestamp_s") if timestamp is None else timestamp
    image = new_image(data, meta["width_m"], meta["height_m"], tuple(meta["origin_m"]), ts, colorspace)
    if meta.get("extra"):
        image.metadata.update(meta["extra"])
    return image


# ---------------------------------------------------------------------------
# Regions of interest


def roi_slices(coords: CoordinateSystem, lower_left, upper_right, eps: float = 1e-9) -> tuple[slice, slice]:
    """Row/col slices of the pixels whose centers lie in the box (clipped)."""
    (x0, y0), (x1, y1) = lower_left, upper_right
    if not (x0 < x1 and y0 < y1):
        raise ImageError("ROI lower-left corner must be below and left of the upper-right corner")
    ox, oy = coords.origin
    c0 = max(math.ceil((x0 - ox) / coords.dx - 0.5 - eps), 0)
    c1 = min(math.floor((x1 - ox) / coords.dx - 0.5 + eps), coords.cols - 1)
    top = oy + coords.height
    r0 = max(math.ceil((top - y1) / coords.dy - 0.5 - eps), 0)
    r1 = min(math.floor((top - y0) / coords.dy - 0.5 + eps), coords.rows - 1)
    if c1 < c0 or r1 < r0:
        raise ImageError("ROI does not intersect the image domain")
    return slice(r0, r1 + 1), slice(c0, c1 + 1)


def subimage(image: PhysicalImage, rows: slice, cols: slice) -> PhysicalImage:
    """Pixel-index crop that keeps the physical geometry consistent."""
    r0, r1, _ = rows.indices(image.rows)
    c0, c1, _ = cols.indices(image.cols)
    dx, dy = image.pitch
    origin = (image.origin[0] + c0 * dx, image.origin[1] + (image.rows - r1) * dy)
    return replace(
        image,
        data=np.array(image.data[r0:r1, c0:c1]),
        width=(c1 - c0) * dx,
        height=(r1 - r0) * dy,
        origin=origin,
        metadata=dict(image.metadata),
    )


def extract_roi(image: PhysicalImage, lower_left, upper_right) -> PhysicalImage:
    """Subimage of all pixels whose centers fall inside the physical box.

    Boxes reaching past the domain are clipped; a box that misses the domain
    entirely raises :class:`ImageError`.
    """
    rows, cols = roi_slices(image.coordinates, lower_left, upper_right)
    return subimage(image, rows, cols)


# ---------------------------------------------------------------------------
# Color spaces


def to_colorspace(image: PhysicalImage, target: Union[ColorSpace, str]) -> PhysicalImage:
    """Convert between color spaces.

    NEGKEY is the negative of the CMYK key channel, i.e. ``max(R, G, B)``.
    """
    target = ColorSpace(target)
    source = image.colorspace
    if source is target:
        return image
    if source is ColorSpace.HSV and target is ColorSpace.RGB:
        from skimage.color import hsv2rgb

        return image.with_data(np.clip(hsv2rgb(image.data), 0, 1), ColorSpace.RGB)
    if source is not ColorSpace.RGB:
        raise ImageError(f"cannot convert {source.value} to {target.value}")
    rgb = image.data
    if target is ColorSpace.GRAY:
        out = np.clip(rgb @ LUMA, 0.0, 1.0)
    elif target is ColorSpace.NEGKEY:
        out = rgb.max(axis=-1)
    elif target is ColorSpace.HSV:
        from skimage.color import rgb2hsv

        out = rgb2hsv(rgb)
    else:
        raise ImageError(f"cannot convert {source.value} to {target.value}")
    return image.with_data(out, target)


def key_channel(image: PhysicalImage) -> np.ndarray:
    """CMYK key channel ``1 - max(R, G, B)`` as a 2D array."""
    if image.colorspace is not ColorSpace.RGB:
        raise ImageError("key channel requires an RGB image")
    return 1.0 - image.data.max(axis=-1)


# ---------------------------------------------------------------------------
# Patches


def _ramp(t: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return (t >= 0).astype(float)
    return np.clip((t + 0.5 + pad) / (2 * pad), 0.0, 1.0)


def blend_weights_1d(n: int, edges: Sequence[int], pad: int) -> np.ndarray:
    """Per-axis blending weights, shape (len(edges) - 1, n).

    Neighboring patches cross-fade linearly over ``2 * pad`` pixels centered on
    their shared core edge; the weights sum to one at every pixel.
    """
    i = np.arange(n, dtype=float)
    k = len(edges) - 1
    w = np.empty((k, n))
    for j in range(k):
        left = np.ones(n) if j == 0 else _ramp(i - edges[j], pad)
        right = np.zeros(n) if j == k - 1 else _ramp(i - edges[j + 1], pad)
        w[j] = left - right
    return w


@dataclass
class PatchSet:
    """Grid of overlapping subimages of a parent image.

    ``patches[i][j]`` follows matrix indexing (i counts from the top). Patches
    may be replaced by modified images of the same shape before calling
    :func:`assemble`.
    """

    parent: PhysicalImage
    num_v: int
    num_h: int
    overlap: float
    row_edges: list[int]
    col_edges: list[int]
    row_pad: int
    col_pad: int
    patches: list[list[PhysicalImage]]

    def __getitem__(self, i: int) -> list[PhysicalImage]:
        return self.patches[i]

    def __iter__(self):
        return iter(self.patches)

    def __len__(self) -> int:
        return self.num_v

    @property
    def count(self) -> int:
        return self.num_v * self.num_h

    def footprint(self, i: int, j: int) -> tuple[slice, slice]:
        """Parent-pixel slices covered by patch (i, j)."""
        r0 = max(self.row_edges[i] - self.row_pad, 0)
        r1 = min(self.row_edges[i + 1] + self.row_pad, self.parent.rows)
        c0 = max(self.col_edges[j] - self.col_pad, 0)
        c1 = min(self.col_edges[j + 1] + self.col_pad, self.parent.cols)
        return slice(r0, r1), slice(c0, c1)

    def center(self, i: int, j: int) -> np.ndarray:
        """Physical center of the patch core."""
        r = 0.5 * (self.row_edges[i] + self.row_edges[i + 1]) - 0.5
        c = 0.5 * (self.col_edges[j] + self.col_edges[j + 1]) - 0.5
        return self.parent.coordinates.pixel_to_phys([r, c])

    def weights(self, i: int, j: int) -> np.ndarray:
        """Blending weights of patch (i, j) on its footprint."""
        rs, cs = self.footprint(i, j)
        wr = blend_weights_1d(self.parent.rows, self.row_edges, self.row_pad)[i, rs]
        wc = blend_weights_1d(self.parent.cols, self.col_edges, self.col_pad)[j, cs]
        return np.outer(wr, wc)


def _edges(n: int, k: int) -> list[int]:
    return [int(round(v)) for v in np.linspace(0, n, k + 1)]


def make_patches(image: PhysicalImage, num_v: int, num_h: int, overlap: float = 0.0) -> PatchSet:
    """Split an image into ``num_v x num_h`` patches.

    Each patch core is extended by ``overlap`` times the core size on every
    interior side.
    """
    if num_v < 1 or num_h < 1:
        raise ImageError("patch counts must be at least 1")
    if not 0 <= overlap < 0.5:
        raise ImageError("overlap must lie in [0, 0.5)")
    row_edges = _edges(image.rows, num_v)
    col_edges = _edges(image.cols, num_h)
    if min(np.diff(row_edges)) < 2 or min(np.diff(col_edges)) < 2:
        raise ImageError("patches would be smaller than 2x2 pixels")
    row_pad = int(round(overlap * image.rows / num_v))
    col_pad = int(round(overlap * image.cols / num_h))
    ps = PatchSet(image, num_v, num_h, overlap, row_edges, col_edges, row_pad, col_pad, [])
    ps.patches = [[subimage(image, *ps.footprint(i, j)) for j in range(num_h)] for i in range(num_v)]
    return ps


def assemble(patchset: PatchSet) -> PhysicalImage:
    """Glue patches back together as a convex combination on the overlaps."""
    parent = patchset.parent
    acc = np.zeros(parent.data.shape)
    wsum = np.zeros(parent.shape)
    wr_all = blend_weights_1d(parent.rows, patchset.row_edges, patchset.row_pad)
    wc_all = blend_weights_1d(parent.cols, patchset.col_edges, patchset.col_pad)
    channels = None
    for i in range(patchset.num_v):
        for j in range(patchset.num_h):
            rs, cs = patchset.footprint(i, j)
            patch = patchset.patches[i][j]
            expected = (rs.stop - rs.start, cs.stop - cs.start)
            if patch.shape != expected:
                raise ImageError(f"patch ({i}, {j}) has shape {patch.shape}, expected {expected}")
            if channels is None:
                channels = patch.channels
            elif patch.channels != channels:
                raise ImageError("patches disagree in channel count")
            w = np.outer(wr_all[i, rs], wc_all[j, cs])
            if channels != acc.shape[2]:
                acc = np.zeros(parent.shape + (channels,))
            acc[rs, cs] += w[..., None] * patch.data
            wsum[rs, cs] += w
    out = acc / wsum[..., None]
    cs0 = patchset.patches[0][0].colorspace
    if cs0 is ColorSpace.BINARY:
        out = (out >= 0.5).astype(float)
    return parent.with_data(np.clip(out, 0.0, 1.0), cs0)


# ---------------------------------------------------------------------------
# Grid overlay


def grid_line_indices(coords: CoordinateSystem, dx: float, dy: float) -> tuple[np.ndarray, np.ndarray]:
    """Pixel columns of vertical lines and rows of horizontal lines."""
    # multiples on the far boundary lie outside the last pixel and are skipped
    ncols = int(math.ceil(coords.width / dx - 1e-9))
    nrows = int(math.ceil(coords.height / dy - 1e-9))
    xs = np.arange(ncols) * dx
    ys = np.arange(nrows) * dy
    cols = np.clip(np.floor(xs / coords.dx + 1e-9).astype(int), 0, coords.cols - 1)
    rows = np.clip(coords.rows - 1 - np.floor(ys / coords.dy + 1e-9).astype(int), 0, coords.rows - 1)
    return np.unique(cols), np.unique(rows)


def add_grid(image: PhysicalImage, dx: float, dy: float, color: Optional[Sequence[float]] = None) -> PhysicalImage:
    """Overlay 1-pixel grid lines at physical multiples of ``dx`` and ``dy``
    measured from the image origin."""
    pdx, pdy = image.pitch
    if dx < 2 * pdx or dy < 2 * pdy:
        raise ImageError("grid spacing must be at least two pixels")
    cols, rows = grid_line_indices(image.coordinates, dx, dy)
    if color is None:
        color = [1.0] * image.channels
    out = np.array(image.data)
    out[:, cols, :] = color
    out[rows, :, :] = color
    return image.with_data(out, image.colorspace)
