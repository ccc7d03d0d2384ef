"""Divide-and-conquer alignment of pore spaces.

The alignment map ``psi`` satisfies ``reference(x) ~ secondary(psi(x))`` and is
stored as a displacement ``u = psi - Id`` in meters. It is built in three
steps:

1. per-patch translations from normalized cross-correlation, trusted only
   when the local map is effectively a translation;
2. a thin-plate-spline interpolant through the trusted patch centers (plus
   optional boundary conditions), which also fills in rejected patches;
3. a piecewise-affine map on a Cartesian node grid, used for warping; its
   inverse is approximated the same way from the displaced nodes.

:func:`align` runs this over a hierarchy of patch partitions, warping the
secondary image by the current estimate before each level and composing the
level corrections.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage
from scipy.interpolate import RBFInterpolator

from .imgcore import ColorSpace, CoordinateSystem, PhysicalImage, make_patches, new_image
from .matching import match_translation

logger = logging.getLogger(__name__)

__all__ = [
    "AlignmentError",
    "MatchSettings",
    "PatchEstimate",
    "PatchHierarchy",
    "Sample",
    "BoundaryCondition",
    "DisplacementField",
    "estimate_patch_translation",
    "estimate_translations",
    "normal_boundary_conditions",
    "build_field",
    "warp",
    "align",
    "glyph_export",
    "write_glyph_csv",
    "fidelity_raster",
    "displacement_gradient",
]


class AlignmentError(RuntimeError):
    """A level produced too few trusted patches.

    ``fidelity`` holds the per-patch acceptance map of the failing level and
    ``estimates`` the raw per-patch results.
    """

    def __init__(self, message: str, level: int, fidelity: np.ndarray, estimates: list):
        super().__init__(message)
        self.level = level
        self.fidelity = fidelity
        self.estimates = estimates

    @property
    def rejected_fraction(self) -> float:
        return float(1.0 - self.fidelity.mean())


@dataclass(frozen=True)
class MatchSettings:
    """Thresholds of the local matcher.

    Attributes:
        min_score: minimal NCC peak for a trusted match.
        dominance_tol: largest non-translational displacement (pixels) at the
            patch corners, from an affine fit to the quadrant translations.
        search: search radius as a fraction of the larger patch side.
    """

    min_score: float = 0.5
    dominance_tol: float = 1.0
    search: float = 0.3


@dataclass
class PatchEstimate:
    translation: np.ndarray  # (d_row, d_col) pixels
    accepted: bool
    score: float
    residual: float  # non-translational corner displacement, pixels
    reason: str = ""


@dataclass
class PatchHierarchy:
    """Levels of patch grids ``(num_v, num_h)``, coarse to fine.

    Levels are independent partitions; nothing ties one level to the next.
    """

    levels: list[tuple[int, int]]
    overlap: Union[float, Sequence[float]] = 0.0

    def __post_init__(self) -> None:
        if not self.levels:
            raise ValueError("hierarchy needs at least one level")
        for nv, nh in self.levels:
            if nv < 1 or nh < 1:
                raise ValueError("patch counts must be positive")

    def overlap_at(self, i: int) -> float:
        if np.ndim(self.overlap) == 0:
            return float(self.overlap)
        return float(self.overlap[i])


@dataclass
class Sample:
    center: np.ndarray  # physical (x, y)
    translation: np.ndarray  # physical (ux, uy), meters
    accepted: bool = True
    score: float = 1.0


@dataclass
class BoundaryCondition:
    coord: np.ndarray  # physical (x, y)
    component: str  # "x" or "y"
    value: float = 0.0


# ---------------------------------------------------------------------------
# Local translations


def _gray(image: PhysicalImage) -> np.ndarray:
    return image.plane if image.channels == 1 else image.data.mean(axis=-1)


def _fit_affine(points: np.ndarray, shifts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    A = np.hstack([np.ones((len(points), 1)), points])
    coef, *_ = np.linalg.lstsq(A, shifts, rcond=None)
    return coef[0], coef[1:].T  # translation, linear part (2x2)


def _estimate_block(ref: np.ndarray, sec: np.ndarray, rows: slice, cols: slice, radius: int,
                    settings: MatchSettings) -> PatchEstimate:
    block = ref[rows, cols]
    if block.std() < 1e-6:
        return PatchEstimate(np.zeros(2), False, 0.0, np.inf, "flat")
    m = match_translation(ref, sec, rows, cols, radius)
    if m.score < settings.min_score:
        return PatchEstimate(m.shift, False, m.score, np.inf, "weak match")
    if m.on_border:
        return PatchEstimate(m.shift, False, m.score, np.inf, "peak at search border")

    # translation dominance: quadrants must move together
    r0, r1, c0, c1 = rows.start, rows.stop, cols.start, cols.stop
    rm, cm = (r0 + r1) // 2, (c0 + c1) // 2
    base = np.rint(m.shift).astype(int)
    centers, shifts = [], []
    for qr in (slice(r0, rm), slice(rm, r1)):
        for qc in (slice(c0, cm), slice(cm, c1)):
            if ref[qr, qc].std() < 1e-6:
                return PatchEstimate(m.shift, False, m.score, np.inf, "flat quadrant")
            qm = match_translation(ref, sec, qr, qc, 3, (int(base[0]), int(base[1])))
            if qm.score < settings.min_score or qm.on_border:
                return PatchEstimate(m.shift, False, m.score, np.inf, "inconsistent quadrant")
            centers.append((0.5 * (qr.start + qr.stop), 0.5 * (qc.start + qc.stop)))
            shifts.append(qm.shift)
    centers = np.array(centers) - np.array([0.5 * (r0 + r1), 0.5 * (c0 + c1)])
    _, L = _fit_affine(centers, np.array(shifts))
    half = np.array([[-(r1 - r0) / 2, -(c1 - c0) / 2], [-(r1 - r0) / 2, (c1 - c0) / 2],
                     [(r1 - r0) / 2, -(c1 - c0) / 2], [(r1 - r0) / 2, (c1 - c0) / 2]])
    residual = float(np.max(np.linalg.norm(half @ L.T, axis=1)))
    if residual > settings.dominance_tol:
        return PatchEstimate(m.shift, False, m.score, residual, "not a translation")
    return PatchEstimate(m.shift, True, m.score, residual)


def estimate_patch_translation(ref_patch: PhysicalImage, sec_patch: PhysicalImage,
                               settings: MatchSettings = MatchSettings()) -> PatchEstimate:
    """Translation of a patch pair, with fidelity flag.

    The central part of ``ref_patch`` (trimmed by the search radius) is looked
    up in ``sec_patch``. Failure never raises; it is reported as a rejected
    estimate.
    """
    if ref_patch.shape != sec_patch.shape:
        raise ValueError("patches must have the same shape")
    rows, cols = ref_patch.shape
    if rows < 32 or cols < 32:
        raise ValueError("patches must be at least 32x32 pixels")
    radius = max(int(settings.search * min(rows, cols) / 2), 1)
    rs, cs = slice(radius, rows - radius), slice(radius, cols - radius)
    return _estimate_block(_gray(ref_patch), _gray(sec_patch), rs, cs, radius, settings)


def estimate_translations(reference: PhysicalImage, secondary: PhysicalImage, num_v: int, num_h: int,
                          overlap: float = 0.0, settings: MatchSettings = MatchSettings()):
    """Per-patch estimates on a ``num_v x num_h`` partition.

    Returns the patch set (for geometry) and a nested list of estimates.
    """
    ps = make_patches(reference, num_v, num_h, overlap)
    ref, sec = _gray(reference), _gray(secondary)
    estimates = []
    for i in range(num_v):
        row = []
        for j in range(num_h):
            rs, cs = ps.footprint(i, j)
            radius = max(int(settings.search * max(rs.stop - rs.start, cs.stop - cs.start)), 1)
            row.append(_estimate_block(ref, sec, rs, cs, radius, settings))
        estimates.append(row)
    return ps, estimates


# ---------------------------------------------------------------------------
# Displacement fields


def normal_boundary_conditions(coords: CoordinateSystem, per_side: int = 9) -> list[BoundaryCondition]:
    """Zero normal displacement on all four sides of the domain."""
    x0, x1, y0, y1 = coords.extent
    out = []
    for t in np.linspace(0, 1, per_side):
        y = y0 + t * (y1 - y0)
        x = x0 + t * (x1 - x0)
        out += [BoundaryCondition(np.array([x0, y]), "x"), BoundaryCondition(np.array([x1, y]), "x")]
        out += [BoundaryCondition(np.array([x, y0]), "y"), BoundaryCondition(np.array([x, y1]), "y")]
    return out


def _pa_eval(nodes_x: np.ndarray, nodes_y: np.ndarray, values: np.ndarray, px: np.ndarray, py: np.ndarray):
    """Piecewise-affine interpolation of node values at points (px, py).

    Each grid cell is split into two triangles along its anti-diagonal; the
    interpolant is continuous and extrapolates linearly beyond the grid.
    ``values`` has shape (ny, nx, k).
    """
    j = np.clip(np.searchsorted(nodes_x, px, side="right") - 1, 0, len(nodes_x) - 2)
    i = np.clip(np.searchsorted(nodes_y, py, side="right") - 1, 0, len(nodes_y) - 2)
    s = (px - nodes_x[j]) / (nodes_x[j + 1] - nodes_x[j])
    t = (py - nodes_y[i]) / (nodes_y[i + 1] - nodes_y[i])
    v00, v01 = values[i, j], values[i, j + 1]
    v10, v11 = values[i + 1, j], values[i + 1, j + 1]
    lower = (s + t <= 1)[..., None]
    s, t = s[..., None], t[..., None]
    a = v00 + s * (v01 - v00) + t * (v10 - v00)
    b = v11 + (1 - s) * (v10 - v11) + (1 - t) * (v01 - v11)
    return np.where(lower, a, b)


@dataclass
class DisplacementField:
    """Alignment map stored as displacement in meters.

    ``samples`` and ``boundary_conditions`` define the smooth interpolant
    :meth:`smooth`; ``nodes_*`` and ``node_disp``/``node_disp_inv`` define the
    piecewise-affine maps used for warping.
    """

    domain: CoordinateSystem
    samples: list[Sample]
    boundary_conditions: list[BoundaryCondition]
    nodes_x: np.ndarray  # continuous pixel x of grid nodes
    nodes_y: np.ndarray  # continuous pixel y (row direction) of grid nodes
    node_disp: np.ndarray  # (ny, nx, 2) pixel displacement (d_col, d_row)
    node_disp_inv: np.ndarray
    levels: list[dict] = field(default_factory=list)
    _rbf: Optional[tuple] = field(default=None, repr=False)

    # pixel <-> physical helpers; pixel points are (x=col, y=row) continuous
    def _to_px(self, xy: np.ndarray) -> np.ndarray:
        rc = self.domain.phys_to_pixel(xy)
        return np.stack([rc[..., 1] + 0.5, rc[..., 0] + 0.5], axis=-1)

    def _disp_to_phys(self, d: np.ndarray) -> np.ndarray:
        return np.stack([d[..., 0] * self.domain.dx, -d[..., 1] * self.domain.dy], axis=-1)

    def _rbfs(self):
        if self._rbf is None:
            self._rbf = _fit_rbfs(self.domain, self.samples, self.boundary_conditions)
        return self._rbf

    def smooth_px(self, pts_px: np.ndarray) -> np.ndarray:
        """RBF displacement (d_col, d_row) in pixels at pixel points."""
        fx, fy = self._rbfs()
        flat = pts_px.reshape(-1, 2)
        out = np.stack([fx(flat), fy(flat)], axis=-1)
        return out.reshape(pts_px.shape)

    def smooth(self, xy) -> np.ndarray:
        """RBF displacement (meters) at physical points."""
        xy = np.asarray(xy, dtype=float)
        return self._disp_to_phys(self.smooth_px(self._to_px(xy)))

    def grid_px(self, pts_px: np.ndarray, inverse: bool = False) -> np.ndarray:
        vals = self.node_disp_inv if inverse else self.node_disp
        return _pa_eval(self.nodes_x, self.nodes_y, vals, pts_px[..., 0], pts_px[..., 1])

    def __call__(self, xy, inverse: bool = False) -> np.ndarray:
        """Piecewise-affine displacement (meters) at physical points."""
        xy = np.asarray(xy, dtype=float)
        return self._disp_to_phys(self.grid_px(self._to_px(xy), inverse))

    def dense_px(self, inverse: bool = False) -> np.ndarray:
        """Piecewise-affine pixel displacement at every pixel center, (rows, cols, 2)."""
        yy, xx = np.mgrid[0:self.domain.rows, 0:self.domain.cols].astype(float) + 0.5
        return self.grid_px(np.stack([xx, yy], axis=-1), inverse)

    @property
    def fidelity(self) -> Optional[np.ndarray]:
        return self.levels[-1]["fidelity"] if self.levels else None

    def to_dict(self) -> dict:
        d = self.domain
        return {
            "domain": {"rows": d.rows, "cols": d.cols, "width": d.width, "height": d.height, "origin": list(d.origin)},
            "samples": [
                {"center": s.center.tolist(), "translation": s.translation.tolist(), "accepted": s.accepted,
                 "score": s.score}
                for s in self.samples
            ],
            "boundary_conditions": [
                {"coord": b.coord.tolist(), "component": b.component, "value": b.value}
                for b in self.boundary_conditions
            ],
            "nodes_x": self.nodes_x.tolist(),
            "nodes_y": self.nodes_y.tolist(),
            "node_disp": self.node_disp.tolist(),
            "node_disp_inv": self.node_disp_inv.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "DisplacementField":
        dom = d["domain"]
        coords = CoordinateSystem(dom["rows"], dom["cols"], dom["width"], dom["height"], tuple(dom["origin"]))
        samples = [Sample(np.array(s["center"]), np.array(s["translation"]), s["accepted"], s["score"])
                   for s in d["samples"]]
        bcs = [BoundaryCondition(np.array(b["coord"]), b["component"], b["value"]) for b in d["boundary_conditions"]]
        return cls(coords, samples, bcs, np.array(d["nodes_x"]), np.array(d["nodes_y"]),
                   np.array(d["node_disp"]), np.array(d["node_disp_inv"]))


def _fit_rbfs(domain: CoordinateSystem, samples: Sequence[Sample], bcs: Sequence[BoundaryCondition]):
    """Two scalar thin-plate splines (d_col and d_row, pixel units)."""
    acc = [s for s in samples if s.accepted]
    pts = np.array([s.center for s in acc], dtype=float)
    rc = domain.phys_to_pixel(pts)
    pts_px = np.stack([rc[:, 1] + 0.5, rc[:, 0] + 0.5], axis=1)
    disp = np.array([s.translation for s in acc], dtype=float)
    dcol = disp[:, 0] / domain.dx
    drow = -disp[:, 1] / domain.dy

    def with_bc(component, values):
        extra = [b for b in bcs if b.component == component]
        if not extra:
            return pts_px, values
        bp = domain.phys_to_pixel(np.array([b.coord for b in extra], dtype=float))
        bp = np.stack([bp[:, 1] + 0.5, bp[:, 0] + 0.5], axis=1)
        scale = domain.dx if component == "x" else -domain.dy
        bv = np.array([b.value for b in extra]) / scale
        # drop boundary points that coincide with samples
        keep = np.array([np.min(np.linalg.norm(pts_px - p, axis=1)) > 1e-6 for p in bp])
        return np.vstack([pts_px, bp[keep]]), np.concatenate([values, bv[keep]])

    px, vx = with_bc("x", dcol)
    py, vy = with_bc("y", drow)
    return (RBFInterpolator(px, vx, kernel="thin_plate_spline", degree=1),
            RBFInterpolator(py, vy, kernel="thin_plate_spline", degree=1))


def build_field(samples: Sequence[Sample], boundary_conditions: Sequence[BoundaryCondition],
                domain: CoordinateSystem, grid: tuple[int, int] = (16, 16)) -> DisplacementField:
    """Globalize patch translations into a displacement field.

    Args:
        samples: patch centers and translations (meters); only accepted ones
            are interpolated, rejected ones are filled in by the interpolant.
        boundary_conditions: extra constraints on single components.
        domain: coordinate system of the images.
        grid: number of cells (ny, nx) of the piecewise-affine node grid.
    """
    samples = list(samples)
    acc = [s for s in samples if s.accepted]
    if len(acc) < 3:
        raise AlignmentError(f"only {len(acc)} accepted samples; at least 3 are needed", -1,
                             np.array([s.accepted for s in samples]), samples)
    pts = np.array([s.center for s in acc])
    d2 = np.sum((pts[:, None] - pts[None]) ** 2, axis=-1) + np.eye(len(pts))
    if np.min(d2) < 1e-24:
        raise ValueError("duplicate sample coordinates")
    field_ = DisplacementField(domain, samples, list(boundary_conditions), np.array([]), np.array([]),
                               np.zeros((0, 0, 2)), np.zeros((0, 0, 2)))
    ny, nx = grid
    nodes_x = np.linspace(0.0, domain.cols, nx + 1)
    nodes_y = np.linspace(0.0, domain.rows, ny + 1)
    gx, gy = np.meshgrid(nodes_x, nodes_y)
    nodes = np.stack([gx, gy], axis=-1)
    disp = field_.smooth_px(nodes)
    # inverse: displaced nodes carry the negated displacement
    moved = (nodes + disp).reshape(-1, 2)
    neg = -disp.reshape(-1, 2)
    inv = np.stack([
        RBFInterpolator(moved, neg[:, k], kernel="thin_plate_spline", degree=1)(nodes.reshape(-1, 2))
        for k in range(2)
    ], axis=-1).reshape(disp.shape)
    field_.nodes_x, field_.nodes_y = nodes_x, nodes_y
    field_.node_disp, field_.node_disp_inv = disp, inv
    return field_


def identity_field(domain: CoordinateSystem, grid: tuple[int, int] = (1, 1)) -> DisplacementField:
    ny, nx = grid
    z = np.zeros((ny + 1, nx + 1, 2))
    return DisplacementField(domain, [], [], np.linspace(0, domain.cols, nx + 1),
                             np.linspace(0, domain.rows, ny + 1), z, z.copy())


# ---------------------------------------------------------------------------
# Warping


def warp(image: PhysicalImage, field: DisplacementField, direction: str = "forward",
         fill: float = 0.0) -> PhysicalImage:
    """Resample ``image`` through ``psi`` (forward) or ``psi^{-1}`` (inverse).

    Forward warping of the secondary image maps it onto the reference; inverse
    warping carries reference data (e.g. labels) onto the secondary image.
    BINARY images stay binary (threshold at 0.5).
    """
    if direction not in ("forward", "inverse"):
        raise ValueError("direction must be 'forward' or 'inverse'")
    if image.shape != (field.domain.rows, field.domain.cols):
        raise ValueError("field does not cover the image")
    disp = field.dense_px(inverse=direction == "inverse")
    yy, xx = np.mgrid[0:image.rows, 0:image.cols].astype(float)
    coords = [yy + disp[..., 1], xx + disp[..., 0]]
    out = np.empty_like(image.data)
    for c in range(image.channels):
        out[..., c] = ndimage.map_coordinates(image.data[..., c], coords, order=1, mode="constant", cval=fill)
    if image.colorspace is ColorSpace.BINARY:
        out = (out >= 0.5).astype(float)
    return image.with_data(np.clip(out, 0.0, 1.0), image.colorspace)


# ---------------------------------------------------------------------------
# Multilevel alignment


def _level_samples(ps, estimates, domain: CoordinateSystem) -> list[Sample]:
    out = []
    for i, row in enumerate(estimates):
        for j, est in enumerate(row):
            center = ps.center(i, j)
            drow, dcol = est.translation
            t = np.array([dcol * domain.dx, -drow * domain.dy])
            out.append(Sample(center, t, est.accepted, est.score))
    return out


def align(reference: PhysicalImage, secondary: PhysicalImage, hierarchy: PatchHierarchy,
          boundary_conditions: Optional[Sequence[BoundaryCondition]] = None,
          settings: MatchSettings = MatchSettings()) -> DisplacementField:
    """Multilevel pore-space alignment of ``secondary`` onto ``reference``.

    At level ``i`` the secondary is warped by the current piecewise-affine
    estimate, patch translations are measured against the reference, and the
    composed map ``psi_prev o psi_level`` is re-interpolated at the level's
    patch centers. Boundary conditions apply on every level.

    Raises:
        AlignmentError: a level has fewer than 3 trusted patches; the error
            carries that level's fidelity map.
    """
    if not reference.same_geometry(secondary):
        raise ValueError("reference and secondary differ in geometry")
    domain = reference.coordinates
    bcs = list(boundary_conditions or [])
    current: Optional[DisplacementField] = None
    history = []
    for level, (nv, nh) in enumerate(hierarchy.levels):
        moved = secondary if current is None else warp(secondary, current, "forward", fill=0.0)
        ps, estimates = estimate_translations(reference, moved, nv, nh, hierarchy.overlap_at(level), settings)
        fidelity = np.array([[e.accepted for e in row] for row in estimates])
        logger.info("level %d (%dx%d): %d/%d patches accepted", level, nv, nh, fidelity.sum(), fidelity.size)
        if fidelity.sum() < 3:
            raise AlignmentError(
                f"level {level} ({nv}x{nh}): {int(fidelity.sum())} of {fidelity.size} patches accepted",
                level, fidelity, estimates,
            )
        samples = _level_samples(ps, estimates, domain)
        grid = (max(nv, 2), max(nh, 2))
        level_field = build_field(samples, bcs, domain, grid)
        if current is not None:
            # compose at all patch centers of this level: u(c) = t(c) + u_prev(c + t(c));
            # rejected centers get the interpolated correction
            cpx = level_field._to_px(np.array([s.center for s in samples]))
            t = level_field.smooth_px(cpx)
            total = level_field._disp_to_phys(t + current.smooth_px(cpx + t))
            composed = [Sample(s.center, total[k], True, s.score) for k, s in enumerate(samples)]
            level_field = build_field(composed, bcs, domain, grid)
        history.append({"grid": (nv, nh), "fidelity": fidelity,
                        "scores": np.array([[e.score for e in row] for row in estimates])})
        current = level_field
        current.levels = list(history)
    return current


# ---------------------------------------------------------------------------
# Output


def glyph_export(field: DisplacementField, stride: int) -> np.ndarray:
    """Displacement vectors on every ``stride``-th pixel center.

    Returns an array of rows ``(x, y, dx, dy)`` in meters, ordered row-major
    from the top-left pixel.
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    dom = field.domain
    rr, cc = np.meshgrid(np.arange(0, dom.rows, stride), np.arange(0, dom.cols, stride), indexing="ij")
    pix = np.stack([rr, cc], axis=-1).reshape(-1, 2).astype(float)
    xy = dom.pixel_to_phys(pix)
    disp = field(xy)
    return np.hstack([xy, disp])


def write_glyph_csv(table: np.ndarray, path=None) -> str:
    """Write a glyph table as CSV (header ``x,y,dx,dy``); returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "dx", "dy"])
    for row in table:
        w.writerow([repr(float(v)) for v in row])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def fidelity_raster(field: DisplacementField, level: int = -1) -> PhysicalImage:
    """Per-patch acceptance of one level as a BINARY image over the domain."""
    fid = np.asarray(field.levels[level]["fidelity"], dtype=float)
    dom = field.domain
    ri = np.minimum((np.arange(dom.rows) * fid.shape[0]) // dom.rows, fid.shape[0] - 1)
    ci = np.minimum((np.arange(dom.cols) * fid.shape[1]) // dom.cols, fid.shape[1] - 1)
    raster = fid[np.ix_(ri, ci)]
    return new_image(raster, dom.width, dom.height, dom.origin, colorspace=ColorSpace.BINARY)


def displacement_gradient(field: DisplacementField) -> np.ndarray:
    """Physical displacement gradient on the pixel grid, shape (rows, cols, 2, 2).

    Entry ``[..., a, b]`` is ``d u_a / d x_b`` with ``x_0 = x`` and ``x_1 = y``.
    """
    dom = field.domain
    disp = field.dense_px()
    ux = disp[..., 0] * dom.dx
    uy = -disp[..., 1] * dom.dy
    out = np.empty(disp.shape[:2] + (2, 2))
    for a, u in enumerate((ux, uy)):
        d_row, d_col = np.gradient(u)
        out[..., a, 0] = d_col / dom.dx
        out[..., a, 1] = -d_row / dom.dy
    return out
