"""Synthetic ground truth: grain packs, warped pairs, plume sequences, laser grids.

Every generator is a pure function of its :class:`SynthSpec`; per-frame random
streams are derived from ``(seed, frame index)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.optimize import brentq

from .imgcore import ColorSpace, PhysicalImage, new_image

__all__ = [
    "SynthSpec",
    "GrainPack",
    "WarpPair",
    "PlumeSequence",
    "LaserGrid",
    "sand_texture",
    "gen_grain_pack",
    "gen_warp_pair",
    "gen_plume_sequence",
    "gen_laser_grid",
    "Facies",
    "gen_facies",
    "ColorChart",
    "gen_color_checker",
    "displacement_field",
    "ML_PER_HOUR",
]

ML_PER_HOUR = 1e-6 / 3600.0  # m^3/s


@dataclass
class SynthSpec:
    """Parameters for all generators; each reads only the fields it needs.

    Lengths named ``*_px`` are in pixels, everything else in SI units.
    """

    seed: int = 0
    rows: int = 256
    cols: int = 256
    width: float = 0.256
    height: float = 0.256
    noise: float = 0.0

    # grain pack
    target_porosity: float = 0.4
    grain_radius_px: float = 6.0
    grain_radius_spread: float = 0.1
    n_grains: Optional[int] = None
    pore_value: float = 0.85
    grain_value: float = 0.25

    # warp pair
    field_kind: str = "constant"  # constant | sinusoidal | compression | smooth
    amplitude_px: float = 0.0
    direction: tuple[float, float] = (1.0, 0.0)  # (x, y) in image axes, y down
    wavelength_px: Optional[float] = None
    strain: float = 0.0
    feature_px: float = 2.0
    contrast: float = 0.3
    fine_band: Optional[tuple[float, float]] = None  # row fraction band of fine sand
    fine_feature_px: float = 0.6
    fine_contrast: float = 0.02

    # plume sequence
    stages: Sequence[tuple[float, float]] = ((3600.0, 500 * ML_PER_HOUR),)  # (duration s, rate m^3/s)
    frames_per_stage: int = 4
    alpha: float = 1.5
    beta: float = 0.0
    porosity: float = 0.4
    depth: float = 0.02
    injection_point: tuple[float, float] = (0.5, 0.15)  # fractions of (width, height)
    plume_edge_px: float = 6.0
    plume_cmax: float = 0.9
    n_references: int = 10
    ripple: float = 0.0
    ripple_wavelength_px: float = 120.0
    layers: int = 1
    layer_shift: float = 0.0

    # facies (layer count shared with the plume sequence)
    interface_amplitude_px: float = 6.0

    # color checker under an affine color cast c -> cast_matrix @ c + cast_offset
    cast_matrix: Optional[Sequence[Sequence[float]]] = None
    cast_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    # laser grid
    spacing: float = 0.1
    line_sigma_px: float = 1.5
    homography: Optional[Sequence[Sequence[float]]] = None
    bulge: tuple[float, float] = (0.0, 0.0)
    margin_px: int = 40

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for key in ("direction", "injection_point", "bulge", "fine_band", "cast_offset"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if "stages" in d:
            d["stages"] = tuple(tuple(s) for s in d["stages"])
        return cls(**d)

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])


def _add_noise(arr: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma > 0:
        arr = arr + rng.normal(0.0, sigma, arr.shape)
    return np.clip(arr, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Grain packs


@dataclass
class GrainPack:
    image: PhysicalImage
    indicator: PhysicalImage
    porosity: float
    centers: np.ndarray  # (n, 2) row, col
    radii: np.ndarray


def _hex_lattice(rows: int, cols: int, spacing: float, rng) -> np.ndarray:
    dy = spacing * math.sqrt(3) / 2
    pts = []
    for k, y in enumerate(np.arange(spacing / 2, rows, dy)):
        off = spacing / 2 if k % 2 else 0.0
        for x in np.arange(off + spacing / 2, cols, spacing):
            pts.append((y, x))
    return np.array(pts)


def _render_disks(shape, centers, radii) -> np.ndarray:
    solid = np.zeros(shape, dtype=bool)
    for (cy, cx), r in zip(centers, radii):
        r0, r1 = max(int(cy - r) - 1, 0), min(int(cy + r) + 2, shape[0])
        c0, c1 = max(int(cx - r) - 1, 0), min(int(cx + r) + 2, shape[1])
        yy, xx = np.mgrid[r0:r1, c0:c1]
        solid[r0:r1, c0:c1] |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return solid


def gen_grain_pack(spec: SynthSpec) -> GrainPack:
    """Non-overlapping disks (solid) on a jittered hexagonal lattice.

    The disk radii are scaled by bisection until the pixel porosity matches
    ``target_porosity`` within 0.01. ``n_grains=0`` gives an empty pack;
    ``n_grains=1`` places a single disk of ``grain_radius_px`` at the center.
    """
    rng = spec.rng(0)
    shape = (spec.rows, spec.cols)
    if spec.n_grains is not None and spec.n_grains <= 1:
        if spec.n_grains == 0:
            centers, radii = np.zeros((0, 2)), np.zeros(0)
        else:
            centers = np.array([[(spec.rows - 1) / 2, (spec.cols - 1) / 2]])
            radii = np.array([spec.grain_radius_px])
        solid = _render_disks(shape, centers, radii)
    else:
        if not 0.2 < spec.target_porosity < 0.6:
            raise ValueError("target porosity must lie in (0.2, 0.6)")
        if spec.grain_radius_px < 3:
            raise ValueError("grain radius must be at least 3 pixels")
        coverage = 1.0 - spec.target_porosity
        # lattice spacing giving slightly more than the target coverage at scale 1
        mean_sq = 1.0 + spec.grain_radius_spread ** 2 / 3
        spacing = 0.97 * spec.grain_radius_px * math.sqrt(2 * math.pi * mean_sq / (math.sqrt(3) * coverage))
        base = _hex_lattice(spec.rows, spec.cols, spacing, rng)
        rel = 1.0 + spec.grain_radius_spread * rng.uniform(-1, 1, len(base))
        direction = rng.normal(size=(len(base), 2))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        jitter_frac = rng.uniform(0, 1, len(base))

        def build(scale):
            radii = spec.grain_radius_px * rel * scale
            # grains may move only into the free space around them
            free = np.maximum(spacing / 2 - radii, 0.0)
            centers = base + direction * (free * jitter_frac)[:, None]
            return centers, radii

        def porosity_at(scale):
            c, r = build(scale)
            return 1.0 - _render_disks(shape, c, r).mean()

        max_scale = spacing / 2 / (spec.grain_radius_px * (1 + spec.grain_radius_spread))
        lo, hi = 0.3, max_scale
        if porosity_at(hi) > spec.target_porosity + 0.01:
            raise RuntimeError("grain packing cannot reach the target porosity")
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if porosity_at(mid) > spec.target_porosity:
                lo = mid
            else:
                hi = mid
            if abs(porosity_at(mid) - spec.target_porosity) < 0.002:
                break
        centers, radii = build(mid)
        solid = _render_disks(shape, centers, radii)
    pore = (~solid).astype(float)
    img = np.where(solid, spec.grain_value, spec.pore_value)
    if len(radii):
        grain_id = ndimage.label(solid)[0]
        tint = rng.uniform(-0.05, 0.05, grain_id.max() + 1)
        tint[0] = 0.0
        img = img + tint[grain_id]
    img = _add_noise(img, spec.noise, spec.rng(1))
    image = new_image(img, spec.width, spec.height)
    indicator = new_image(pore, spec.width, spec.height, colorspace=ColorSpace.BINARY)
    return GrainPack(image, indicator, float(pore.mean()), centers, radii)


# ---------------------------------------------------------------------------
# Textures and displacement fields


def sand_texture(shape, feature_px: float, contrast: float, rng: np.random.Generator, mean: float = 0.5):
    """Band-limited random field with standard deviation ``contrast``."""
    noise = rng.normal(size=shape)
    if feature_px > 0:
        noise = ndimage.gaussian_filter(noise, feature_px, mode="wrap")
    noise = (noise - noise.mean()) / max(noise.std(), 1e-12)
    return mean + contrast * noise


def displacement_field(spec: SynthSpec, rows: int, cols: int, offset: int = 0):
    """Analytic displacement in pixels, returned as (d_col, d_row) arrays.

    The field ``u`` relates the pair by ``reference(x) = secondary(x + u(x))``.
    ``offset`` evaluates the field on a canvas padded by that many pixels
    around the ``spec.rows x spec.cols`` domain.
    """
    yy, xx = np.mgrid[0:rows, 0:cols].astype(float) - offset
    R, C = spec.rows, spec.cols
    a = spec.amplitude_px
    ex, ey = spec.direction
    norm = math.hypot(ex, ey) or 1.0
    ex, ey = ex / norm, ey / norm
    kind = spec.field_kind
    if kind == "constant":
        return np.full((rows, cols), a * ex), np.full((rows, cols), a * ey)
    if kind == "sinusoidal":
        lam = spec.wavelength_px or max(R, C)
        s = np.sin(2 * np.pi * xx / lam) * np.cos(2 * np.pi * yy / lam)
        return a * ex * s, a * ey * s
    if kind == "compression":
        # uniaxial strain along rows about the vertical center
        return np.zeros((rows, cols)), spec.strain * (yy - (R - 1) / 2)
    if kind == "smooth":
        # large, slowly varying field of magnitude close to the amplitude;
        # gradients stay below ~0.01 so 128 px patches remain translational
        sx = 0.92 + 0.08 * np.sin(np.pi * xx / C)
        sy = 0.05 * np.sin(np.pi * yy / R)
        return a * sx, a * sy
    raise ValueError(f"unknown field kind {kind!r}")


@dataclass
class WarpPair:
    reference: PhysicalImage
    secondary: PhysicalImage
    field_px: tuple[np.ndarray, np.ndarray]  # (d_col, d_row) on the pixel grid
    fine_mask: Optional[np.ndarray] = None

    def field_phys(self) -> tuple[np.ndarray, np.ndarray]:
        """True displacement in meters as (ux, uy), uy positive upward."""
        dxm, dym = self.reference.pitch
        return self.field_px[0] * dxm, -self.field_px[1] * dym


def _texture_canvas(spec: SynthSpec, pad: int):
    shape = (spec.rows + 2 * pad, spec.cols + 2 * pad)
    tex = sand_texture(shape, spec.feature_px, spec.contrast, spec.rng(0))
    fine_mask = None
    if spec.fine_band is not None:
        fine = sand_texture(shape, spec.fine_feature_px, spec.fine_contrast, spec.rng(5), mean=0.75)
        r0 = pad + int(spec.fine_band[0] * spec.rows)
        r1 = pad + int(spec.fine_band[1] * spec.rows)
        tex[r0:r1] = fine[r0:r1]
        fine_mask = np.zeros((spec.rows, spec.cols), dtype=bool)
        fine_mask[r0 - pad:r1 - pad] = True
    return tex, fine_mask


def gen_warp_pair(spec: SynthSpec) -> WarpPair:
    """Textured reference and a secondary resampled through a known field.

    ``secondary(y) = reference(psi^{-1}(y))`` with ``psi(x) = x + u(x)``, so
    ``reference = secondary o psi``. Independent noise of level ``spec.noise``
    is added to each image.
    """
    du, dv = displacement_field(spec, spec.rows, spec.cols)
    amp = float(max(np.abs(du).max(initial=0), np.abs(dv).max(initial=0)))
    pad = int(math.ceil(amp)) + 8
    canvas, fine_mask = _texture_canvas(spec, pad)
    ref = canvas[pad:pad + spec.rows, pad:pad + spec.cols]
    if spec.field_kind == "constant" and float(du.flat[0]).is_integer() and float(dv.flat[0]).is_integer():
        sc, sr = int(du.flat[0]), int(dv.flat[0])
        sec = canvas[pad - sr:pad - sr + spec.rows, pad - sc:pad - sc + spec.cols]
    else:
        # invert psi by fixed-point iteration: x = y - u(x)
        ux_big, uy_big = displacement_field(spec, spec.rows + 2 * pad, spec.cols + 2 * pad, offset=pad)
        yy, xx = np.mgrid[0:spec.rows, 0:spec.cols].astype(float)
        px, py = xx.copy(), yy.copy()
        for _ in range(60):
            ux = ndimage.map_coordinates(ux_big, [py + pad, px + pad], order=1, mode="nearest")
            uy = ndimage.map_coordinates(uy_big, [py + pad, px + pad], order=1, mode="nearest")
            px, py = xx - ux, yy - uy
        sec = ndimage.map_coordinates(canvas, [py + pad, px + pad], order=3, mode="mirror")
    ref = _add_noise(ref, spec.noise, spec.rng(1))
    sec = _add_noise(sec, spec.noise, spec.rng(2))
    reference = new_image(ref, spec.width, spec.height)
    secondary = new_image(sec, spec.width, spec.height)
    return WarpPair(reference, secondary, (du, dv), fine_mask)


# ---------------------------------------------------------------------------
# Plume sequences


@dataclass
class PlumeSequence:
    reference: PhysicalImage
    references: list[PhysicalImage]
    frames: list[PhysicalImage]
    times: np.ndarray
    concentrations: list[np.ndarray]
    masks: list[np.ndarray]
    volumes: np.ndarray
    alpha: float
    beta: float
    porosity: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    signal_shift: np.ndarray  # per-label multiplier of the signal


def _cumulative_volume(stages, t: float) -> float:
    v, t0 = 0.0, 0.0
    for dur, rate in stages:
        step = min(max(t - t0, 0.0), dur)
        v += rate * step
        t0 += dur
    return v


def _plume_field(r: np.ndarray, radius: float, edge: float, cmax: float) -> np.ndarray:
    return cmax * np.clip((radius - r) / edge + 0.5, 0.0, 1.0)


def gen_plume_sequence(spec: SynthSpec) -> PlumeSequence:
    """Plume frames whose concentration integrates to the injected volume.

    The concentration is a soft-edged disk around the injection point; its
    radius is solved so that ``sum(c * porosity * depth * pixel_area)`` equals
    the cumulative injected volume. Signals follow the inverse of the affine
    model ``c = alpha * s + beta`` and are added to every RGB channel of the
    reference, so the NEGKEY difference equals the signal exactly.
    """
    rows, cols = spec.rows, spec.cols
    dxm, dym = spec.width / cols, spec.height / rows
    area = dxm * dym
    phi = np.full((rows, cols), spec.porosity)
    depth = np.full((rows, cols), spec.depth)
    dv = phi * depth * area
    yy, xx = np.mgrid[0:rows, 0:cols].astype(float)
    cx = spec.injection_point[0] * cols
    cy = rows - spec.injection_point[1] * rows
    r = np.hypot(xx + 0.5 - cx, yy + 0.5 - cy)
    edge = spec.plume_edge_px

    # layered background with per-layer color and signal response
    labels = np.minimum((yy * spec.layers / rows).astype(int), spec.layers - 1)
    lrng = spec.rng(0)
    layer_rgb = lrng.uniform(0.15, 0.3, (spec.layers, 3))
    shift = 1.0 + spec.layer_shift * np.linspace(-1, 1, spec.layers) if spec.layers > 1 else np.ones(1)
    base = layer_rgb[labels]
    base = base + sand_texture((rows, cols), 1.0, 0.01, spec.rng(1), mean=0.0)[..., None]

    yy_n = (yy + 0.5) / spec.ripple_wavelength_px
    xx_n = (xx + 0.5) / spec.ripple_wavelength_px
    pattern = np.sin(2 * np.pi * xx_n) * np.sin(2 * np.pi * yy_n + 0.3)

    def render(signal: np.ndarray, stream: int, flicker: float) -> PhysicalImage:
        img = base + (signal * shift[labels])[..., None] + (spec.ripple * flicker * pattern)[..., None]
        return new_image(_add_noise(img, spec.noise, spec.rng(stream)), spec.width, spec.height)

    frng = spec.rng(2)
    reference = render(np.zeros((rows, cols)), 100, 0.0)
    flick = frng.uniform(-1, 1, spec.n_references)
    if spec.n_references >= 2:
        flick[:2] = (1.0, -1.0)
    references = [reference] + [render(np.zeros((rows, cols)), 101 + k, flick[k]) for k in range(spec.n_references - 1)]

    times, t0 = [], 0.0
    for dur, _ in spec.stages:
        times.extend(t0 + dur * (np.arange(1, spec.frames_per_stage + 1) / spec.frames_per_stage))
        t0 += dur
    times = np.array(times)
    frames, concs, masks, vols = [], [], [], []
    for k, t in enumerate(times):
        target = _cumulative_volume(spec.stages, t)
        if target <= 0:
            c = np.zeros((rows, cols))
        else:
            def excess(radius):
                return float(np.sum(_plume_field(r, radius, edge, spec.plume_cmax) * dv)) - target

            rmax = float(np.hypot(rows, cols)) + edge
            if excess(rmax) < 0:
                raise ValueError("injected volume exceeds the pore volume of the domain")
            radius = brentq(excess, -edge, rmax, xtol=1e-13, rtol=1e-15, maxiter=500)
            c = _plume_field(r, radius, edge, spec.plume_cmax)
        signal = (c - spec.beta) / spec.alpha * (c > 0)
        flicker = frng.uniform(-0.9, 0.9)
        frames.append(replace(render(signal, 200 + k, flicker), timestamp=float(t)))
        concs.append(c)
        masks.append(c >= 0.5)
        vols.append(float(np.sum(c * dv)))
    return PlumeSequence(
        reference, references, frames, times, concs, masks, np.array(vols),
        spec.alpha, spec.beta, phi, depth, labels, shift,
    )


# ---------------------------------------------------------------------------
# Facies


@dataclass
class Facies:
    image: PhysicalImage
    labels: np.ndarray  # true layer index per pixel, 0 at the top
    interfaces: np.ndarray  # (layers - 1, cols) continuous row of each interface


def gen_facies(spec: SynthSpec) -> Facies:
    """Horizontal layers with gently curved interfaces and distinct gray values.

    Interface ``k`` sits at ``(k + 1) * rows / layers`` plus a sinusoid of
    amplitude ``spec.interface_amplitude_px``. Layer values are a shuffled
    ramp from 0.2 to 0.8; noise of standard deviation ``spec.noise`` is added.
    """
    rows, cols, n = spec.rows, spec.cols, spec.layers
    rng = spec.rng(0)
    values = rng.permutation(np.linspace(0.2, 0.8, n))
    x = np.arange(cols) + 0.5
    phases = rng.uniform(0, 2 * np.pi, n - 1)
    interfaces = np.array([
        (k + 1) * rows / n + spec.interface_amplitude_px * np.sin(2 * np.pi * x / cols + phases[k])
        for k in range(n - 1)
    ]).reshape(n - 1, cols)
    yy = np.arange(rows)[:, None] + 0.5
    labels = np.sum(yy[None] > interfaces[:, None, :], axis=0)
    img = _add_noise(values[labels], spec.noise, spec.rng(1))
    return Facies(new_image(img, spec.width, spec.height), labels, interfaces)


# ---------------------------------------------------------------------------
# Color checker


@dataclass
class ColorChart:
    image: PhysicalImage
    swatch_roi: tuple[tuple[float, float], tuple[float, float]]  # physical lower-left, upper-right
    targets: np.ndarray  # (24, 3) true swatch colors
    observed: np.ndarray  # (24, 3) swatch colors after the cast


def gen_color_checker(spec: SynthSpec) -> ColorChart:
    """Classic 24-swatch checker occupying the central half of the image.

    Colors pass through the affine cast given in ``spec``; the cast must keep all
    values inside [0, 1] so that no clipping occurs (checked). The background
    is a mid gray sent through the same cast.
    """
    from .corrections import classic_checker

    targets = classic_checker()
    M = np.eye(3) if spec.cast_matrix is None else np.asarray(spec.cast_matrix, dtype=float)
    b = np.asarray(spec.cast_offset, dtype=float)
    observed = targets @ M.T + b
    background = np.full(3, 0.5) @ M.T + b
    if observed.min() < 0 or observed.max() > 1 or background.min() < 0 or background.max() > 1:
        raise ValueError("color cast leaves the unit cube")
    rows, cols = spec.rows, spec.cols
    img = np.broadcast_to(background, (rows, cols, 3)).copy()
    r0, r1 = rows // 4, rows - rows // 4
    c0, c1 = cols // 4, cols - cols // 4
    re = np.linspace(r0, r1, 5).round().astype(int)
    ce = np.linspace(c0, c1, 7).round().astype(int)
    for k in range(24):
        i, j = divmod(k, 6)
        img[re[i]:re[i + 1], ce[j]:ce[j + 1]] = observed[k]
    if spec.noise > 0:
        img = _add_noise(img, spec.noise, spec.rng(0))
    dxm, dym = spec.width / cols, spec.height / rows
    roi = ((c0 * dxm, (rows - r1) * dym), (c1 * dxm, (rows - r0) * dym))
    return ColorChart(new_image(img, spec.width, spec.height), roi, targets, observed)


# ---------------------------------------------------------------------------
# Laser grids


@dataclass
class LaserGrid:
    image: PhysicalImage
    homography: np.ndarray  # target pixel coords -> distorted pixel coords
    bulge: tuple[float, float]
    corners: np.ndarray  # distorted positions of the target rectangle corners (x, y)
    target_shape: tuple[int, int]
    target_size: tuple[float, float]
    ideal: np.ndarray


def _apply_h(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1) @ H.T
    return p[..., :2] / p[..., 2:3]


def _bulge(pts: np.ndarray, b, size) -> np.ndarray:
    w, h = size
    xi = 2 * pts[..., 0] / w - 1
    eta = 2 * pts[..., 1] / h - 1
    xi2 = xi + b[0] * xi * (1 - eta ** 2)
    eta2 = eta + b[1] * eta * (1 - xi ** 2)
    return np.stack([(xi2 + 1) * w / 2, (eta2 + 1) * h / 2], axis=-1)


def _bulge_inverse(pts: np.ndarray, b, size) -> np.ndarray:
    z = pts.copy()
    for _ in range(100):
        z = z - (_bulge(z, b, size) - pts)
    return z


def gen_laser_grid(spec: SynthSpec) -> LaserGrid:
    """Ideal grid with lines every ``spec.spacing`` meters, distorted by a bulge
    followed by a homography.

    The ideal (target) image has ``spec.rows x spec.cols`` pixels over
    ``spec.width x spec.height``. Pixel coordinates are continuous (x, y) with
    the top-left image corner at (0, 0). The returned ``corners`` are the
    distorted positions of the target corners in the order top-left,
    top-right, bottom-right, bottom-left.
    """
    rows, cols = spec.rows, spec.cols
    H = np.eye(3) if spec.homography is None else np.asarray(spec.homography, dtype=float)
    size = (float(cols), float(rows))
    rect = np.array([[0.0, 0.0], [cols, 0.0], [cols, rows], [0.0, rows]])
    corners = _apply_h(H, rect)
    margin = spec.margin_px
    if spec.homography is None and spec.bulge == (0.0, 0.0):
        margin = 0
    out_cols = int(math.ceil(corners[:, 0].max())) + margin
    out_rows = int(math.ceil(corners[:, 1].max())) + margin

    pitch_x = spec.width / cols
    pitch_y = spec.height / rows
    sx = spec.spacing / pitch_x
    sy = spec.spacing / pitch_y

    def ideal(px, py):
        # distance to the nearest line position k * spacing (in pixel units)
        ddx = px - sx * np.round(px / sx)
        ddy = (rows - py) - sy * np.round((rows - py) / sy)
        s2 = 2 * spec.line_sigma_px ** 2
        v = np.maximum(np.exp(-ddx ** 2 / s2), np.exp(-ddy ** 2 / s2))
        return 0.1 + 0.8 * v

    yy, xx = np.mgrid[0:out_rows, 0:out_cols].astype(float) + 0.5
    pts = np.stack([xx, yy], axis=-1)
    Hinv = np.linalg.inv(H)
    tgt = _bulge_inverse(_apply_h(Hinv, pts), spec.bulge, size)
    inside = (tgt[..., 0] >= 0) & (tgt[..., 0] <= cols) & (tgt[..., 1] >= 0) & (tgt[..., 1] <= rows)
    img = np.where(inside, ideal(tgt[..., 0], tgt[..., 1]), 0.0)
    img = _add_noise(img, spec.noise, spec.rng(0))
    ti = np.mgrid[0:rows, 0:cols].astype(float) + 0.5
    ideal_img = ideal(ti[1], ti[0])
    image = new_image(img, out_cols * pitch_x, out_rows * pitch_y)
    return LaserGrid(image, H, tuple(spec.bulge), corners, (rows, cols), (spec.width, spec.height), ideal_img)
