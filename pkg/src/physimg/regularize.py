"""Weighted anisotropic total-variation regularization and scale change.

The functional minimized by :func:`tv_denoise` is::

    E(u) = 1/2 sum(omega * (f - u)**2) + sum(mu_x * |D_x u| + mu_y * |D_y u|)

with forward differences and reflecting boundaries. ``mu`` is given in
physical length units (signal assumed unitless) and converted per axis by the
pixel pitch, so the same ``mu`` yields the same result at any resolution.
Both ``mu`` and ``omega`` may vary in space.

The solver is split Bregman: the ``u`` update solves the screened Poisson
system ``(omega + lam * D^T D) u = rhs`` and the ``d`` update is a pixelwise
shrinkage with threshold ``mu / lam``.
"""

from __future__ import annotations

import enum
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import fft as sfft
from scipy.ndimage import zoom
from scipy.sparse.linalg import LinearOperator, cg

from .imgcore import ColorSpace, ImageError, PhysicalImage, new_image, read_raster

logger = logging.getLogger(__name__)

Field = Union[float, np.ndarray, PhysicalImage]

__all__ = [
    "Phase",
    "RegularizationConfig",
    "ScaleSet",
    "ConvergenceWarning",
    "SolverInfo",
    "grad",
    "grad_adjoint",
    "tv_objective",
    "split_bregman",
    "tv_denoise",
    "regularize_array",
    "upscale",
    "porosity",
    "scale_set",
    "load_field",
]


class ConvergenceWarning(RuntimeWarning):
    pass


class Phase(str, enum.Enum):
    FULL = "FULL"
    PORE = "PORE"
    SOLID = "SOLID"


@dataclass
class RegularizationConfig:
    """Parameters of a TV regularization run.

    Attributes:
        mu: regularization length in meters, scalar or per-pixel field.
        omega: fidelity weight, scalar or per-pixel field, nonnegative.
        bregman_penalty: splitting penalty, relative to the mean pixel-unit mu
            and the data range.
        max_iter: outer iteration cap.
        tol: relative L2 change of ``u`` at which iteration stops.
        pore_length: characteristic pore diameter in meters, if known.
        inner: ``"exact"`` (spectral or preconditioned CG solve) or
            ``"gauss_seidel"`` (fixed red-black sweeps).
        sweeps: Gauss-Seidel sweeps per outer iteration.
    """

    mu: Field = 0.0
    omega: Field = 1.0
    bregman_penalty: float = 1.0
    max_iter: int = 200
    tol: float = 1e-4
    pore_length: Optional[float] = None
    inner: str = "exact"
    sweeps: int = 2

    def __post_init__(self) -> None:
        if self.bregman_penalty <= 0:
            raise ValueError("bregman_penalty must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.inner not in ("exact", "gauss_seidel"):
            raise ValueError(f"unknown inner solver {self.inner!r}")
        for name in ("mu", "omega"):
            value = getattr(self, name)
            arr = value.data if isinstance(value, PhysicalImage) else np.asarray(value, dtype=float)
            if np.any(arr < 0):
                raise ValueError(f"{name} must be nonnegative")

    def with_(self, **changes) -> "RegularizationConfig":
        from dataclasses import replace

        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for k in ("mu", "omega"):
            v = getattr(self, k)
            out[k] = float(v) if np.ndim(v) == 0 and not isinstance(v, PhysicalImage) else "<field>"
        out.update(
            bregman_penalty=self.bregman_penalty,
            max_iter=self.max_iter,
            tol=self.tol,
            pore_length=self.pore_length,
            inner=self.inner,
            sweeps=self.sweeps,
        )
        return out


@dataclass
class SolverInfo:
    iterations: int
    converged: bool
    rel_change: float
    objective: float
    objective_input: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


@dataclass
class ScaleSet:
    """Pore-scale image ``g``, Darcy-scale images ``G``, ``Gp``, ``Gs`` and
    porosity ``G0``."""

    g: PhysicalImage
    G: PhysicalImage
    Gp: PhysicalImage
    Gs: PhysicalImage
    G0: PhysicalImage
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Discrete operators


def grad(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences (along columns, along rows), zero on the last line."""
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def grad_adjoint(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`grad` (a negative divergence)."""
    out = np.zeros_like(px)
    out[:, :-1] -= px[:, :-1]
    out[:, 1:] += px[:, :-1]
    out[:-1, :] -= py[:-1, :]
    out[1:, :] += py[:-1, :]
    return out


def tv_objective(u, f, omega, mu_x, mu_y) -> float:
    """Value of the weighted anisotropic ROF functional (pixel units)."""
    gx, gy = grad(np.asarray(u, dtype=float))
    fid = 0.5 * np.sum(omega * (np.asarray(f) - u) ** 2)
    return float(fid + np.sum(mu_x * np.abs(gx)) + np.sum(mu_y * np.abs(gy)))


def _shrink(v: np.ndarray, t) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _laplacian_eigs(rows: int, cols: int) -> np.ndarray:
    ey = 2.0 - 2.0 * np.cos(np.pi * np.arange(rows) / rows)
    ex = 2.0 - 2.0 * np.cos(np.pi * np.arange(cols) / cols)
    return ey[:, None] + ex[None, :]


class _ScreenedPoisson:
    """Solver for ``(omega + lam * D^T D) u = rhs`` with Neumann boundaries."""

    def __init__(self, omega: np.ndarray, lam: float, inner: str, sweeps: int):
        self.omega = omega
        self.lam = lam
        self.inner = inner
        self.sweeps = sweeps
        self.shape = omega.shape
        self.eigs = _laplacian_eigs(*self.shape)
        self.constant = bool(np.all(omega == omega.flat[0]))
        self.omega_bar = float(omega.mean())
        if inner == "gauss_seidel":
            rows, cols = self.shape
            nb = np.zeros(self.shape)
            nb[:, :-1] += 1
            nb[:, 1:] += 1
            nb[:-1, :] += 1
            nb[1:, :] += 1
            self.diag = omega + lam * nb
            ii, jj = np.indices(self.shape)
            self.red = (ii + jj) % 2 == 0

    def _spectral(self, rhs: np.ndarray, omega: float) -> np.ndarray:
        coef = sfft.dctn(rhs, type=2, norm="ortho")
        coef /= omega + self.lam * self.eigs
        return sfft.idctn(coef, type=2, norm="ortho")

    def apply(self, u: np.ndarray) -> np.ndarray:
        gx, gy = grad(u)
        return self.omega * u + self.lam * grad_adjoint(gx, gy)

    def solve(self, rhs: np.ndarray, u0: np.ndarray) -> np.ndarray:
        if self.inner == "gauss_seidel":
            return self._gauss_seidel(rhs, u0)
        if self.constant:
            return self._spectral(rhs, self.omega_bar)
        n = rhs.size
        A = LinearOperator((n, n), matvec=lambda v: self.apply(v.reshape(self.shape)).ravel(), dtype=float)
        M = LinearOperator(
            (n, n), matvec=lambda v: self._spectral(v.reshape(self.shape), self.omega_bar).ravel(), dtype=float
        )
        sol, _ = cg(A, rhs.ravel(), x0=u0.ravel(), rtol=1e-10, atol=0.0, maxiter=200, M=M)
        return sol.reshape(self.shape)

    def _neighbor_sum(self, u: np.ndarray) -> np.ndarray:
        s = np.zeros_like(u)
        s[:, :-1] += u[:, 1:]
        s[:, 1:] += u[:, :-1]
        s[:-1, :] += u[1:, :]
        s[1:, :] += u[:-1, :]
        return s

    def _gauss_seidel(self, rhs: np.ndarray, u0: np.ndarray) -> np.ndarray:
        u = u0.copy()
        for _ in range(self.sweeps):
            for mask in (self.red, ~self.red):
                upd = (rhs + self.lam * self._neighbor_sum(u)) / self.diag
                u[mask] = upd[mask]
        return u


def split_bregman(
    f: np.ndarray,
    omega,
    mu_x,
    mu_y,
    penalty: float = 1.0,
    max_iter: int = 200,
    tol: float = 1e-4,
    inner: str = "exact",
    sweeps: int = 2,
) -> tuple[np.ndarray, SolverInfo]:
    """Minimize the weighted anisotropic ROF functional on a 2D array.

    ``omega``, ``mu_x`` and ``mu_y`` broadcast against ``f`` and are in pixel
    units. ``penalty`` scales the Bregman splitting parameter ``lam``, which is
    normalized so that the shrinkage threshold ``mu / lam`` is a tenth of the
    data range (divided by ``penalty``) whatever the regularization strength.
    """
    f = np.asarray(f, dtype=float)
    omega = np.broadcast_to(np.asarray(omega, dtype=float), f.shape).copy()
    mu_x = np.broadcast_to(np.asarray(mu_x, dtype=float), f.shape)
    mu_y = np.broadcast_to(np.asarray(mu_y, dtype=float), f.shape)
    if not np.any(omega > 0):
        raise ValueError("omega is identically zero")
    e_in = tv_objective(f, f, omega, mu_x, mu_y)
    mu_max = max(float(mu_x.max()), float(mu_y.max()))
    if mu_max == 0.0:
        return f.copy(), SolverInfo(0, True, 0.0, e_in, e_in)

    span = float(f.max() - f.min())
    if span == 0.0:
        return f.copy(), SolverInfo(0, True, 0.0, e_in, e_in)
    active = np.concatenate([mu_x[mu_x > 0], mu_y[mu_y > 0]])
    # shrinkage threshold mu / lam = 0.1 * span / penalty
    lam = penalty * float(active.mean()) / (0.1 * span)
    solver = _ScreenedPoisson(omega, lam, inner, sweeps)

    u = f.copy()
    dx = np.zeros_like(f)
    dy = np.zeros_like(f)
    bx = np.zeros_like(f)
    by = np.zeros_like(f)
    wf = omega * f
    tx, ty = mu_x / lam, mu_y / lam
    rel = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        rhs = wf + lam * grad_adjoint(dx - bx, dy - by)
        u_new = solver.solve(rhs, u)
        gx, gy = grad(u_new)
        dx = _shrink(gx + bx, tx)
        dy = _shrink(gy + by, ty)
        bx += gx - dx
        by += gy - dy
        rel = np.linalg.norm(u_new - u) / max(np.linalg.norm(u_new), 1e-12)
        u = u_new
        if rel <= tol:
            break
    # Truncation to the data range never increases E.
    u = np.clip(u, f.min(), f.max())
    info = SolverInfo(it, bool(rel <= tol), float(rel), tv_objective(u, f, omega, mu_x, mu_y), e_in)
    return u, info


# ---------------------------------------------------------------------------
# Physical-image front end


def _as_pixel_field(value: Field, image: PhysicalImage, name: str) -> np.ndarray:
    if isinstance(value, PhysicalImage):
        if value.channels != 1:
            raise ImageError(f"{name} field must be single-channel")
        arr = value.plane
    else:
        arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(image.shape, float(arr))
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.shape != image.shape:
        # fields over the same physical domain at another resolution
        factors = (image.rows / arr.shape[0], image.cols / arr.shape[1])
        arr = zoom(arr, factors, order=1, mode="nearest", grid_mode=True)
    return np.asarray(arr, dtype=float)


def load_field(path) -> np.ndarray:
    """Read a single-channel raster (mu or omega) as a 2D float array."""
    arr = read_raster(path)
    return arr[..., 0]


def _signal_plane(image: PhysicalImage) -> np.ndarray:
    if image.channels != 1:
        raise ImageError("regularization requires a single-channel image")
    return image.plane


def regularize_array(f: np.ndarray, pitch: tuple[float, float], config: RegularizationConfig,
                     like: Optional[PhysicalImage] = None) -> tuple[np.ndarray, SolverInfo]:
    """TV-regularize a plain 2D array (any sign) with pixel pitch ``(dx, dy)``.

    Field-valued ``mu`` and ``omega`` may be arrays of the same shape, or
    PhysicalImages when ``like`` provides the target geometry.
    """
    f = np.asarray(f, dtype=float)
    dxm, dym = pitch
    ref = like if like is not None else new_image(np.zeros(f.shape), dxm * f.shape[1], dym * f.shape[0])
    mu = _as_pixel_field(config.mu, ref, "mu")
    omega = _as_pixel_field(config.omega, ref, "omega")
    if not np.any(omega > 0):
        raise ValueError("omega is identically zero")
    u, info = split_bregman(
        f, omega, mu / dxm, mu / dym, config.bregman_penalty, config.max_iter, config.tol, config.inner, config.sweeps
    )
    if not info.converged:
        warnings.warn(
            f"split Bregman stopped after {info.iterations} iterations (relative change {info.rel_change:.2e})",
            ConvergenceWarning,
            stacklevel=3,
        )
    logger.debug("split Bregman %s", info.to_json())
    return u, info


def tv_denoise(image: PhysicalImage, config: RegularizationConfig) -> PhysicalImage:
    """TV-regularize a single-channel image.

    Solver diagnostics are stored under ``metadata["tv"]`` of the result. A
    :class:`ConvergenceWarning` is issued if ``max_iter`` is reached first.
    """
    u, info = regularize_array(_signal_plane(image), image.pitch, config, like=image)
    colorspace = ColorSpace.GRAY if image.colorspace is ColorSpace.BINARY else image.colorspace
    out = image.with_data(np.clip(u, 0.0, 1.0), colorspace)
    out.metadata["tv"] = dict(info.__dict__)
    return out


def _phase_weight(pore: np.ndarray, phase: Phase) -> np.ndarray:
    if phase is Phase.FULL:
        return np.ones_like(pore)
    if phase is Phase.PORE:
        return pore
    return 1.0 - pore


def upscale(
    image: PhysicalImage,
    pore_indicator: Union[PhysicalImage, np.ndarray],
    phase: Union[Phase, str],
    config: RegularizationConfig,
) -> PhysicalImage:
    """Darcy-scale regularization relative to the full, pore or solid space.

    The fidelity weight is 1 (FULL), the pore indicator (PORE) or its
    complement (SOLID); ``config.omega`` is ignored.
    """
    phase = Phase(phase)
    pore = _as_pixel_field(pore_indicator, image, "pore_indicator")
    if pore.min() < 0 or pore.max() > 1:
        raise ValueError("pore indicator must lie in [0, 1]")
    omega = _phase_weight(pore, phase)
    if not np.any(omega > 0):
        raise ValueError(f"{phase.value} weight is identically zero")
    if config.pore_length is not None and np.ndim(config.mu) == 0 and float(config.mu) < 3 * config.pore_length:
        warnings.warn("mu < 3 pore lengths: result may retain pore-scale structure", UserWarning, stacklevel=2)
    return tv_denoise(image, config.with_(omega=omega))


def porosity(pore_indicator: PhysicalImage, config: RegularizationConfig) -> PhysicalImage:
    """Porosity as the Darcy-scale regularization of the pore indicator."""
    f = pore_indicator.plane
    if f.min() < 0 or f.max() > 1:
        raise ValueError("pore indicator must lie in [0, 1]")
    return tv_denoise(pore_indicator, config.with_(omega=1.0))


def scale_set(
    image: PhysicalImage,
    pore_indicator: PhysicalImage,
    pore_config: RegularizationConfig,
    darcy_config: RegularizationConfig,
) -> ScaleSet:
    """All four regularized representations of one image plus porosity."""
    g = tv_denoise(image, pore_config.with_(omega=1.0))
    G = upscale(image, pore_indicator, Phase.FULL, darcy_config)
    Gp = upscale(image, pore_indicator, Phase.PORE, darcy_config)
    Gs = upscale(image, pore_indicator, Phase.SOLID, darcy_config)
    G0 = porosity(pore_indicator, darcy_config)
    return ScaleSet(g, G, Gp, Gs, G0)
