"""Normalized cross-correlation template matching with subpixel refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.feature import match_template


@dataclass
class Match:
    shift: np.ndarray  # (d_row, d_col) in pixels, subpixel
    score: float  # NCC peak in [-1, 1]
    on_border: bool  # peak at the edge of the search range


def _parabola_offset(m1: float, m0: float, p1: float) -> float:
    denom = m1 - 2.0 * m0 + p1
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (m1 - p1) / denom, -0.5, 0.5))


def ncc_search(template: np.ndarray, search: np.ndarray, origin: tuple[int, int],
               open_sides: tuple[bool, bool, bool, bool] = (True, True, True, True)) -> Match:
    """Locate ``template`` inside the larger ``search`` window.

    ``origin`` is the (row, col) position in the search window at which the
    template would sit for zero shift. The returned shift is the displacement
    of the best match relative to that position, refined to subpixel accuracy
    by a separable parabola fit through the NCC peak and its neighbors.
    ``open_sides`` (top, bottom, left, right) tells which window edges are
    real search limits; a peak on a side clipped by the image is not flagged.
    """
    ncc = match_template(search, template)
    i, j = np.unravel_index(int(np.argmax(ncc)), ncc.shape)
    score = float(ncc[i, j])
    n_r, n_c = ncc.shape
    di = dj = 0.0
    exact = score >= 1.0 - 1e-12  # a perfect match is an integer shift
    if 0 < i < n_r - 1 and not exact:
        di = _parabola_offset(ncc[i - 1, j], ncc[i, j], ncc[i + 1, j])
    if 0 < j < n_c - 1 and not exact:
        dj = _parabola_offset(ncc[i, j - 1], ncc[i, j], ncc[i, j + 1])
    top, bottom, left, right = open_sides
    border = ((i == 0 and top) or (i == n_r - 1 and bottom) or (j == 0 and left)
              or (j == n_c - 1 and right)) and ncc.size > 1
    shift = np.array([i + di - origin[0], j + dj - origin[1]])
    return Match(shift, score, bool(border))


def match_translation(reference: np.ndarray, image: np.ndarray, rows: slice, cols: slice, radius: int,
                      offset: tuple[int, int] = (0, 0), min_size: int = 8) -> Match:
    """Translation of the ``reference[rows, cols]`` block as seen in ``image``.

    The search window is the block moved by the integer ``offset`` and grown
    by ``radius`` pixels on each side. Where that window would leave the
    image, the block is trimmed instead so that the full search range stays
    available. A positive shift means the content sits further down/right in
    ``image``; it includes the offset.
    """
    H, W = image.shape
    r0 = max(rows.start, radius - offset[0])
    r1 = min(rows.stop, H - radius - offset[0])
    c0 = max(cols.start, radius - offset[1])
    c1 = min(cols.stop, W - radius - offset[1])
    if r1 - r0 < min_size or c1 - c0 < min_size:
        return Match(np.array(offset, dtype=float), 0.0, True)
    template = reference[r0:r1, c0:c1]
    s_r0, s_c0 = r0 + offset[0] - radius, c0 + offset[1] - radius
    search = image[s_r0:r1 + offset[0] + radius, s_c0:c1 + offset[1] + radius]
    return ncc_search(template, search, (r0 - s_r0, c0 - s_c0))
