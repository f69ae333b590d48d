"""Deterministic software rasterization of multivariate windows to RGB line plots.

Each plotted channel gets its own band (horizontal layout: full-width bands
stacked top to bottom) or grid cell (row-major ceil(sqrt(C)) x ceil(C/rows)
grid). Within its region a channel is min-max scaled with a 2 px margin and
stroked as a polyline with per-channel colors. No axes, ticks, or legends.

Rendering is pure numpy and bit-deterministic: the same window and config
always produce byte-identical pixels. The normalized value is quantized to a
1/4096 grid before geometry so per-band min-max scaling is also bit-invariant
under per-channel vertical shifts.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

_NORM_QUANT = 4096.0
_MARGIN_PX = 2.0
_DEFAULT_STROKE = (0.0, 0.0, 0.0)
_MIN_BAND_PX = 4
_ADVISORY_BAND_PX = 8


class RenderError(ValueError):
    """Raised when a window cannot be rendered under the given config."""


@dataclass(frozen=True)
class RenderConfig:
    height: int = 224
    width: int = 224
    layout: str = "horizontal"  # horizontal | grid
    color_coding: bool = True
    line_width: int = 1
    antialias: bool = True
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    max_channels: int = 50
    corr_threshold: float = 0.95

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise RenderError("height and width must be positive")
        if self.layout not in ("horizontal", "grid"):
            raise RenderError(f"unknown layout {self.layout!r}")
        if self.line_width < 1:
            raise RenderError("line_width must be >= 1 px")
        if self.max_channels < 1:
            raise RenderError("max_channels must be >= 1")
        if not (0.0 < self.corr_threshold <= 1.0):
            raise RenderError("corr_threshold must be in (0, 1]")


@dataclass
class RenderedPlot:
    """Composite plot: pixels are channel-major (3, H, W), row-major within channel."""

    pixels: np.ndarray
    layout: str
    band_map: dict[int, tuple[int, int]]
    cell_map: dict[int, tuple[int, int, int, int]]  # (top, bottom, left, right)
    palette: list[tuple[float, float, float]]
    plotted_channels: list[int]
    advisories: list[str] = field(default_factory=list)


def make_palette(
    n_colors: int, color_coding: bool = True, stroke: tuple[float, float, float] = _DEFAULT_STROKE
) -> list[tuple[float, float, float]]:
    """Evenly spaced hues (hue i/n, saturation 0.85, value 0.90 in HSV).

    With ``color_coding`` off, every entry is the same fixed stroke color.
    """
    if n_colors < 1:
        raise RenderError("palette needs at least one color")
    if not color_coding:
        return [stroke] * n_colors
    return [colorsys.hsv_to_rgb(i / n_colors, 0.85, 0.90) for i in range(n_colors)]


def select_plot_channels(x: np.ndarray, c_max: int, corr_threshold: float) -> list[int]:
    """Channel down-selection for high-dimensional inputs.

    All channels pass through when C <= c_max. Otherwise a greedy pass over
    channels sorted by variance (descending) keeps a channel iff its max
    absolute Pearson correlation to all kept channels is < corr_threshold;
    correlation with a zero-variance channel is defined as 0. If more than
    c_max survive, the c_max highest-variance survivors win. The result is
    re-sorted ascending by original index.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise RenderError(f"expected (L, C) array, got shape {x.shape}")
    n_channels = x.shape[1]
    if n_channels < 1 or c_max < 1:
        raise RenderError("need at least one channel and c_max >= 1")
    if n_channels <= c_max:
        return list(range(n_channels))

    var = x.var(axis=0)
    order = np.argsort(-var, kind="stable")
    centered = x - x.mean(axis=0, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=0))

    kept: list[int] = []
    for idx in order:
        idx = int(idx)
        ok = True
        for prev in kept:
            if norms[idx] == 0.0 or norms[prev] == 0.0:
                corr = 0.0
            else:
                corr = float(np.dot(centered[:, idx], centered[:, prev]) / (norms[idx] * norms[prev]))
            if abs(corr) >= corr_threshold:
                ok = False
                break
        if ok:
            kept.append(idx)
    kept = kept[:c_max]  # kept is already in variance-descending order
    return sorted(kept)


def _regions(layout: str, height: int, width: int, n_plot: int) -> list[tuple[int, int, int, int]]:
    """Per-channel (top, bottom, left, right) rects; leftover rows/cols go to the last band."""
    if layout == "horizontal":
        base = height // n_plot
        rects = []
        for i in range(n_plot):
            top = i * base
            bottom = (i + 1) * base if i < n_plot - 1 else height
            rects.append((top, bottom, 0, width))
        return rects
    rows = math.ceil(math.sqrt(n_plot))
    cols = math.ceil(n_plot / rows)
    row_h = height // rows
    col_w = width // cols
    rects = []
    for i in range(n_plot):
        r, c = divmod(i, cols)
        top = r * row_h
        bottom = (r + 1) * row_h if r < rows - 1 else height
        left = c * col_w
        right = (c + 1) * col_w if c < cols - 1 else width
        rects.append((top, bottom, left, right))
    return rects


def _stroke_segment(cov: np.ndarray, x0: float, y0: float, x1: float, y1: float, half: float, antialias: bool):
    """Accumulate (max-combined) coverage of one stroked segment into ``cov``."""
    h, w = cov.shape
    pad = half + 1.0
    cmin = max(0, int(math.floor(min(x0, x1) - pad)))
    cmax = min(w - 1, int(math.ceil(max(x0, x1) + pad)))
    rmin = max(0, int(math.floor(min(y0, y1) - pad)))
    rmax = min(h - 1, int(math.ceil(max(y0, y1) + pad)))
    if cmin > cmax or rmin > rmax:
        return
    rr = np.arange(rmin, rmax + 1, dtype=np.float64)[:, None]
    cc = np.arange(cmin, cmax + 1, dtype=np.float64)[None, :]
    dx = x1 - x0
    dy = y1 - y0
    len2 = dx * dx + dy * dy
    if len2 == 0.0:
        px = cc - x0
        py = rr - y0
        dist = np.hypot(px, py)
    else:
        t = ((cc - x0) * dx + (rr - y0) * dy) / len2
        np.clip(t, 0.0, 1.0, out=t)
        dist = np.hypot(cc - (x0 + t * dx), rr - (y0 + t * dy))
    if antialias:
        c = np.clip(half + 0.5 - dist, 0.0, 1.0)
    else:
        c = (dist <= half).astype(np.float64)
    region = cov[rmin : rmax + 1, cmin : cmax + 1]
    np.maximum(region, c, out=region)


def rasterize(x: np.ndarray, cfg: RenderConfig) -> RenderedPlot:
    """Render a (L, C) window to a composite (3, H, W) line-plot image."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise RenderError(f"expected (L, C) array, got shape {x.shape}")
    length = x.shape[0]
    if length < 2:
        raise RenderError("need at least 2 time steps to draw a line")

    plotted = select_plot_channels(x, cfg.max_channels, cfg.corr_threshold)
    n_plot = len(plotted)
    palette = make_palette(n_plot, color_coding=cfg.color_coding)

    if cfg.layout == "horizontal" and cfg.height // n_plot < _MIN_BAND_PX:
        raise RenderError(
            f"band height {cfg.height // n_plot} px < {_MIN_BAND_PX} px for {n_plot} channels; "
            "reduce plotted channels (max_channels) or increase height"
        )

    rects = _regions(cfg.layout, cfg.height, cfg.width, n_plot)
    advisories = []
    min_band = min(bottom - top for top, bottom, _, _ in rects)
    if min_band < _ADVISORY_BAND_PX:
        advisories.append(f"bands are only {min_band} px tall; consider fewer channels or a larger image")

    bg = np.asarray(cfg.background, dtype=np.float64)
    pixels = np.empty((3, cfg.height, cfg.width), dtype=np.float64)
    pixels[:] = bg[:, None, None]
    half = cfg.line_width / 2.0

    band_map: dict[int, tuple[int, int]] = {}
    cell_map: dict[int, tuple[int, int, int, int]] = {}
    for slot, chan in enumerate(plotted):
        top, bottom, left, right = rects[slot]
        band_map[chan] = (top, bottom)
        cell_map[chan] = (top, bottom, left, right)
        cell_h = bottom - top
        cell_w = right - left
        if cell_h < _MIN_BAND_PX:
            raise RenderError(f"cell height {cell_h} px < {_MIN_BAND_PX} px; increase height")

        vals = x[:, chan]
        vmin = float(vals.min())
        vmax = float(vals.max())
        if vmax > vmin:
            norm = (vals - vmin) / (vmax - vmin)
        else:
            norm = np.full(length, 0.5)
        norm_q = np.rint(norm * _NORM_QUANT) / _NORM_QUANT

        y_lo = _MARGIN_PX
        y_hi = cell_h - _MARGIN_PX  # midline (y_lo + y_hi) / 2 is integral for even heights
        if y_hi < y_lo:
            y_lo = y_hi = cell_h / 2.0
        ys = y_lo + (1.0 - norm_q) * (y_hi - y_lo)
        xs = np.rint(np.arange(length, dtype=np.float64) * (cell_w - 1) / (length - 1))

        cov = np.zeros((cell_h, cell_w), dtype=np.float64)
        for i in range(length - 1):
            _stroke_segment(cov, xs[i], ys[i], xs[i + 1], ys[i + 1], half, cfg.antialias)

        color = np.asarray(palette[slot], dtype=np.float64)
        region = pixels[:, top:bottom, left:right]
        region += cov[None, :, :] * (color - bg)[:, None, None]

    return RenderedPlot(
        pixels=pixels.astype(np.float32),
        layout=cfg.layout,
        band_map=band_map,
        cell_map=cell_map,
        palette=palette,
        plotted_channels=plotted,
        advisories=advisories,
    )


def render_windows(x: np.ndarray, cfg: RenderConfig) -> np.ndarray:
    """Render a batch (B, L, C) to stacked pixel tensors (B, 3, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise RenderError(f"expected (B, L, C) batch, got shape {x.shape}")
    if x.shape[0] == 0:
        return np.empty((0, 3, cfg.height, cfg.width), dtype=np.float32)
    return np.stack([rasterize(x[b], cfg).pixels for b in range(x.shape[0])])


def to_uint8(plot: RenderedPlot) -> np.ndarray:
    """(H, W, 3) uint8 view of the pixels for image export."""
    arr = np.clip(plot.pixels, 0.0, 1.0)
    return np.rint(np.moveaxis(arr, 0, -1) * 255.0).astype(np.uint8)


def write_png(plot: RenderedPlot, path) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(plot), mode="RGB").save(path, format="PNG")
