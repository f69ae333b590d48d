import colorsys

import numpy as np
import pytest

from plotfuse.rasterizer import (
    RenderConfig,
    RenderError,
    make_palette,
    rasterize,
    select_plot_channels,
    to_uint8,
)


def random_window(rng, length=48, channels=2):
    return rng.normal(size=(length, channels))


# -- palette --------------------------------------------------------------------


def test_palette_single_color_hue_zero():
    assert make_palette(1) == [colorsys.hsv_to_rgb(0.0, 0.85, 0.90)]


def test_palette_four_evenly_spaced_distinct():
    colors = make_palette(4)
    expected = [colorsys.hsv_to_rgb(h, 0.85, 0.90) for h in (0.0, 0.25, 0.5, 0.75)]
    assert colors == expected
    assert len(set(colors)) == 4


def test_palette_color_coding_off_identical():
    colors = make_palette(3, color_coding=False)
    assert len(set(colors)) == 1


# -- channel selection --------------------------------------------------------------


def test_select_all_when_under_budget():
    x = np.random.default_rng(0).normal(size=(64, 3))
    assert select_plot_channels(x, c_max=50, corr_threshold=0.95) == [0, 1, 2]


def test_select_drops_identical_channel():
    rng = np.random.default_rng(1)
    a = rng.normal(size=64)
    x = np.stack([a, a], axis=1)
    assert len(select_plot_channels(x, c_max=1, corr_threshold=0.95)) == 1


def greedy_reference(x, c_max, corr_threshold):
    """Independent re-implementation of the documented greedy rule."""
    n_channels = x.shape[1]
    if n_channels <= c_max:
        return list(range(n_channels))
    var = x.var(axis=0)
    order = sorted(range(n_channels), key=lambda i: -var[i])
    kept = []
    for idx in order:
        ok = True
        for other in kept:
            xi = x[:, idx] - x[:, idx].mean()
            xo = x[:, other] - x[:, other].mean()
            denom = np.sqrt((xi**2).sum() * (xo**2).sum())
            corr = 0.0 if denom == 0 else float((xi * xo).sum() / denom)
            if abs(corr) >= corr_threshold:
                ok = False
        if ok:
            kept.append(idx)
    return sorted(kept[:c_max])


@pytest.mark.parametrize("seed", range(5))
def test_select_matches_reference_on_independent_gaussians(seed):
    rng = np.random.default_rng(seed)
    scales = rng.uniform(0.5, 3.0, size=10)
    x = rng.normal(size=(256, 10)) * scales
    got = select_plot_channels(x, c_max=4, corr_threshold=0.95)
    assert got == greedy_reference(x, 4, 0.95)
    # independent draws rarely correlate: the four largest variances win
    top_var = sorted(sorted(range(10), key=lambda i: -x.var(axis=0)[i])[:4])
    assert got == top_var


def test_zero_variance_channel_is_kept():
    rng = np.random.default_rng(3)
    a = rng.normal(size=64)
    x = np.stack([a, a, np.full(64, 2.5)], axis=1)
    # the duplicate falls to correlation; the constant has corr 0 and fits the budget
    assert select_plot_channels(x, c_max=2, corr_threshold=0.9) == [0, 2]


# -- rasterize ------------------------------------------------------------------


def test_constant_series_single_midline_stroke():
    x = np.full((32, 1), 7.0)
    cfg = RenderConfig(height=224, width=224)
    plot = rasterize(x, cfg)
    bg = np.ones((3,), dtype=np.float32)
    non_bg_rows = {
        r for r in range(224) if not np.array_equal(plot.pixels[:, r, :], np.tile(bg[:, None], (1, 224)))
    }
    assert non_bg_rows == {112}


def test_band_map_two_channels():
    x = np.random.default_rng(0).normal(size=(32, 2))
    plot = rasterize(x, RenderConfig(height=224, width=224))
    assert plot.band_map == {0: (0, 112), 1: (112, 224)}


def test_byte_identical_rerender():
    rng = np.random.default_rng(5)
    x = random_window(rng, channels=3)
    cfg = RenderConfig(height=64, width=64)
    assert rasterize(x, cfg).pixels.tobytes() == rasterize(x, cfg).pixels.tobytes()


@pytest.mark.parametrize("seed", range(8))
def test_vertical_shift_invariance(seed):
    rng = np.random.default_rng(seed)
    x = random_window(rng, channels=4)
    shifts = rng.normal(scale=5.0, size=(1, 4))
    cfg = RenderConfig(height=64, width=64)
    assert rasterize(x, cfg).pixels.tobytes() == rasterize(x + shifts, cfg).pixels.tobytes()


@pytest.mark.parametrize("seed", range(4))
def test_channel_swap_band_covariance(seed):
    rng = np.random.default_rng(seed)
    x = random_window(rng, channels=4)
    cfg = RenderConfig(height=64, width=64, color_coding=False)
    base = rasterize(x, cfg)
    swapped_x = x[:, [1, 0, 2, 3]]
    swapped = rasterize(swapped_x, cfg)
    (top0, bot0), (top1, bot1) = base.band_map[0], base.band_map[1]
    assert np.array_equal(base.pixels[:, top0:bot0], swapped.pixels[:, top1:bot1])
    assert np.array_equal(base.pixels[:, top1:bot1], swapped.pixels[:, top0:bot0])
    assert np.array_equal(base.pixels[:, bot1:], swapped.pixels[:, bot1:])


def test_stroke_pixels_are_convex_blends():
    rng = np.random.default_rng(7)
    x = random_window(rng, channels=2)
    cfg = RenderConfig(height=64, width=64)
    plot = rasterize(x, cfg)
    bg = np.ones(3)
    for chan, (top, bottom) in plot.band_map.items():
        color = np.asarray(plot.palette[plot.plotted_channels.index(chan)])
        band = plot.pixels[:, top:bottom, :].reshape(3, -1).T
        diffs = color - bg
        for px in band:
            ts = [(px[i] - bg[i]) / diffs[i] for i in range(3) if abs(diffs[i]) > 1e-9]
            assert ts, "palette color equals background"
            t0 = ts[0]
            assert -1e-5 <= t0 <= 1 + 1e-5
            assert all(abs(t - t0) < 1e-5 for t in ts[1:])


def test_grid_matches_horizontal_when_cells_align():
    rng = np.random.default_rng(11)
    x = random_window(rng, length=40, channels=2)
    horizontal = rasterize(x, RenderConfig(height=64, width=128, layout="horizontal"))
    grid = rasterize(x, RenderConfig(height=64, width=128, layout="grid"))
    # C=2: the grid is 2x1 with 32x128 cells, exactly the horizontal bands
    assert np.array_equal(horizontal.pixels, grid.pixels)
    assert grid.cell_map[0] == (0, 32, 0, 128)


def test_grid_layout_cells_tile():
    rng = np.random.default_rng(13)
    x = random_window(rng, channels=5)
    plot = rasterize(x, RenderConfig(height=66, width=66, layout="grid"))
    # 5 channels -> 3x2 grid, last row/col absorb the leftovers
    rects = [plot.cell_map[c] for c in plot.plotted_channels]
    assert rects[0] == (0, 22, 0, 33)
    assert all(bottom <= 66 and right <= 66 for _, bottom, _, right in rects)


def test_band_too_small_raises():
    x = np.random.default_rng(0).normal(size=(16, 3))
    with pytest.raises(RenderError, match="band height"):
        rasterize(x, RenderConfig(height=8, width=32))


def test_small_band_advisory():
    x = np.random.default_rng(0).normal(size=(16, 4))
    plot = rasterize(x, RenderConfig(height=24, width=32))
    assert plot.advisories


def test_single_step_series_rejected():
    with pytest.raises(RenderError, match="2 time steps"):
        rasterize(np.ones((1, 1)), RenderConfig(height=32, width=32))


def test_uint8_export_shape():
    x = np.random.default_rng(1).normal(size=(16, 2))
    img = to_uint8(rasterize(x, RenderConfig(height=32, width=48)))
    assert img.shape == (32, 48, 3) and img.dtype == np.uint8
