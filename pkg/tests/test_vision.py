import numpy as np
import pytest
import torch
from torch import nn

from conftest import finite_diff_check
from plotfuse.archive import ArchiveError, load_module_archive, save_module_archive
from plotfuse.tokenizer import ContractViolation
from plotfuse.vision import (
    ConvPyramidEncoder,
    PlotProjection,
    ViTEncoder,
    VisionConfigError,
    VisionEncoderSpec,
    build_vision_encoder,
    cell_index,
    grid_cell,
    plot_projection,
)


def vit_spec(**kw):
    base = dict(kind="vit", pixel_patch=16, width=32, depth=1, heads=2)
    base.update(kw)
    return VisionEncoderSpec(**base)


@pytest.mark.parametrize("patch,expected_cells", [(16, 196), (14, 256)])
def test_patch_grid_counts(patch, expected_cells):
    enc = ViTEncoder(vit_spec(pixel_patch=patch, depth=0), height=224, width=224)
    grid = enc(torch.rand(1, 3, 224, 224))
    assert grid.rows == grid.cols == 224 // patch
    assert grid.tokens.shape == (1, expected_cells, 32)


def test_identical_images_identical_rows():
    torch.manual_seed(0)
    enc = ViTEncoder(vit_spec(pixel_patch=8), height=32, width=32)
    img = torch.rand(1, 3, 32, 32)
    grid = enc(torch.cat([img, img], dim=0))
    assert torch.equal(grid.tokens[0], grid.tokens[1])


def test_divisibility_checked_at_construction():
    with pytest.raises(VisionConfigError, match="not divisible"):
        ViTEncoder(vit_spec(pixel_patch=10), height=32, width=32)


def test_grid_bijection_exhaustive():
    for rows in range(1, 33):
        for cols in range(1, 33):
            for n in range(rows * cols):
                r, c = grid_cell(n, cols)
                assert 0 <= r < rows and 0 <= c < cols
                assert cell_index(r, c, cols) == n


def test_conv_encoder_same_contract():
    torch.manual_seed(0)
    enc = ConvPyramidEncoder(vit_spec(kind="conv", pixel_patch=8), height=32, width=64)
    grid = enc(torch.rand(2, 3, 32, 64))
    assert (grid.rows, grid.cols) == (4, 8)
    assert grid.tokens.shape == (2, 32, 32)


def test_conv_encoder_requires_power_of_two_patch():
    with pytest.raises(VisionConfigError, match="power-of-two"):
        ConvPyramidEncoder(vit_spec(kind="conv", pixel_patch=12), height=24, width=24)


def test_frozen_encoder_has_no_grads():
    enc = build_vision_encoder(vit_spec(frozen=True, pixel_patch=8), 32, 32)
    assert all(not p.requires_grad for p in enc.parameters())


# -- plot projection ----------------------------------------------------------------


def test_plot_projection_zero_map():
    torch.manual_seed(0)
    enc = ViTEncoder(vit_spec(pixel_patch=8), 32, 32)
    grid = enc(torch.rand(1, 3, 32, 32))
    proj = PlotProjection(32, 16)
    nn.init.zeros_(proj.proj.weight)
    nn.init.zeros_(proj.proj.bias)
    seq = plot_projection(grid, proj)
    assert torch.all(seq.tokens == 0)
    assert seq.grid == (4, 4) and seq.modality == "visual"


def test_plot_projection_identity_passthrough():
    torch.manual_seed(1)
    enc = ViTEncoder(vit_spec(pixel_patch=8), 32, 32)
    grid = enc(torch.rand(1, 3, 32, 32))
    proj = PlotProjection(32, 32)
    with torch.no_grad():
        proj.proj.weight.copy_(torch.eye(32))
        proj.proj.bias.zero_()
    assert torch.equal(plot_projection(grid, proj).tokens, grid.tokens)


def test_plot_projection_width_mismatch():
    torch.manual_seed(2)
    enc = ViTEncoder(vit_spec(pixel_patch=8), 32, 32)
    grid = enc(torch.rand(1, 3, 32, 32))
    with pytest.raises(ContractViolation):
        plot_projection(grid, PlotProjection(16, 8))


def test_plot_projection_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    proj = PlotProjection(6, 4).double()
    tokens = torch.from_numpy(rng.normal(size=(2, 12, 6)))

    class FakeGrid:
        pass

    grid = FakeGrid()
    grid.tokens = tokens
    grid.rows, grid.cols = 3, 4

    def loss_fn():
        return plot_projection(grid, proj).tokens.mean()

    finite_diff_check(loss_fn, list(proj.parameters()), rng=rng)


# -- weight archive -------------------------------------------------------------------


def probe(module, img):
    return module(img).tokens


def test_archive_round_trip_and_probe(tmp_path):
    torch.manual_seed(3)
    enc = ViTEncoder(vit_spec(pixel_patch=8), 32, 32)
    probe_img = torch.rand(1, 3, 32, 32)
    path = tmp_path / "enc.npz"
    save_module_archive(path, enc, probe_img, probe, meta={"note": "test"})

    torch.manual_seed(99)  # fresh, different random weights
    fresh = ViTEncoder(vit_spec(pixel_patch=8), 32, 32)
    assert not torch.equal(fresh(probe_img).tokens, enc(probe_img).tokens)
    meta = load_module_archive(path, fresh, probe)
    assert meta == {"note": "test"}
    assert torch.equal(fresh(probe_img).tokens, enc(probe_img).tokens)


def test_archive_rejects_mismatched_weights(tmp_path):
    torch.manual_seed(4)
    enc = ViTEncoder(vit_spec(pixel_patch=8), 32, 32)
    probe_img = torch.rand(1, 3, 32, 32)
    path = tmp_path / "enc.npz"
    save_module_archive(path, enc, probe_img, probe)

    def corrupting_probe(module, img):
        return module(img).tokens + 1.0

    torch.manual_seed(5)
    fresh = ViTEncoder(vit_spec(pixel_patch=8), 32, 32)
    with pytest.raises(ArchiveError, match="probe mismatch"):
        load_module_archive(path, fresh, corrupting_probe)


def test_external_archive_via_build(tmp_path):
    torch.manual_seed(6)
    enc = ViTEncoder(vit_spec(pixel_patch=8), 32, 32)
    path = tmp_path / "enc.npz"
    save_module_archive(path, enc, torch.rand(1, 3, 32, 32), probe)
    loaded = build_vision_encoder(
        vit_spec(pixel_patch=8, weights_source="external_archive", archive_path=str(path)), 32, 32
    )
    img = torch.rand(2, 3, 32, 32)
    assert torch.equal(loaded(img).tokens, enc(img).tokens)
