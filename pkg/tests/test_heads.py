import math

import numpy as np
import pytest
import torch
from torch import nn
from torch.nn import functional as F

from conftest import finite_diff_check, tiny_pipeline_config
from plotfuse.heads import (
    ClassificationHead,
    ForecastHead,
    HeadConfigError,
    ReconstructionHead,
    TaskConfig,
    anomaly_score,
    loss_cls,
    loss_recon,
    merge_window_scores,
)
from plotfuse.pipeline import build_model
from plotfuse.tokenizer import revin_fit_transform
from plotfuse.training import set_seed


def test_task_config_validation():
    with pytest.raises(HeadConfigError):
        TaskConfig(task="classification", num_classes=1)
    with pytest.raises(HeadConfigError):
        TaskConfig(task="forecasting", horizon=0)


# -- classification ----------------------------------------------------------------


def test_classify_zero_map_uniform_softmax():
    head = ClassificationHead(width=8, num_classes=3)
    nn.init.zeros_(head.proj.weight)
    nn.init.constant_(head.proj.bias, 0.7)
    logits = head(torch.randn(4, 6, 8))
    assert torch.all(logits == 0.7)
    probs = logits.softmax(dim=-1)
    assert torch.allclose(probs, torch.full_like(probs, 1 / 3))


def test_classify_mean_pool_of_identical_tokens():
    torch.manual_seed(0)
    head = ClassificationHead(width=8, num_classes=2, pooling="mean")
    token = torch.randn(1, 1, 8)
    repeated = token.expand(1, 5, 8)
    assert torch.allclose(head(repeated), head(token))


def test_classify_gradient_finite_differences():
    rng = np.random.default_rng(2)
    torch.manual_seed(2)
    head = ClassificationHead(width=6, num_classes=3).double()
    hidden = torch.from_numpy(rng.normal(size=(4, 5, 6)))
    labels = torch.tensor([0, 1, 2, 1])

    def loss_fn():
        return loss_cls(head(hidden), labels)

    finite_diff_check(loss_fn, list(head.parameters()), rng=rng)


# -- anomaly reconstruction -----------------------------------------------------------


def test_anomaly_head_output_shape_for_any_token_count():
    torch.manual_seed(1)
    for num_tokens, length in [(4, 32), (5, 32), (7, 33)]:
        patch_len = math.ceil(length / num_tokens)
        head = ReconstructionHead(width=8, patch_len=patch_len, channels=3, length=length)
        hidden = torch.randn(2, num_tokens, 8)
        x = torch.randn(2, length, 3)
        _, stats = revin_fit_transform(x)
        out = head(hidden, stats)
        assert out.shape == (2, length, 3)


def test_anomaly_head_zero_map_predicts_mean_after_denorm():
    head = ReconstructionHead(width=8, patch_len=8, channels=2, length=32)
    nn.init.zeros_(head.proj.weight)
    nn.init.zeros_(head.proj.bias)
    x = torch.randn(3, 32, 2)
    _, stats = revin_fit_transform(x)
    out = head(torch.randn(3, 4, 8), stats)
    assert torch.allclose(out, stats.mu.expand(-1, 32, -1))


def test_untrained_head_positive_mse():
    torch.manual_seed(3)
    head = ReconstructionHead(width=8, patch_len=8, channels=1, length=16)
    x = torch.randn(2, 16, 1)
    _, stats = revin_fit_transform(x)
    out = head(torch.randn(2, 2, 8), stats)
    assert loss_recon(out, x).item() > 0.0


def test_recon_gradient_finite_differences():
    rng = np.random.default_rng(4)
    torch.manual_seed(4)
    head = ReconstructionHead(width=6, patch_len=4, channels=2, length=8).double()
    hidden = torch.from_numpy(rng.normal(size=(2, 2, 6)))
    x = torch.from_numpy(rng.normal(size=(2, 8, 2)))
    _, stats = revin_fit_transform(x)

    def loss_fn():
        return loss_recon(head(hidden, stats), x)

    finite_diff_check(loss_fn, list(head.parameters()), rng=rng)


# -- forecasting -----------------------------------------------------------------------


def test_forecast_shape():
    torch.manual_seed(5)
    head = ForecastHead(width=8, num_tokens=4, horizon=96, channels=7)
    x = torch.randn(2, 64, 7)
    _, stats = revin_fit_transform(x)
    out = head(torch.randn(14, 4, 8), stats)
    assert out.shape == (2, 96, 7)


def test_forecast_zero_map_predicts_mean():
    head = ForecastHead(width=8, num_tokens=4, horizon=5, channels=2)
    nn.init.zeros_(head.proj.weight)
    nn.init.zeros_(head.proj.bias)
    x = torch.randn(3, 16, 2)
    _, stats = revin_fit_transform(x)
    out = head(torch.randn(6, 4, 8), stats)
    assert torch.allclose(out, stats.mu.expand(-1, 5, -1))


def test_forecast_effective_batch_must_divide():
    head = ForecastHead(width=8, num_tokens=4, horizon=5, channels=3)
    x = torch.randn(2, 16, 3)
    _, stats = revin_fit_transform(x)
    from plotfuse.tokenizer import ContractViolation

    with pytest.raises(ContractViolation):
        head(torch.randn(7, 4, 8), stats)


def test_forecast_gradient_finite_differences():
    rng = np.random.default_rng(6)
    torch.manual_seed(6)
    head = ForecastHead(width=5, num_tokens=3, horizon=4, channels=2).double()
    hidden = torch.from_numpy(rng.normal(size=(4, 3, 5)))
    x = torch.from_numpy(rng.normal(size=(2, 12, 2)))
    _, stats = revin_fit_transform(x)
    target = torch.from_numpy(rng.normal(size=(2, 4, 2)))

    def loss_fn():
        return loss_recon(head(hidden, stats), target)

    finite_diff_check(loss_fn, list(head.parameters()), rng=rng)


def test_forecast_channel_equivariance_vision_disabled():
    set_seed(7)
    model = build_model(tiny_pipeline_config(task="forecasting", channels=3, vision_enabled=False))
    x = torch.randn(2, 32, 3, dtype=torch.float64)
    perm = [2, 0, 1]
    with torch.no_grad():
        base = model(x).forecast
        permuted = model(x[:, :, perm]).forecast
    assert torch.equal(permuted, base[:, :, perm])


# -- losses ------------------------------------------------------------------------------


def test_loss_cls_uniform_two_classes():
    logits = torch.zeros(4, 2)
    labels = torch.tensor([0, 1, 0, 1])
    assert loss_cls(logits, labels).item() == pytest.approx(math.log(2.0), rel=1e-6)


def test_loss_cls_vanishes_with_margin():
    labels = torch.tensor([0])
    losses = [loss_cls(torch.tensor([[m, 0.0]]), labels).item() for m in (1.0, 5.0, 20.0)]
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-8


def test_loss_cls_brute_force_oracle():
    rng = np.random.default_rng(8)
    logits = torch.from_numpy(rng.normal(size=(5, 3)))
    labels = torch.from_numpy(rng.integers(0, 3, size=5))
    expected = 0.0
    for i in range(5):
        row = logits[i].numpy()
        log_probs = row - (np.log(np.sum(np.exp(row - row.max()))) + row.max())
        expected -= log_probs[labels[i]]
    expected /= 5
    assert loss_cls(logits, labels).item() == pytest.approx(expected, rel=1e-12)


def test_loss_cls_label_range_checked():
    with pytest.raises(HeadConfigError):
        loss_cls(torch.zeros(2, 3), torch.tensor([0, 3]))


def test_loss_recon_cases():
    y = torch.randn(3, 4, 2)
    assert loss_recon(y, y).item() == 0.0
    assert loss_recon(y + 1.0, y).item() == pytest.approx(1.0, rel=1e-6)
    rng = np.random.default_rng(9)
    a = torch.from_numpy(rng.normal(size=(3, 4, 2)))
    b = torch.from_numpy(rng.normal(size=(3, 4, 2)))
    brute = float(np.sum((a.numpy() - b.numpy()) ** 2) / a.numel())
    assert loss_recon(a, b).item() == pytest.approx(brute, abs=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(10)
    logits = torch.from_numpy(rng.normal(size=(6, 4)))
    labels = torch.from_numpy(rng.integers(0, 4, size=6))
    shifted = logits + 3.7
    assert torch.equal(logits.argmax(dim=1), shifted.argmax(dim=1))
    assert loss_cls(logits, labels).item() == pytest.approx(loss_cls(shifted, labels).item(), abs=1e-9)


# -- anomaly scores ------------------------------------------------------------------------


def test_anomaly_score_perfect_reconstruction():
    x = torch.randn(2, 10, 3)
    assert torch.all(anomaly_score(x, x.clone()) == 0.0)


def test_anomaly_score_single_channel_spike():
    x = torch.zeros(1, 10, 1)
    x_hat = torch.zeros(1, 10, 1)
    x[0, 4, 0] = 3.0
    scores = anomaly_score(x, x_hat)
    assert scores[0, 4].item() == pytest.approx(9.0)
    assert torch.all(scores[0, :4] == 0.0) and torch.all(scores[0, 5:] == 0.0)


def test_merge_window_scores_averages_overlaps():
    scores = np.array([[1.0, 1.0, 1.0], [3.0, 3.0, 3.0]])
    origins = [("s", 0), ("s", 1)]
    merged = merge_window_scores(scores, origins, series_length=5)
    np.testing.assert_allclose(merged, [1.0, 2.0, 2.0, 3.0, 0.0])
