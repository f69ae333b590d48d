"""plotfuse: multimodal time-series analysis via rasterized line plots.

Multivariate windows are rendered as composite color-coded line plots, encoded
with a frozen vision encoder, temporally aligned with patch tokens of the raw
series, fused, and run through a selectively fine-tuned sequence backbone with
task heads for classification, anomaly detection, and forecasting.
"""

__version__ = "0.1.0"

from . import align_fuse, backbone, data, evaluation, heads, pipeline, rasterizer, tokenizer, training, vision

__all__ = [
    "align_fuse",
    "backbone",
    "data",
    "evaluation",
    "heads",
    "pipeline",
    "rasterizer",
    "tokenizer",
    "training",
    "vision",
    "__version__",
]
