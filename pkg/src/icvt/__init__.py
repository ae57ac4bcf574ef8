"""Image-conditioned layout generation with a conditional VAE transformer."""

from .config import ModelConfig, TrainConfig, load_config
from .layout import Layout, LayoutElement, detokenize, tokenize
from .metrics import MetricReport, evaluate
from .model import ICVT
from .synthetic import GenConfig, Sample, generate_sample, read_dataset, write_dataset

__all__ = [
    "ICVT", "GenConfig", "Layout", "LayoutElement", "MetricReport", "ModelConfig", "Sample", "TrainConfig",
    "detokenize", "evaluate", "generate_sample", "load_config", "read_dataset", "tokenize", "write_dataset",
]
