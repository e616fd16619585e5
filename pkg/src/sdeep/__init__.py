"""Channel-attention time-series classifiers on a small numpy autodiff engine."""

from .data import (
    SITSDataset,
    SITSample,
    SplitSpec,
    SynthSpec,
    default_synth_spec,
    load_sits_csv,
    preprocess,
    synth_generate,
    write_sits_csv,
)
from .evaluation import AttentionReport, MetricsReport, attention_report, evaluate, export_report
from .layers import ConvBlockSpec, channel_attention, conv_temporal, dense
from .model import Model, ModelConfig, build_model, count_params, default_grid, preset
from .tensor import Tensor, backward
from .training import Checkpoint, HyperParams, load_checkpoint, multi_head_loss, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AttentionReport",
    "Checkpoint",
    "ConvBlockSpec",
    "HyperParams",
    "MetricsReport",
    "Model",
    "ModelConfig",
    "SITSDataset",
    "SITSample",
    "SplitSpec",
    "SynthSpec",
    "Tensor",
    "attention_report",
    "backward",
    "build_model",
    "channel_attention",
    "conv_temporal",
    "count_params",
    "default_grid",
    "default_synth_spec",
    "dense",
    "evaluate",
    "export_report",
    "load_checkpoint",
    "load_sits_csv",
    "multi_head_loss",
    "preprocess",
    "preset",
    "save_checkpoint",
    "synth_generate",
    "train",
    "write_sits_csv",
]
