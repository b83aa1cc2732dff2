"""Desk-scale sparse masked autoencoder: config, data, model and trainer."""
from .config import ConfigError, PipelineConfig, StageConfig, tiny_config, toy_config
from .data import FixedData, SyntheticData, synthetic_image
from .model import (
    DecodeState,
    ForwardResult,
    Model,
    Queries,
    StageOutput,
    decode,
    deep_sup_heads,
    encode,
    forward,
    mae_loss,
    masked_queries,
    patch_targets,
    patchify,
    stage_features,
    unpatchify,
)
