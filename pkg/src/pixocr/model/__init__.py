from .checkpoint import (
    CheckpointError,
    LoadReport,
    build_model,
    load_model,
    load_params,
    random_init,
    read_checkpoint,
    save_checkpoint,
)
from .config import PRESETS, ModelConfig, StageSpec, preset, small_config, toy_config
from .layers import LateralFuse, PatchEmbed, PatchSplit, WindowAttention, WindowBlock
from .network import FeatureBundle, ModelOutput, PixelOCRNet, PromptBank, count_parameters, inject_prompt
