"""Encoder-decoder with lateral connections, multi-scale heads and task prompts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from ..codec import TaskId, task_names
from .config import ModelConfig, StageSpec
from .layers import LateralFuse, PatchEmbed, PatchSplit, WindowBlock


@dataclass
class FeatureBundle:
    enc_feats: list
    shared_feat: torch.Tensor
    injected_feat: torch.Tensor
    dec_feats: list


@dataclass
class ModelOutput:
    out_full: torch.Tensor
    out_half: torch.Tensor
    out_quarter: torch.Tensor
    features: Optional[FeatureBundle] = None

    def scales(self) -> list:
        """Predictions ordered (1/4, 1/2, 1)."""
        return [self.out_quarter, self.out_half, self.out_full]


class PromptBank(nn.Module):
    """One learnable vector per task, plus optional per-block projections used
    when prompts are also added after encoder/decoder blocks."""

    def __init__(self, count: int, dim: int, site_dims: Optional[dict] = None):
        super().__init__()
        self.names = task_names() if count == len(TaskId) else [f"task{i}" for i in range(count)]
        self.dim = dim
        for name in self.names:
            self.register_parameter(name, nn.Parameter(torch.zeros(dim)))
        self.site_proj = nn.ModuleDict({k: nn.Linear(dim, d) for k, d in (site_dims or {}).items()})

    @property
    def matrix(self) -> torch.Tensor:
        return torch.stack([getattr(self, n) for n in self.names])

    def select(self, task) -> torch.Tensor:
        """(B,) task indices (or a single index) -> (B, C) prompt vectors."""
        idx = _task_index(task, len(self.names))
        return self.matrix[idx.to(self.matrix.device)]


def _task_index(task, count: int) -> torch.Tensor:
    if isinstance(task, torch.Tensor):
        idx = task.long().reshape(-1)
    elif isinstance(task, (list, tuple)):
        idx = torch.tensor([int(TaskId.parse(t)) if count == len(TaskId) else int(t) for t in task])
    else:
        idx = torch.tensor([int(TaskId.parse(task)) if count == len(TaskId) else int(task)])
    if idx.numel() and (idx.min() < 0 or idx.max() >= count):
        raise ValueError(f"task index out of range for {count} prompts: {idx.tolist()}")
    return idx


def inject_prompt(shared_feat: torch.Tensor, bank: PromptBank, task) -> torch.Tensor:
    """Add the selected prompt to every spatial position of a (B, h, w, C) feature."""
    if shared_feat.shape[-1] != bank.dim:
        raise ValueError(f"feature width {shared_feat.shape[-1]} != prompt dim {bank.dim}")
    p = bank.select(task)
    if p.shape[0] == 1 and shared_feat.shape[0] != 1:
        p = p.expand(shared_feat.shape[0], -1)
    return shared_feat + p[:, None, None, :].to(shared_feat.dtype)


def _site_key(site: str, stage: int, block: int) -> str:
    return f"{site[:3]}{stage + 1}_block{block + 1}"


class EncoderStage(nn.Module):
    def __init__(self, in_dim: int, spec: StageSpec, mlp_ratio: float):
        super().__init__()
        self.embed = PatchEmbed(in_dim, spec.out_dim, spec.resample_ratio)
        self.depth = spec.depth
        for j in range(spec.depth):
            self.add_module(f"block{j + 1}", WindowBlock(spec.dim, spec.heads, spec.window, j % 2 == 1, mlp_ratio))

    def forward(self, x, offsets=None):
        x = self.embed(x)
        for j in range(self.depth):
            x = getattr(self, f"block{j + 1}")(x)
            if offsets is not None:
                x = x + offsets[j]
        return x


class DecoderStage(nn.Module):
    def __init__(self, spec: StageSpec, mlp_ratio: float, lateral: bool):
        super().__init__()
        self.depth = spec.depth
        for j in range(spec.depth):
            self.add_module(f"block{j + 1}", WindowBlock(spec.dim, spec.heads, spec.window, j % 2 == 1, mlp_ratio))
        self.split = PatchSplit(spec.dim, spec.out_dim, spec.resample_ratio)
        self.lateral = LateralFuse(spec.out_dim) if lateral else None

    def forward(self, x, skip=None, offsets=None):
        for j in range(self.depth):
            x = getattr(self, f"block{j + 1}")(x)
            if offsets is not None:
                x = x + offsets[j]
        x = self.split(x)
        if self.lateral is not None:
            x = self.lateral(skip, x)
        return x


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        in_dim = cfg.in_channels
        for i, spec in enumerate(cfg.encoder_stages):
            self.add_module(f"stage{i + 1}", EncoderStage(in_dim, spec, cfg.mlp_ratio))
            in_dim = spec.out_dim


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        for i, spec in enumerate(cfg.decoder_stages):
            self.add_module(f"stage{i + 1}", DecoderStage(spec, cfg.mlp_ratio, lateral=i < 3))


def _heads(cfg: ModelConfig) -> nn.ModuleDict:
    k = cfg.head_kernel
    dec = cfg.decoder_stages
    heads = nn.ModuleDict()
    # "half" shadows nn.Module.half, which add_module refuses; register directly
    heads._modules["quarter"] = nn.Conv2d(dec[2].out_dim, 3, k, padding=k // 2)
    heads._modules["half"] = nn.Conv2d(dec[3].out_dim, 3, k, padding=k // 2)
    heads._modules["full"] = nn.Conv2d(dec[4].out_dim, 3, k, padding=k // 2)
    return heads


class PixelOCRNet(nn.Module):
    """Image-to-image network shared by all tasks; the task is selected by prompt."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        site_dims = {}
        for site, stages in (("encoder", cfg.encoder_stages), ("decoder", cfg.decoder_stages)):
            if site in cfg.prompt_sites:
                site_dims.update({_site_key(site, i, j): s.dim
                                  for i, s in enumerate(stages) for j in range(s.depth)})
        self.encoder = Encoder(cfg)
        self.prompts = PromptBank(cfg.prompt_count, cfg.prompt_dim, site_dims)
        self.decoder = Decoder(cfg)
        self.head = _heads(cfg)

    def _site_offsets(self, site: str, stage: int, depth: int, prompt: torch.Tensor):
        """Per-block (B, 1, 1, C) prompt offsets for one stage, or None."""
        if site not in self.cfg.prompt_sites:
            return None
        return [self.prompts.site_proj[_site_key(site, stage, j)](prompt)[:, None, None, :] for j in range(depth)]

    def forward(self, image: torch.Tensor, task, return_features: bool = False) -> ModelOutput:
        """``image`` is (B, 3, H, W) in [0, 1]; ``task`` one id or a (B,) tensor of ids."""
        if image.ndim != 4 or image.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, H, W) input, got {tuple(image.shape)}")
        b, _, h, w = image.shape
        m = self.cfg.size_multiple
        if h % m or w % m:
            raise ValueError(f"input size {h}x{w} is not divisible by {m}")
        prompt = self.prompts.select(task)
        if prompt.shape[0] == 1 and b != 1:
            prompt = prompt.expand(b, -1)
        elif prompt.shape[0] != b:
            raise ValueError(f"got {prompt.shape[0]} task ids for a batch of {b}")
        sites = self.cfg.prompt_sites

        x = image.permute(0, 2, 3, 1)
        enc_feats = []
        for i, spec in enumerate(self.cfg.encoder_stages):
            x = getattr(self.encoder, f"stage{i + 1}")(x, self._site_offsets("encoder", i, spec.depth, prompt))
            enc_feats.append(x)
        shared = enc_feats[-1]
        injected = shared + prompt[:, None, None, :].to(shared.dtype) if "shared" in sites else shared

        y = injected
        dec_feats = []
        for i, spec in enumerate(self.cfg.decoder_stages):
            skip = enc_feats[2 - i] if i < 3 else None
            y = getattr(self.decoder, f"stage{i + 1}")(y, skip, self._site_offsets("decoder", i, spec.depth, prompt))
            dec_feats.append(y)

        to_nchw = lambda t: t.permute(0, 3, 1, 2)
        out = ModelOutput(
            out_full=self.head["full"](to_nchw(dec_feats[4])),
            out_half=self.head["half"](to_nchw(dec_feats[3])),
            out_quarter=self.head["quarter"](to_nchw(dec_feats[2])),
        )
        if return_features:
            out.features = FeatureBundle(enc_feats, shared, injected, dec_feats)
        return out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
