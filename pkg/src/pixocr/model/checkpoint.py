"""Weight initialization and the checkpoint file format.

A checkpoint is a torch archive holding ``{"header": <json str>, "params":
state_dict, "optimizer": optional state}``. The header carries the model
config and whatever run metadata the caller adds (loss config, schedule
state, train config).
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .config import ModelConfig
from .layers import PatchEmbed, PatchSplit
from .network import PixelOCRNet

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def random_init(model: nn.Module, seed: int = 0) -> nn.Module:
    """Truncated-normal (std 0.02) linear weights, zero biases, zero prompts.

    Patch embedding/splitting projections sit on the un-normalized main path,
    so they get a fan-in scaled (Xavier) init instead; 0.02 there shrinks the
    decoder activations below the LayerNorm epsilon within a few stages.
    Output heads start near zero (std 1e-3) so early steps are not spent
    undoing a large random image. Other convs draw uniform(+-1/sqrt(fan_in)).
    Everything comes from one seeded generator, so a seed fully determines
    the parameters.
    """
    gen = torch.Generator().manual_seed(seed)
    resample = {id(m.proj) for m in model.modules() if isinstance(m, (PatchEmbed, PatchSplit))}
    heads = {id(m) for m in model.head.values()} if isinstance(model, PixelOCRNet) else set()
    with torch.no_grad():
        for mod in model.modules():
            if id(mod) in heads:
                w = torch.empty_like(mod.weight)
                _trunc_normal(w, 1e-3, gen)
                mod.weight.copy_(w)
                mod.bias.zero_()
            elif isinstance(mod, nn.Linear) and id(mod) in resample:
                fan_out, fan_in = mod.weight.shape
                bound = (6.0 / (fan_in + fan_out)) ** 0.5
                mod.weight.copy_(torch.rand(mod.weight.shape, generator=gen, dtype=mod.weight.dtype) * 2 * bound - bound)
                mod.bias.zero_()
            elif isinstance(mod, nn.Linear):
                w = torch.empty_like(mod.weight)
                _trunc_normal(w, 0.02, gen)
                mod.weight.copy_(w)
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.Conv2d):
                fan_in = mod.weight[0].numel()
                bound = 1.0 / fan_in ** 0.5
                mod.weight.copy_(torch.rand(mod.weight.shape, generator=gen, dtype=mod.weight.dtype) * 2 * bound - bound)
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
        for name, p in model.named_parameters():
            if name.startswith("prompts.") and not name.startswith("prompts.site_proj"):
                p.zero_()
            elif name.endswith("rel_bias"):
                p.zero_()
    return model


def _trunc_normal(t: torch.Tensor, std: float, gen: torch.Generator) -> None:
    vals = torch.randn(t.shape, generator=gen, dtype=t.dtype) * std
    # resample anything beyond two standard deviations
    bad = vals.abs() > 2 * std
    while bad.any():
        vals[bad] = torch.randn(int(bad.sum()), generator=gen, dtype=t.dtype) * std
        bad = vals.abs() > 2 * std
    t.copy_(vals)


def build_model(cfg: ModelConfig, seed: int = 0) -> PixelOCRNet:
    torch.manual_seed(seed)
    return random_init(PixelOCRNet(cfg), seed)


def save_checkpoint(path, model: PixelOCRNet, header: dict | None = None, optimizer=None) -> None:
    """Write atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = {"format": FORMAT_VERSION, "model": model.cfg.to_dict()}
    head.update(header or {})
    payload = {"header": json.dumps(head, sort_keys=True), "params": model.state_dict()}
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    payload["header"] = json.loads(payload["header"])
    return payload


@dataclass
class LoadReport:
    loaded: list = field(default_factory=list)
    missing: list = field(default_factory=list)  # left at their random init
    unexpected: list = field(default_factory=list)

    def summary(self) -> str:
        return (f"loaded {len(self.loaded)} tensors, {len(self.missing)} randomly initialized, "
                f"{len(self.unexpected)} ignored")


def load_params(model: nn.Module, params: dict, strict: bool = True) -> LoadReport:
    """Copy named tensors into ``model``.

    Shape mismatches always fail and list every offending tensor. With
    ``strict`` the name sets must match exactly; otherwise tensors absent from
    ``params`` keep their current (random) values and are reported.
    """
    own = model.state_dict()
    bad = [f"{k}: checkpoint {tuple(v.shape)} vs model {tuple(own[k].shape)}"
           for k, v in params.items() if k in own and own[k].shape != v.shape]
    if bad:
        raise CheckpointError("parameter shape mismatch:\n  " + "\n  ".join(bad))
    report = LoadReport(
        loaded=sorted(k for k in params if k in own),
        missing=sorted(k for k in own if k not in params),
        unexpected=sorted(k for k in params if k not in own),
    )
    if strict and (report.missing or report.unexpected):
        raise CheckpointError(
            f"checkpoint does not match model: missing {report.missing[:10]}, unexpected {report.unexpected[:10]}"
        )
    model.load_state_dict({k: params[k] for k in report.loaded}, strict=False)
    return report


def load_model(path, strict: bool = True) -> tuple[PixelOCRNet, dict]:
    payload = read_checkpoint(path)
    cfg = ModelConfig.from_dict(payload["header"]["model"])
    model = PixelOCRNet(cfg)
    load_params(model, payload["params"], strict=strict)
    return model, payload["header"]
