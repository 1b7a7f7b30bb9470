"""Training objective shared by all tasks.

Removal samples get a box-masked multi-scale L1 plus a perceptual/style
feature loss; segmentation-style samples get a multi-scale smooth L1. All L1
norms are mean-reduced so the scale weights mean the same thing at every
resolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import TaskId


@dataclass(frozen=True)
class LossConfig:
    alpha: tuple = (5.0, 6.0, 10.0)  # scales (1/4, 1/2, 1)
    beta: tuple = (0.8, 1.0, 2.0)
    per_weight: float = 0.01
    sty_weight: float = 120.0
    smooth_delta: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.alpha) != 3 or len(self.beta) != 3:
            raise ValueError("alpha and beta need exactly three scale weights")
        weights = self.alpha + self.beta + (self.per_weight, self.sty_weight, self.smooth_delta)
        if min(weights) <= 0:
            raise ValueError("all loss weights must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)


def _check_scales(outs, gts, what="targets"):
    if len(outs) != 3 or len(gts) != 3:
        raise ValueError("expected predictions and targets at three scales")
    for o, g in zip(outs, gts):
        if o.shape != g.shape:
            raise ValueError(f"prediction {tuple(o.shape)} does not match {what} {tuple(g.shape)}")


def image_pyramid(img: torch.Tensor) -> list:
    """(B, C, H, W) -> [1/4, 1/2, 1] by area averaging."""
    return [F.avg_pool2d(img, 4), F.avg_pool2d(img, 2), img]


def mask_pyramid(mask: torch.Tensor) -> list:
    """Binary (B, 1, H, W) mask -> [1/4, 1/2, 1] by nearest-neighbour sampling."""
    return [mask[..., ::4, ::4], mask[..., ::2, ::2], mask]


def pixel_loss_removal(outs, gts, masks, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    _check_scales(outs, gts)
    if len(masks) != 3:
        raise ValueError("expected masks at three scales")
    total = 0.0
    for a, b, o, g, m in zip(cfg.alpha, cfg.beta, outs, gts, masks):
        if m.shape[-2:] != o.shape[-2:]:
            raise ValueError(f"mask {tuple(m.shape)} does not match prediction {tuple(o.shape)}")
        err = (o - g).abs()
        total = total + a * (err * m).mean() + b * (err * (1 - m)).mean()
    return total


def pixel_loss_seg(outs, gts, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    _check_scales(outs, gts)
    return sum(a * F.smooth_l1_loss(o, g, beta=cfg.smooth_delta) for a, o, g in zip(cfg.alpha, outs, gts))


def composite_image(out: torch.Tensor, inp: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Prediction inside the text boxes, input everywhere else."""
    return out * mask + inp * (1 - mask)


def gram(feat: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, C, C), normalized by H*W*C."""
    b, c, h, w = feat.shape
    f = feat.reshape(b, c, h * w)
    return f @ f.transpose(1, 2) / (h * w * c)


class FeatureExtractor(nn.Module):
    """Frozen VGG-shaped conv stack (2+2+3 convs, three max-pools; ten layers).

    The three pooled outputs are the loss taps. Weights are either drawn from a
    seeded generator or loaded from a torchvision VGG-16 ``state_dict`` file.
    """

    layout = (2, 2, 3)
    imagenet_mean = (0.485, 0.456, 0.406)
    imagenet_std = (0.229, 0.224, 0.225)

    def __init__(self, widths=(32, 64, 128), seed: int = 1234, normalize: bool = False):
        super().__init__()
        self.widths = tuple(widths)
        self.normalize = normalize
        convs, cin = [], 3
        for n, width in zip(self.layout, self.widths):
            for _ in range(n):
                convs.append(nn.Conv2d(cin, width, 3, padding=1))
                cin = width
        self.convs = nn.ModuleList(convs)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
        self.register_buffer("mean", torch.tensor(self.imagenet_mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self.imagenet_std).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    @classmethod
    def from_vgg16(cls, path) -> "FeatureExtractor":
        """Load the first three VGG-16 blocks from a torchvision weights file."""
        state = torch.load(path, map_location="cpu", weights_only=True)
        ext = cls(widths=(64, 128, 256), normalize=True)
        # torchvision indices of the convs inside vgg16.features
        idx = (0, 2, 5, 7, 10, 12, 14)
        with torch.no_grad():
            for conv, i in zip(ext.convs, idx):
                conv.weight.copy_(state[f"features.{i}.weight"])
                conv.bias.copy_(state[f"features.{i}.bias"])
        return ext

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list:
        if self.normalize:
            x = (x - self.mean.to(x)) / self.std.to(x)
        taps, k = [], 0
        for n in self.layout:
            for _ in range(n):
                x = F.relu(self.convs[k](x))
                k += 1
            # ceil mode keeps tiny (e.g. 4x4) inputs valid; identical to floor mode for sizes divisible by 8
            x = F.max_pool2d(x, 2, ceil_mode=True)
            taps.append(x)
        return taps

    @torch.no_grad()
    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled last tap, used as an image embedding."""
        return self.forward(x)[-1].mean(dim=(2, 3))


def feature_loss(out, out_star, gt, extractor, cfg: LossConfig = LossConfig(), parts: bool = False):
    """Weighted perceptual + style loss over the extractor's three taps."""
    f_out, f_star, f_gt = extractor(out), extractor(out_star), extractor(gt)
    if not (len(f_out) == len(f_star) == len(f_gt) == 3):
        raise ValueError(f"feature extractor must expose 3 feature maps, got {len(f_out)}")
    l_per = sum((a - g).abs().mean() + (s - g).abs().mean() for a, s, g in zip(f_out, f_star, f_gt))
    l_sty = sum(
        (gram(a) - gram(g)).abs().mean() + (gram(s) - gram(g)).abs().mean()
        for a, s, g in zip(f_out, f_star, f_gt)
    )
    total = cfg.per_weight * l_per + cfg.sty_weight * l_sty
    return (total, l_per, l_sty) if parts else total


def total_loss(task, inp, target, outs, cfg: LossConfig = LossConfig(), mask=None, extractor=None):
    """Loss for a batch of samples that all belong to ``task``.

    ``outs`` are the three-scale predictions (1/4, 1/2, 1). Returns the
    scalar total and a breakdown dict of floats.
    """
    task = TaskId.parse(task)
    gts = image_pyramid(target)
    if task is TaskId.REMOVAL:
        if mask is None:
            raise ValueError("removal samples need a text box mask")
        if extractor is None:
            raise ValueError("removal samples need a feature extractor")
        l_pix = pixel_loss_removal(outs, gts, mask_pyramid(mask), cfg)
        out_star = composite_image(outs[-1], inp, mask)
        l_feat, l_per, l_sty = feature_loss(outs[-1], out_star, target, extractor, cfg, parts=True)
        total = l_pix + l_feat
        breakdown = {"l_pix": l_pix.item(), "l_per": l_per.item(), "l_sty": l_sty.item(),
                     "l_feat": l_feat.item(), "l_total": total.item()}
    else:
        total = pixel_loss_seg(outs, gts, cfg)
        breakdown = {"l_pix": total.item(), "l_total": total.item()}
    return total, breakdown
