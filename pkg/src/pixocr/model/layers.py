"""Building blocks: patch embedding/splitting, windowed attention, lateral fusion.

Feature maps are channels-last (B, H, W, C) throughout the transformer path.
"""

from __future__ import annotations

import math
from functools import lru_cache

import torch
import torch.nn as nn
import torch.nn.functional as F


class PatchEmbed(nn.Module):
    """Space-to-depth by ``ratio`` followed by a linear map to ``out_dim``."""

    def __init__(self, in_dim: int, out_dim: int, ratio: int):
        super().__init__()
        self.ratio = ratio
        self.proj = nn.Linear(in_dim * ratio * ratio, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        r = self.ratio
        if h % r or w % r:
            raise ValueError(f"patch embedding with ratio {r} needs spatial size divisible by {r}, got {h}x{w}")
        x = x.reshape(b, h // r, r, w // r, r, c).permute(0, 1, 3, 2, 4, 5)
        return self.proj(x.reshape(b, h // r, w // r, r * r * c))


class PatchSplit(nn.Module):
    """Depth-to-space by ``ratio`` followed by a linear map to ``out_dim``."""

    def __init__(self, in_dim: int, out_dim: int, ratio: int):
        super().__init__()
        if in_dim % (ratio * ratio):
            raise ValueError(f"patch splitting needs in_dim {in_dim} divisible by {ratio}^2")
        self.ratio = ratio
        self.proj = nn.Linear(in_dim // (ratio * ratio), out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        r = self.ratio
        if c % (r * r):
            raise ValueError(f"patch splitting needs {c} channels divisible by {r}^2")
        x = x.reshape(b, h, w, r, r, c // (r * r)).permute(0, 1, 3, 2, 4, 5)
        return self.proj(x.reshape(b, h * r, w * r, c // (r * r)))


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    b, h, w, c = x.shape
    x = x.reshape(b, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws * ws, c)


def window_reverse(windows: torch.Tensor, ws: int, b: int, h: int, w: int) -> torch.Tensor:
    c = windows.shape[-1]
    x = windows.reshape(b, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


@lru_cache(maxsize=64)
def _relative_index(ws: int, table_window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel = rel + (table_window - 1)
    return rel[..., 0] * (2 * table_window - 1) + rel[..., 1]


@lru_cache(maxsize=64)
def _shift_mask(h: int, w: int, ws: int, shift: int) -> torch.Tensor:
    img = torch.zeros(1, h, w, 1)
    cnt = 0
    spans = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
    for hs in spans:
        for wsl in spans:
            img[:, hs, wsl, :] = cnt
            cnt += 1
    win = window_partition(img, ws).squeeze(-1)
    mask = win[:, None, :] - win[:, :, None]
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


class WindowAttention(nn.Module):
    """Scaled cosine self-attention inside square windows."""

    max_logit = math.log(100.0)

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.dim, self.heads, self.window = dim, heads, window
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.logit_scale = nn.Parameter(torch.full((heads, 1, 1), math.log(10.0)))
        self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))

    def attention_weights(self, q, k, ws: int, mask=None):
        scale = torch.exp(self.logit_scale.clamp(max=self.max_logit))
        attn = F.normalize(q, dim=-1) @ F.normalize(k, dim=-1).transpose(-2, -1) * scale
        idx = _relative_index(ws, self.window).to(q.device)
        bias = self.rel_bias[idx.reshape(-1)].reshape(ws * ws, ws * ws, self.heads).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.reshape(-1, nw, self.heads, ws * ws, ws * ws) + mask[None, :, None].to(attn)
            attn = attn.reshape(-1, self.heads, ws * ws, ws * ws)
        return attn.softmax(dim=-1)

    def forward(self, x: torch.Tensor, ws: int, mask=None, return_weights: bool = False):
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        weights = self.attention_weights(q, k, ws, mask)
        out = self.proj((weights @ v).transpose(1, 2).reshape(bw, n, c))
        return (out, weights) if return_weights else out


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class WindowBlock(nn.Module):
    """Swin-v2 style block: (shifted) window attention and MLP, each with a
    post-normalized residual branch.

    Feature maps smaller than the window use a single window covering the map
    (no shift); sizes that do not divide the window are zero-padded and cropped.
    """

    def __init__(self, dim: int, heads: int, window: int, shifted: bool, mlp_ratio: float = 4.0):
        super().__init__()
        self.window, self.shifted = window, shifted
        self.attn = WindowAttention(dim, heads, window)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        self.norm2 = nn.LayerNorm(dim)

    def _geometry(self, h: int, w: int) -> tuple[int, int]:
        ws = min(self.window, max(h, w))
        single = h <= ws and w <= ws
        shift = ws // 2 if self.shifted and not single else 0
        return ws, shift

    def _attend(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        ws, shift = self._geometry(h, w)
        ph, pw = (-h) % ws, (-w) % ws
        top, left = ph // 2, pw // 2
        if ph or pw:
            x = F.pad(x, (0, 0, left, pw - left, top, ph - top))
        hp, wp = h + ph, w + pw
        mask = None
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
            mask = _shift_mask(hp, wp, ws, shift)
        out = self.attn(window_partition(x, ws), ws, mask)
        x = window_reverse(out, ws, b, hp, wp)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        return x[:, top:top + h, left:left + w, :]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.norm1(self._attend(x))
        return x + self.norm2(self.mlp(x))


class LateralFuse(nn.Module):
    """1x1 (c) -> 3x3 (2c) -> 3x3 (2c) -> 1x1 (c) conv path added onto a decoder feature."""

    def __init__(self, dim: int):
        super().__init__()
        self.reduce = nn.Conv2d(dim, dim, 1)
        self.expand1 = nn.Conv2d(dim, 2 * dim, 3, padding=1)
        self.expand2 = nn.Conv2d(2 * dim, 2 * dim, 3, padding=1)
        self.shrink = nn.Conv2d(2 * dim, dim, 1)

    def forward(self, enc_feat: torch.Tensor, dec_feat: torch.Tensor) -> torch.Tensor:
        if enc_feat.shape != dec_feat.shape:
            raise ValueError(f"lateral fusion shape mismatch: {tuple(enc_feat.shape)} vs {tuple(dec_feat.shape)}")
        y = enc_feat.permute(0, 3, 1, 2)
        y = F.gelu(self.reduce(y))
        y = F.gelu(self.expand1(y))
        y = F.gelu(self.expand2(y))
        y = self.shrink(y)
        return dec_feat + y.permute(0, 2, 3, 1)
