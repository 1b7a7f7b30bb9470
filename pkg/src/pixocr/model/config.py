"""Architecture hyperparameters and the named presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

SITES = ("encoder", "shared", "decoder")


@dataclass(frozen=True)
class StageSpec:
    """One encoder or decoder block.

    For an encoder stage ``resample_ratio`` is the patch-embedding downsampling
    factor and ``out_dim`` its output width (equal to ``dim``). For a decoder
    stage the transformer blocks run at ``dim`` and the patch-splitting layer
    upsamples by ``resample_ratio`` to ``out_dim`` channels.
    """

    resample_ratio: int
    out_dim: int
    window: int
    heads: int
    depth: int
    dim: int

    def validate(self) -> None:
        for name in ("out_dim", "window", "heads", "depth", "dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"StageSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.resample_ratio < 1:
            raise ValueError("StageSpec.resample_ratio must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")


@dataclass(frozen=True)
class ModelConfig:
    encoder_stages: tuple[StageSpec, ...]
    decoder_stages: tuple[StageSpec, ...]
    prompt_count: int = 3
    prompt_dim: int = 768
    prompt_sites: frozenset = field(default_factory=lambda: frozenset({"shared"}))
    mlp_ratio: float = 4.0
    head_kernel: int = 3
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "encoder_stages", tuple(self.encoder_stages))
        object.__setattr__(self, "decoder_stages", tuple(self.decoder_stages))
        object.__setattr__(self, "prompt_sites", frozenset(self.prompt_sites))
        self.validate()

    def validate(self) -> None:
        enc, dec = self.encoder_stages, self.decoder_stages
        if len(enc) != 4 or len(dec) != 5:
            raise ValueError("expected 4 encoder stages and 5 decoder stages")
        for s in enc + dec:
            s.validate()
        if self.encoder_strides() != (4, 8, 16, 32):
            raise ValueError(f"encoder strides must be (4, 8, 16, 32), got {self.encoder_strides()}")
        if self.decoder_strides() != (16, 8, 4, 2, 1):
            raise ValueError(f"decoder strides must be (16, 8, 4, 2, 1), got {self.decoder_strides()}")
        for s in enc:
            if s.dim != s.out_dim:
                raise ValueError("encoder stage dim must equal its patch-embedding out_dim")
        if dec[0].dim != enc[-1].dim:
            raise ValueError("first decoder stage must run at the final encoder width")
        for a, b in zip(dec, dec[1:]):
            if b.dim != a.out_dim:
                raise ValueError("decoder stage dim must equal previous stage out_dim")
        for s in dec:
            if s.dim % (s.resample_ratio ** 2):
                raise ValueError(f"patch splitting needs dim {s.dim} divisible by {s.resample_ratio}^2")
        # lateral connections: encoder stage i (1..3) feeds decoder output 4-i
        for i in range(3):
            if enc[i].dim != dec[2 - i].out_dim:
                raise ValueError(
                    f"lateral connection enc{i + 1}->dec{3 - i} needs equal widths, "
                    f"got {enc[i].dim} vs {dec[2 - i].out_dim}"
                )
        if self.prompt_dim != enc[-1].dim:
            raise ValueError("prompt_dim must equal the final encoder width")
        if self.prompt_count < 1:
            raise ValueError("prompt_count must be >= 1")
        if not self.prompt_sites or not set(self.prompt_sites) <= set(SITES):
            raise ValueError(f"prompt_sites must be a non-empty subset of {SITES}")

    def encoder_strides(self) -> tuple[int, ...]:
        out, acc = [], 1
        for s in self.encoder_stages:
            acc *= s.resample_ratio
            out.append(acc)
        return tuple(out)

    def decoder_strides(self) -> tuple[int, ...]:
        out, acc = [], self.encoder_strides()[-1]
        for s in self.decoder_stages:
            acc //= s.resample_ratio
            out.append(acc)
        return tuple(out)

    @property
    def size_multiple(self) -> int:
        return self.encoder_strides()[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prompt_sites"] = sorted(self.prompt_sites)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        d["encoder_stages"] = [StageSpec(**s) for s in d["encoder_stages"]]
        d["decoder_stages"] = [StageSpec(**s) for s in d["decoder_stages"]]
        if "prompt_sites" in d:
            d["prompt_sites"] = frozenset(d["prompt_sites"])
        return cls(**d)


def _build(enc_dims, enc_depths, enc_heads, enc_window, dec_dims, dec_outs, dec_depths, dec_heads,
           dec_window, **kw) -> ModelConfig:
    ratios = (4, 2, 2, 2)
    enc = [StageSpec(r, d, enc_window, h, n, d) for r, d, h, n in zip(ratios, enc_dims, enc_heads, enc_depths)]
    dec = [StageSpec(2, o, dec_window, h, n, d)
           for d, o, h, n in zip(dec_dims, dec_outs, dec_heads, dec_depths)]
    return ModelConfig(enc, dec, prompt_dim=enc_dims[-1], **kw)


def small_config(**kw) -> ModelConfig:
    """The full-size architecture (about 108M parameters)."""
    return _build(
        enc_dims=(96, 192, 384, 768), enc_depths=(2, 2, 18, 2), enc_heads=(3, 6, 12, 24), enc_window=16,
        dec_dims=(768, 384, 192, 96, 48), dec_outs=(384, 192, 96, 48, 24), dec_depths=(2, 18, 2, 2, 2),
        dec_heads=(24, 12, 6, 3, 2), dec_window=8, **kw,
    )


def toy_config(**kw) -> ModelConfig:
    """Desk-scale preset for CPU experiments and tests."""
    return _build(
        enc_dims=(16, 32, 64, 128), enc_depths=(1, 1, 2, 1), enc_heads=(1, 2, 4, 8), enc_window=8,
        dec_dims=(128, 64, 32, 16, 16), dec_outs=(64, 32, 16, 16, 16), dec_depths=(1, 2, 1, 1, 1),
        dec_heads=(8, 4, 2, 1, 1), dec_window=8, **kw,
    )


PRESETS = {"small": small_config, "toy": toy_config}


def preset(name: str, **kw) -> ModelConfig:
    try:
        return PRESETS[name](**kw)
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
