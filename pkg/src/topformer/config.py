"""Architecture configurations for the tiny / small / base variants."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Tuple

from .errors import ConfigError

HEAD_KINDS = ("default", "sum", "concat", "classification")
VARIANTS = ("tiny", "small", "base")


@dataclass(frozen=True)
class MBBlockCfg:
    """Inverted residual block: kernel, expand ratio, output channels, stride."""

    kernel: int
    expand_ratio: int
    out_channels: int
    stride: int

    def problems(self):
        out = []
        if self.stride not in (1, 2):
            out.append(f"stride {self.stride} not in {{1, 2}}")
        if self.expand_ratio < 1:
            out.append(f"expand_ratio {self.expand_ratio} < 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            out.append(f"kernel {self.kernel} must be odd")
        if self.out_channels < 1:
            out.append(f"out_channels {self.out_channels} < 1")
        return out


def _stages(c1, c2, c3, c4, extra_last):
    last = [MBBlockCfg(5, 6, c4, 2), MBBlockCfg(5, 6, c4, 1)]
    if extra_last:
        last.append(MBBlockCfg(3, 6, c4, 1))
    return (
        (MBBlockCfg(3, 4, c1, 2), MBBlockCfg(3, 3, c1, 1)),
        (MBBlockCfg(5, 3, c2, 2), MBBlockCfg(5, 3, c2, 1)),
        (MBBlockCfg(3, 3, c3, 2), MBBlockCfg(3, 3, c3, 1)),
        tuple(last),
    )


@dataclass(frozen=True)
class VariantConfig:
    name: str
    stages: Tuple[Tuple[MBBlockCfg, ...], ...]
    num_heads: int
    sim_width: int
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_block: MBBlockCfg = field(default_factory=lambda: MBBlockCfg(3, 1, 16, 1))
    num_transformer_blocks: int = 4
    key_dim: int = 16
    value_dim: int = 32
    ffn_expansion: int = 2
    sase_stride: int = 64
    injection_scales: Tuple[int, ...] = (8, 16, 32)
    head_kind: str = "default"
    num_classes: int = 150

    @property
    def stage_channels(self) -> tuple:
        return tuple(s[-1].out_channels for s in self.stages)

    @property
    def concat_width(self) -> int:
        return sum(self.stage_channels)

    @property
    def stage_strides(self) -> tuple:
        """Output stride (input size / token size) after each stage."""
        s = self.stem_stride * self.stem_block.stride
        out = []
        for stage in self.stages:
            for b in stage:
                s *= b.stride
            out.append(s)
        return tuple(out)

    @property
    def injection_stages(self) -> tuple:
        """Stage indices receiving semantics injection, fine to coarse."""
        strides = self.stage_strides
        return tuple(strides.index(s) for s in self.injection_scales)

    @property
    def required_multiple(self) -> int:
        return max(self.sase_stride, self.stage_strides[-1], self.stem_stride)

    @property
    def is_preset(self) -> bool:
        return self.name in VARIANTS

    def problems(self) -> list:
        out = []
        if not self.stages:
            out.append("stages is empty")
        for si, stage in enumerate(self.stages):
            if not stage:
                out.append(f"stage {si + 1} is empty")
            for bi, b in enumerate(stage):
                out += [f"stage {si + 1} block {bi}: {p}" for p in b.problems()]
        out += [f"stem_block: {p}" for p in self.stem_block.problems()]
        if self.head_kind not in HEAD_KINDS:
            out.append(f"head_kind {self.head_kind!r} not in {HEAD_KINDS}")
        if self.num_heads < 1 or self.key_dim < 1 or self.value_dim < 1:
            out.append("num_heads, key_dim and value_dim must be positive")
        if self.num_transformer_blocks < 0:
            out.append("num_transformer_blocks must be >= 0")
        if self.ffn_expansion < 1:
            out.append("ffn_expansion must be >= 1")
        if self.sim_width < 1:
            out.append("sim_width must be positive")
        if self.num_classes < 1:
            out.append("num_classes must be positive")
        if self.sase_stride < 1:
            out.append("sase_stride must be positive")
        if self.stages and self.sase_stride < self.stage_strides[-1]:
            out.append(f"sase_stride {self.sase_stride} finer than coarsest token stride {self.stage_strides[-1]}")
        if self.stages and self.head_kind != "classification":
            strides = self.stage_strides
            missing = [s for s in self.injection_scales if s not in strides]
            if missing:
                out.append(f"injection_scales {missing} match no stage stride (stage strides {strides})")
            if list(self.injection_scales) != sorted(self.injection_scales) or not self.injection_scales:
                out.append("injection_scales must be non-empty and ordered fine to coarse")
        if self.is_preset:
            out += self._preset_problems()
        return out

    def _preset_problems(self) -> list:
        out = []
        expect = {"tiny": (4, 128), "small": (6, 192), "base": (8, 256)}[self.name]
        if self.num_transformer_blocks != 4:
            out.append(f"L must be 4, got {self.num_transformer_blocks}")
        if self.key_dim != 16:
            out.append(f"key_dim must be 16, got {self.key_dim}")
        if self.value_dim != 2 * self.key_dim:
            out.append(f"value_dim must be 2*key_dim, got {self.value_dim}")
        if (self.num_heads, self.sim_width) != expect:
            out.append(f"(heads, M) must be {expect} for {self.name}, got {(self.num_heads, self.sim_width)}")
        if self.sase_stride not in (32, 64, 128):
            out.append(f"sase_stride must be one of 32/64/128, got {self.sase_stride}")
        return out

    def validate(self) -> "VariantConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(f"invalid variant {self.name!r}: " + "; ".join(problems))
        return self

    def with_(self, **kw) -> "VariantConfig":
        return replace(self, **kw)


def variant(name: str, *, head_kind: str = "default", sase_stride=None, num_classes=None) -> VariantConfig:
    """Preset config. Classification defaults to stride 32 and 1000 classes."""
    presets = {
        "tiny": dict(stages=_stages(16, 32, 64, 96, False), num_heads=4, sim_width=128),
        "small": dict(stages=_stages(24, 48, 96, 128, True), num_heads=6, sim_width=192),
        "base": dict(stages=_stages(32, 64, 128, 160, True), num_heads=8, sim_width=256),
    }
    if name not in presets:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    cls = head_kind == "classification"
    if sase_stride is None:
        sase_stride = 32 if cls else 64
    if num_classes is None:
        num_classes = 1000 if cls else 150
    return VariantConfig(name=name, head_kind=head_kind, sase_stride=sase_stride,
                         num_classes=num_classes, **presets[name]).validate()


def micro_config(head_kind: str = "default", num_classes: int = 3) -> VariantConfig:
    """A few-hundred-parameter network for finite-difference checks on 4x4 images.

    Two stages (stride 1 and 2), one transformer block, injection at both.
    """
    return VariantConfig(
        name="micro",
        stem_channels=2,
        stem_stride=1,
        stem_block=MBBlockCfg(3, 1, 2, 1),
        stages=((MBBlockCfg(3, 2, 4, 1),), (MBBlockCfg(3, 2, 4, 2),)),
        num_transformer_blocks=1,
        num_heads=2,
        key_dim=2,
        value_dim=4,
        sim_width=4,
        sase_stride=2,
        injection_scales=(1, 2),
        head_kind=head_kind,
        num_classes=num_classes,
    ).validate()
