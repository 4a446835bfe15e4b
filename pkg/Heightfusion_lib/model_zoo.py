# Heightfusion_lib/model_zoo.py
"""
Height-regression networks in every fusion variant.

Encoder: stem conv (stride 2), then four residual stages at 1/2, 1/4, 1/8 and
1/16 of the input; stages 2 and 3 downsample with a strided first block and
stage 4 opens with a 2x2 max-pool. Decoder: pyramid pooling over the coarse
map, 1x1 fusion conv, a 3x3 head to one channel and a x16 bilinear upsample
back to the input size. Skip connections project the stage 1 and stage 2
maps to one channel each and add them, bilinearly resized, to the upsampled
head output.
"""
import enum
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, ModalityError, ShapeError
from .raster_io import NormalizationSpec, stack_early_fusion
from .tensor_core import (Tensor, add, adaptive_avg_pool2d, bilinear_upsample, concat,
                          conv2d, kaiming_uniform, max_pool2d, relu, scale)
from .utils import load_data_from_json

logger = logging.getLogger(__name__)

PSP_BINS = (1, 2, 3, 6)
OUTPUT_STRIDE = 16
SKIP_STAGES = (1, 2)
# weight gain of the layers that write the height map (fusion, head, skip projections)
OUTPUT_INIT_GAIN = 0.1


class FusionMode(str, enum.Enum):
    RGB_ONLY = "rgb_only"
    SAR_ONLY = "sar_only"
    EARLY = "early"
    INTERMEDIATE = "intermediate"
    LATE = "late"


@dataclass(frozen=True)
class FusionVariant:
    mode: FusionMode
    skip_connections: bool = False

    @classmethod
    def parse(cls, mode, skip_connections=False) -> "FusionVariant":
        try:
            return cls(FusionMode(mode), bool(skip_connections))
        except ValueError:
            valid = ', '.join(m.value for m in FusionMode)
            raise ConfigError(f"Unknown fusion variant '{mode}'. Available: {valid}")

    @property
    def needs_rgb(self) -> bool:
        return self.mode is not FusionMode.SAR_ONLY

    @property
    def needs_sar(self) -> bool:
        return self.mode is not FusionMode.RGB_ONLY

    @property
    def input_channels(self) -> int:
        return {FusionMode.RGB_ONLY: 3, FusionMode.SAR_ONLY: 1, FusionMode.EARLY: 4}.get(self.mode, 0)

    def __str__(self):
        return self.mode.value + ("+skip" if self.skip_connections else "")


@dataclass(frozen=True)
class ArchScale:
    stem_width: int = 16
    stage_widths: Tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks: Tuple[int, int, int, int] = (2, 2, 2, 2)
    stem_kernel: int = 3

    @classmethod
    def preset(cls, name: str) -> "ArchScale":
        presets = load_data_from_json('arch_presets.json')
        if name not in presets:
            raise ConfigError(f"Unknown architecture preset '{name}'. Available: {', '.join(presets)}")
        p = presets[name]
        return cls(stem_width=p['stem_width'], stage_widths=tuple(p['stage_widths']),
                   blocks=tuple(p['blocks']), stem_kernel=p['stem_kernel'])

    @property
    def psp_width(self) -> int:
        return self.stage_widths[3] // len(PSP_BINS)

    @property
    def decoder_width(self) -> int:
        return max(self.stage_widths[3] // 2, 1)

    def validate(self):
        if len(self.stage_widths) != 4 or len(self.blocks) != 4:
            raise ConfigError(f"ArchScale needs 4 stages, got widths {self.stage_widths} / blocks {self.blocks}")
        if self.stem_width < 1 or min(self.stage_widths) < 1 or min(self.blocks) < 1:
            raise ConfigError(f"ArchScale widths and block counts must be positive: {self}")
        if self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            raise ConfigError(f"ArchScale stem_kernel must be odd, got {self.stem_kernel}")
        if self.psp_width < 1:
            raise ConfigError(f"Stage-4 width {self.stage_widths[3]} too narrow for {len(PSP_BINS)} pyramid branches")


# ==============================================================================
# == LAYER TABLE
# ==============================================================================

@dataclass(frozen=True)
class ConvSpec:
    name: str
    out_ch: int
    in_ch: int
    kernel: int

    @property
    def parameter_count(self) -> int:
        return self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch


def _stage_stride(stage: int) -> int:
    # stage 4 is entered through a max-pool instead
    return 2 if stage in (2, 3) else 1


def _encoder_layers(prefix: str, in_ch: int, arch: ArchScale, first_stage: int, last_stage: int,
                    stage_in: Optional[int] = None) -> List[ConvSpec]:
    layers = []
    if first_stage == 1:
        layers.append(ConvSpec(f"{prefix}stem", arch.stem_width, in_ch, arch.stem_kernel))
        ch = arch.stem_width
    else:
        ch = stage_in
    for stage in range(first_stage, last_stage + 1):
        out = arch.stage_widths[stage - 1]
        for b in range(arch.blocks[stage - 1]):
            stride = _stage_stride(stage) if b == 0 else 1
            base = f"{prefix}stage{stage}.{b}"
            layers.append(ConvSpec(f"{base}.conv1", out, ch, 3))
            layers.append(ConvSpec(f"{base}.conv2", out, out, 3))
            if stride != 1 or ch != out:
                layers.append(ConvSpec(f"{base}.proj", out, ch, 1))
            ch = out
    return layers


def _decoder_layers(prefix: str, arch: ArchScale, skip: bool, skip_channels: Tuple[int, int]) -> List[ConvSpec]:
    c4 = arch.stage_widths[3]
    layers = [ConvSpec(f"{prefix}decoder.psp{b}", arch.psp_width, c4, 1) for b in PSP_BINS]
    layers.append(ConvSpec(f"{prefix}decoder.fuse", arch.decoder_width, c4 + len(PSP_BINS) * arch.psp_width, 1))
    if skip:
        for stage, ch in zip(SKIP_STAGES, skip_channels):
            layers.append(ConvSpec(f"{prefix}decoder.skip{stage}", 1, ch, 1))
    layers.append(ConvSpec(f"{prefix}head", 1, arch.decoder_width, 3))
    return layers


def _single_network_layers(prefix: str, in_ch: int, arch: ArchScale, skip: bool) -> List[ConvSpec]:
    return (_encoder_layers(prefix, in_ch, arch, 1, 4)
            + _decoder_layers(prefix, arch, skip, (arch.stage_widths[0], arch.stage_widths[1])))


def layer_table(variant: FusionVariant, arch: ArchScale) -> List[ConvSpec]:
    """Every convolution of the network in construction order."""
    skip = variant.skip_connections
    if variant.mode is FusionMode.LATE:
        return (_single_network_layers("rgb.", 3, arch, skip)
                + _single_network_layers("sar.", 1, arch, skip))
    if variant.mode is FusionMode.INTERMEDIATE:
        w1, w2 = arch.stage_widths[0], arch.stage_widths[1]
        return (_encoder_layers("rgb.", 3, arch, 1, 2)
                + _encoder_layers("sar.", 1, arch, 1, 2)
                + _encoder_layers("", 0, arch, 3, 4, stage_in=2 * w2)
                + _decoder_layers("", arch, skip, (2 * w1, 2 * w2)))
    return _single_network_layers("", variant.input_channels, arch, skip)


# ==============================================================================
# == MODEL GRAPH
# ==============================================================================

class ModelGraph:
    """
    A fusion-variant network: its variant, architecture scale and named parameters,
    plus the per-modality input statistics it was trained with (empty until trained).
    """

    def __init__(self, variant: FusionVariant, arch: ArchScale, params: "OrderedDict[str, Tensor]",
                 normalization: Optional[Dict[str, NormalizationSpec]] = None):
        self.variant = variant
        self.arch = arch
        self.params = params
        self.normalization: Dict[str, NormalizationSpec] = dict(normalization or {})

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __repr__(self):
        return f"ModelGraph(variant={self.variant}, params={len(self.params)}, size={self.parameter_count()})"


def init_gain(name: str, arch: ArchScale) -> float:
    """
    Multiplier on the Kaiming bound of a layer. The second conv of every
    residual branch is shrunk by 1/sqrt(total blocks) so the unnormalised
    stack keeps unit-scale activations; the layers that write the height map
    start at OUTPUT_INIT_GAIN so the first predictions sit near 0 m.
    """
    leaf = name.rpartition(".")[2]
    if leaf == "conv2":
        return 1.0 / np.sqrt(sum(arch.blocks))
    if leaf in ("fuse", "head") or leaf.startswith("skip"):
        return OUTPUT_INIT_GAIN
    return 1.0


def build_model(variant: FusionVariant, arch: Optional[ArchScale] = None, seed: int = 0) -> ModelGraph:
    """Deterministic construction: scaled Kaiming-uniform fan-in weights, zero biases, seeded."""
    arch = arch or ArchScale()
    arch.validate()
    rng = np.random.default_rng(seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for spec in layer_table(variant, arch):
        if spec.name + ".weight" in params:
            raise ConfigError(f"Duplicate layer name '{spec.name}'")
        weight = kaiming_uniform((spec.out_ch, spec.in_ch, spec.kernel, spec.kernel), rng)
        weight.data *= init_gain(spec.name, arch)
        params[spec.name + ".weight"] = weight
        params[spec.name + ".bias"] = Tensor(np.zeros(spec.out_ch), requires_grad=True)
    model = ModelGraph(variant, arch, params)
    logger.debug("built %r", model)
    return model


def adapt_first_conv(rgb_stem_weight: Tensor, init_mode: str = "zeros") -> Tensor:
    """Widen an O x 3 x k x k stem to accept a fourth (SAR) input channel."""
    w = rgb_stem_weight.data
    if w.ndim != 4 or w.shape[1] != 3:
        raise ShapeError(f"adapt_first_conv expects an Ox3xkxk weight, got {w.shape}")
    if init_mode == "zeros":
        extra = np.zeros_like(w[:, :1])
    elif init_mode == "mean_rgb":
        extra = w.mean(axis=1, keepdims=True)
    else:
        raise ConfigError(f"Unknown init_mode '{init_mode}'. Available: zeros, mean_rgb")
    return Tensor(np.concatenate([w, extra], axis=1), requires_grad=rgb_stem_weight.requires_grad)


# ==============================================================================
# == FORWARD
# ==============================================================================

def _conv(params, name, x, stride=1, padding=0):
    return conv2d(x, params[name + ".weight"], params[name + ".bias"], stride=stride, padding=padding)


def _residual_block(params, base, x, stride):
    h = relu(_conv(params, f"{base}.conv1", x, stride=stride, padding=1))
    h = _conv(params, f"{base}.conv2", h, padding=1)
    shortcut = _conv(params, f"{base}.proj", x, stride=stride) if f"{base}.proj.weight" in params else x
    return relu(add(h, shortcut))


def _run_stages(params, prefix, arch, x, first_stage, last_stage, taps):
    for stage in range(first_stage, last_stage + 1):
        if stage == 4:
            x = max_pool2d(x, kernel=2, stride=2)
        for b in range(arch.blocks[stage - 1]):
            stride = _stage_stride(stage) if b == 0 else 1
            x = _residual_block(params, f"{prefix}stage{stage}.{b}", x, stride)
        taps[stage] = x
    return x


def _stem(params, prefix, arch, x):
    return relu(_conv(params, f"{prefix}stem", x, stride=2, padding=arch.stem_kernel // 2))


def _decode(params, prefix, arch, feats):
    """Pyramid pooling decoder; returns the coarse (H/16 x W/16) one-channel map."""
    h, w = feats.shape[2:]
    branches = [feats]
    for b in PSP_BINS:
        # bins never exceed the coarse grid (desk-scale maps can be smaller than 6x6)
        pooled = adaptive_avg_pool2d(feats, min(b, h), min(b, w))
        branch = relu(_conv(params, f"{prefix}decoder.psp{b}", pooled))
        branches.append(bilinear_upsample(branch, h, w))
    d = relu(_conv(params, f"{prefix}decoder.fuse", concat(branches, axis=1)))
    return _conv(params, f"{prefix}head", d, padding=1)


def _skip_maps(params, prefix, taps) -> List[Tensor]:
    """One-channel projections of the stage 1 and stage 2 maps, at their own resolution."""
    return [_conv(params, f"{prefix}decoder.skip{stage}", taps[stage]) for stage in SKIP_STAGES]


def _compose(coarse: Tensor, skips: List[Tensor], like: Tensor) -> Tensor:
    """Upsampled coarse map plus every skip map resized to the input grid."""
    h, w = like.shape[2], like.shape[3]
    out = bilinear_upsample(coarse, h, w)
    for s in skips:
        out = add(out, bilinear_upsample(s, h, w))
    return out


def _check_input(x: Optional[Tensor], channels: int, what: str):
    if x is None:
        raise ModalityError(f"{what} input is required by this variant")
    if x.ndim != 4 or x.shape[1] != channels:
        raise ModalityError(f"{what} input must be Nx{channels}xHxW, got {x.shape}")
    if x.shape[2] % OUTPUT_STRIDE or x.shape[3] % OUTPUT_STRIDE:
        raise ShapeError(f"{what} spatial size {x.shape[2]}x{x.shape[3]} is not divisible by {OUTPUT_STRIDE}")


def _check_modalities(variant: FusionVariant, rgb, sar):
    if variant.needs_rgb:
        _check_input(rgb, 3, "RGB")
    elif rgb is not None:
        raise ModalityError(f"variant {variant} takes no RGB input")
    if variant.needs_sar:
        _check_input(sar, 1, "SAR")
    elif sar is not None:
        raise ModalityError(f"variant {variant} takes no SAR input")
    if rgb is not None and sar is not None and (rgb.shape[0], *rgb.shape[2:]) != (sar.shape[0], *sar.shape[2:]):
        raise ShapeError(f"RGB {rgb.shape} and SAR {sar.shape} are not aligned")


def _forward_single(params, prefix, arch, skip, x) -> Tuple[Tensor, Tensor]:
    """(full-resolution height map, coarse map) of one single-input network."""
    taps: Dict[int, Tensor] = {}
    feats = _run_stages(params, prefix, arch, _stem(params, prefix, arch, x), 1, 4, taps)
    coarse = _decode(params, prefix, arch, feats)
    return _compose(coarse, _skip_maps(params, prefix, taps) if skip else [], x), coarse


def forward(model: ModelGraph, rgb: Optional[Tensor] = None, sar: Optional[Tensor] = None,
            return_coarse: bool = False):
    """
    Height map (N x 1 x H x W, meters) for normalised inputs.
    With `return_coarse` the H/16 x W/16 head output is returned too.
    """
    v = model.variant
    _check_modalities(v, rgb, sar)
    p, arch, skip = model.params, model.arch, v.skip_connections

    if v.mode is FusionMode.INTERMEDIATE:
        return forward_intermediate(model, rgb, sar, return_coarse=return_coarse)
    if v.mode is FusionMode.LATE:
        out_rgb, coarse_rgb = _forward_single(p, "rgb.", arch, skip, rgb)
        out_sar, coarse_sar = _forward_single(p, "sar.", arch, skip, sar)
        out = late_fuse(out_rgb, out_sar)
        return (out, late_fuse(coarse_rgb, coarse_sar)) if return_coarse else out

    if v.mode is FusionMode.EARLY:
        x = stack_early_fusion(rgb, sar)
    else:
        x = rgb if v.mode is FusionMode.RGB_ONLY else sar
    out, coarse = _forward_single(p, "", arch, skip, x)
    return (out, coarse) if return_coarse else out


def forward_intermediate(model: ModelGraph, rgb: Tensor, sar: Tensor, return_coarse: bool = False):
    """Per-modality stem + stages 1-2, channel concat, shared stages 3-4 and decoder."""
    if model.variant.mode is not FusionMode.INTERMEDIATE:
        raise ModalityError(f"forward_intermediate needs the intermediate variant, got {model.variant}")
    _check_modalities(model.variant, rgb, sar)
    p, arch = model.params, model.arch
    rgb_taps: Dict[int, Tensor] = {}
    sar_taps: Dict[int, Tensor] = {}
    rgb_feats = _run_stages(p, "rgb.", arch, _stem(p, "rgb.", arch, rgb), 1, 2, rgb_taps)
    sar_feats = _run_stages(p, "sar.", arch, _stem(p, "sar.", arch, sar), 1, 2, sar_taps)
    taps = {stage: concat([rgb_taps[stage], sar_taps[stage]], axis=1) for stage in SKIP_STAGES}
    joined = concat([rgb_feats, sar_feats], axis=1)
    feats = _run_stages(p, "", arch, joined, 3, 4, taps)
    coarse = _decode(p, "", arch, feats)
    skips = _skip_maps(p, "", taps) if model.variant.skip_connections else []
    out = _compose(coarse, skips, rgb)
    return (out, coarse) if return_coarse else out


def late_fuse(pred_a: Tensor, pred_b: Tensor) -> Tensor:
    """Elementwise (a + b) / 2."""
    if pred_a.shape != pred_b.shape:
        raise ShapeError(f"late_fuse: shapes {pred_a.shape} and {pred_b.shape} do not match")
    return scale(add(pred_a, pred_b), 0.5)


# ==============================================================================
# == LATE-FUSION PAIRS
# ==============================================================================

def split_late(model: ModelGraph) -> Tuple[ModelGraph, ModelGraph]:
    """Two single-modality graphs sharing the late model's parameter tensors."""
    if model.variant.mode is not FusionMode.LATE:
        raise ModalityError(f"split_late needs the late variant, got {model.variant}")
    skip = model.variant.skip_connections
    halves = []
    for prefix, mode in (("rgb.", FusionMode.RGB_ONLY), ("sar.", FusionMode.SAR_ONLY)):
        params = OrderedDict((k[len(prefix):], v) for k, v in model.params.items() if k.startswith(prefix))
        halves.append(ModelGraph(FusionVariant(mode, skip), model.arch, params, model.normalization))
    return halves[0], halves[1]


def join_late(rgb_model: ModelGraph, sar_model: ModelGraph) -> ModelGraph:
    if rgb_model.variant.mode is not FusionMode.RGB_ONLY or sar_model.variant.mode is not FusionMode.SAR_ONLY:
        raise ModalityError(
            f"join_late needs an rgb_only and a sar_only model, got {rgb_model.variant} and {sar_model.variant}")
    if rgb_model.arch != sar_model.arch or rgb_model.variant.skip_connections != sar_model.variant.skip_connections:
        raise ConfigError("join_late: branch architectures differ")
    params = OrderedDict()
    for prefix, m in (("rgb.", rgb_model), ("sar.", sar_model)):
        params.update((prefix + k, v) for k, v in m.params.items())
    normalization = {k: v for k, v in (('rgb', rgb_model.normalization.get('rgb')),
                                       ('sar', sar_model.normalization.get('sar'))) if v is not None}
    return ModelGraph(FusionVariant(FusionMode.LATE, rgb_model.variant.skip_connections), rgb_model.arch, params,
                      normalization)
