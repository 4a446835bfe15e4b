# Heightfusion_lib/training.py
"""
Mini-batch training with smooth-L1 loss against the nDSM, prediction to
height tiles, and the binary checkpoint format.
"""
import json
import logging
import math
import struct
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import TrainConfig
from .errors import CheckpointError, CheckpointVersionError, ModalityError, ShapeError
from .metrics import HeightMetricsReport, evaluate_heights
from .model_zoo import (ArchScale, FusionMode, FusionVariant, ModelGraph, build_model, forward,
                        join_late, layer_table, split_late)
from .raster_io import NormalizationSpec, RasterTile, band_statistics, default_spec, height_tile, normalize
from .synth_data import SceneSample
from .tensor_core import SGD, Adam, Optimizer, Tensor, add, smooth_l1_loss
from .utils import atomic_write_bytes, atomic_write_text

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HFCKPT\x00\x01"
CHECKPOINT_VERSION = 1


@dataclass
class TrainState:
    model: ModelGraph
    optimizer: Optimizer
    epoch: int = 0
    step: int = 0
    loss_history: List[Tuple[int, float]] = field(default_factory=list)

    def record(self, step: int, loss: float):
        if self.loss_history and step <= self.loss_history[-1][0]:
            raise ValueError(f"loss history is step-monotone; got step {step} after {self.loss_history[-1][0]}")
        self.loss_history.append((step, loss))


# ==============================================================================
# == INPUT ASSEMBLY
# ==============================================================================

@dataclass
class InputNormalization:
    rgb: NormalizationSpec = field(default_factory=lambda: default_spec('rgb'))
    sar: NormalizationSpec = field(default_factory=lambda: default_spec('sar'))

    @classmethod
    def from_dataset(cls, dataset: Sequence[SceneSample], variant: FusionVariant) -> "InputNormalization":
        """ImageNet constants for RGB; SAR statistics measured on the scenes that have a SAR tile."""
        sar_tiles = [s.sar for s in dataset if s.sar is not None]
        if variant.needs_sar and sar_tiles:
            return cls(sar=band_statistics(sar_tiles))
        return cls()

    @classmethod
    def of_model(cls, model: ModelGraph) -> "InputNormalization":
        return cls(**model.normalization)

    def for_variant(self, variant: FusionVariant) -> Dict[str, NormalizationSpec]:
        chosen = {}
        if variant.needs_rgb:
            chosen['rgb'] = self.rgb
        if variant.needs_sar:
            chosen['sar'] = self.sar
        return chosen


def prepare_inputs(sample: SceneSample, variant: FusionVariant,
                   norm: Optional[InputNormalization] = None) -> Tuple[Optional[Tensor], Optional[Tensor]]:
    """Normalised 1xCxHxW tensors for exactly the modalities `variant` consumes."""
    norm = norm or InputNormalization()
    rgb = normalize(sample.rgb, norm.rgb) if variant.needs_rgb else None
    if variant.needs_sar:
        if sample.sar is None:
            raise ModalityError(f"scene '{sample.name}' has no SAR tile, required by variant {variant}")
        sar = normalize(sample.sar, norm.sar)
    else:
        sar = None
    return rgb, sar


def _target(sample: SceneSample) -> np.ndarray:
    if sample.ndsm is None:
        raise ModalityError(f"scene '{sample.name}' has no nDSM target")
    return sample.heights[None, None]


def _stack(arrays: Sequence[Optional[np.ndarray]]) -> Optional[Tensor]:
    if arrays[0] is None:
        return None
    return Tensor(np.concatenate(arrays, axis=0))


def _make_optimizer(config: TrainConfig, params) -> Optimizer:
    if config.optimizer == 'adam':
        return Adam(params, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
    return SGD(params, config.lr, config.momentum)


def _batch_loss(model: ModelGraph, rgb, sar, target: Tensor, beta: float) -> Tuple[Tensor, float]:
    """Loss to differentiate and the value to record."""
    if model.variant.mode is FusionMode.LATE:
        # branches are trained independently on the same batch; their parameters are disjoint
        rgb_model, sar_model = split_late(model)
        loss_rgb = smooth_l1_loss(forward(rgb_model, rgb, None), target, beta)
        loss_sar = smooth_l1_loss(forward(sar_model, None, sar), target, beta)
        return add(loss_rgb, loss_sar), 0.5 * (loss_rgb.item() + loss_sar.item())
    loss = smooth_l1_loss(forward(model, rgb, sar), target, beta)
    return loss, loss.item()


def train(config: TrainConfig, dataset: Sequence[SceneSample], model: Optional[ModelGraph] = None,
          norm: Optional[InputNormalization] = None) -> TrainState:
    """
    epochs x ceil(N / batch_size) steps (or `config.max_steps`), each one
    forward, smooth-L1 against the nDSM, backward and an optimizer step.
    Fully determined by (config, dataset). Without `norm`, SAR inputs are
    standardised with statistics measured on `dataset`; the statistics used
    are stored on the model so prediction reuses them.
    """
    if not dataset:
        raise ModalityError("training needs a non-empty dataset")
    variant = config.fusion_variant
    model = model or build_model(variant, config.arch_scale, seed=config.seed)
    if model.variant != variant:
        raise ModalityError(f"model variant {model.variant} does not match config variant {variant}")

    if norm is None and model.normalization:
        norm = InputNormalization.of_model(model)
    elif norm is None:
        norm = InputNormalization.from_dataset(dataset, variant)
    model.normalization = norm.for_variant(variant)
    cached = [prepare_inputs(s, variant, norm) for s in dataset]
    rgb_data = [None if r is None else r.data for r, _ in cached]
    sar_data = [None if s is None else s.data for _, s in cached]
    targets = [_target(s) for s in dataset]

    state = TrainState(model=model, optimizer=_make_optimizer(config, model.params))
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / config.batch_size)
    started = time.perf_counter()
    logger.info("training %s on %d scenes: %d epochs x %d steps (%s, lr=%g)",
                variant, n, config.epochs, steps_per_epoch, config.optimizer, config.lr)

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            if config.max_steps and state.step >= config.max_steps:
                break
            idx = order[start:start + config.batch_size]
            rgb = _stack([rgb_data[i] for i in idx])
            sar = _stack([sar_data[i] for i in idx])
            target = Tensor(np.concatenate([targets[i] for i in idx], axis=0))
            loss, value = _batch_loss(model, rgb, sar, target, config.smooth_l1_beta)
            loss.backward()
            state.optimizer.step()
            state.step += 1
            state.record(state.step, value)
            logger.debug("epoch %d step %d loss %.6f", epoch + 1, state.step, value)
        else:
            state.epoch = epoch + 1
            logger.info("epoch %d/%d done, last loss %.4f", state.epoch, config.epochs, state.loss_history[-1][1])
            continue
        break

    logger.info("trained %d steps in %.1fs", state.step, time.perf_counter() - started)
    return state


# ==============================================================================
# == PREDICTION AND EVALUATION
# ==============================================================================

ModelOrPair = Union[ModelGraph, Tuple[ModelGraph, ModelGraph]]


def _as_model(model: ModelOrPair) -> ModelGraph:
    if isinstance(model, tuple):
        return join_late(*model)
    return model


def predict_array(model: ModelOrPair, sample: SceneSample, norm: Optional[InputNormalization] = None) -> np.ndarray:
    model = _as_model(model)
    rgb, sar = prepare_inputs(sample, model.variant, norm or InputNormalization.of_model(model))
    return forward(model, rgb, sar).data[0, 0]


def predict(model: ModelOrPair, sample: SceneSample, norm: Optional[InputNormalization] = None) -> RasterTile:
    """Single-band float32 height tile named after the scene's optical tile."""
    return height_tile(sample.name, predict_array(model, sample, norm))


def evaluate_model(model: ModelOrPair, samples: Sequence[SceneSample],
                   norm: Optional[InputNormalization] = None) -> HeightMetricsReport:
    """Height metrics pooled over every pixel of every scene (predictions rounded to float32 as written)."""
    preds = [predict(model, s, norm).planes[0].astype(np.float64).ravel() for s in samples]
    gts = [_target(s).ravel() for s in samples]
    return evaluate_heights(np.concatenate(preds), np.concatenate(gts))


def write_loss_csv(history: Sequence[Tuple[int, float]], path):
    lines = ["step,loss"] + [f"{step},{loss!r}" for step, loss in history]
    atomic_write_text(path, "\n".join(lines) + "\n")


# ==============================================================================
# == CHECKPOINTS
# ==============================================================================
# layout: magic(8) | version u32 | header-len u32 | header JSON | count u32 |
#         count x [name-len u16 | name | ndim u8 | dims u32... | float64 LE samples]

def _model_of(state_or_model) -> ModelGraph:
    return state_or_model.model if isinstance(state_or_model, TrainState) else state_or_model


def encode_checkpoint(model: ModelGraph) -> bytes:
    header = json.dumps({
        "variant": model.variant.mode.value,
        "skip_connections": model.variant.skip_connections,
        "arch": {"stem_width": model.arch.stem_width, "stage_widths": list(model.arch.stage_widths),
                 "blocks": list(model.arch.blocks), "stem_kernel": model.arch.stem_kernel},
        "normalization": {modality: {"mean": [float(m) for m in spec.mean], "std": [float(s) for s in spec.std]}
                          for modality, spec in model.normalization.items()},
    }, sort_keys=True).encode('utf-8')
    parts = [CHECKPOINT_MAGIC, struct.pack('<II', CHECKPOINT_VERSION, len(header)), header,
             struct.pack('<I', len(model.params))]
    for name, p in model.params.items():
        raw = name.encode('utf-8')
        parts.append(struct.pack('<H', len(raw)) + raw + struct.pack('<B', p.ndim))
        parts.append(struct.pack(f'<{p.ndim}I', *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype='<f8').tobytes())
    return b''.join(parts)


def save_checkpoint(state_or_model, path):
    model = _model_of(state_or_model)
    atomic_write_bytes(path, encode_checkpoint(model))
    logger.info("saved %r to %s", model, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint '{self.path}' is corrupt: truncated at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes, path="<memory>") -> ModelGraph:
    r = _Reader(buf, path)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"'{path}' is not a Heightfusion checkpoint (bad magic)")
    version, header_len = r.unpack('<II')
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint '{path}' has format version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(r.take(header_len).decode('utf-8'))
        variant = FusionVariant.parse(header["variant"], header["skip_connections"])
        a = header["arch"]
        arch = ArchScale(stem_width=a["stem_width"], stage_widths=tuple(a["stage_widths"]),
                         blocks=tuple(a["blocks"]), stem_kernel=a["stem_kernel"])
        normalization = {modality: NormalizationSpec(mean=tuple(s["mean"]), std=tuple(s["std"]))
                         for modality, s in header.get("normalization", {}).items()}
    except (ValueError, KeyError, TypeError, ShapeError) as e:
        raise CheckpointError(f"checkpoint '{path}' has a corrupt header: {e!r}")

    (count,) = r.unpack('<I')
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack('<H')
        try:
            name = r.take(name_len).decode('utf-8')
        except UnicodeDecodeError:
            raise CheckpointError(f"checkpoint '{path}' has a corrupt parameter name")
        (ndim,) = r.unpack('<B')
        shape = r.unpack(f'<{ndim}I')
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * n), dtype='<f8').reshape(shape)
        params[name] = Tensor(data, requires_grad=True)
    if r.pos != len(buf):
        raise CheckpointError(f"checkpoint '{path}' is corrupt: {len(buf) - r.pos} trailing bytes")

    expected = {}
    for spec in layer_table(variant, arch):
        expected[spec.name + ".weight"] = (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
        expected[spec.name + ".bias"] = (spec.out_ch,)
    actual = {k: v.shape for k, v in params.items()}
    if actual != expected:
        missing = sorted(set(expected) - set(actual))
        extra = sorted(set(actual) - set(expected))
        raise CheckpointError(
            f"checkpoint '{path}' does not match a {variant} network: missing {missing[:3]}, unexpected {extra[:3]}")
    return ModelGraph(variant, arch, params, normalization)


def load_checkpoint(path) -> ModelGraph:
    with open(path, 'rb') as f:
        model = decode_checkpoint(f.read(), path)
    logger.info("loaded %r from %s", model, path)
    return model
