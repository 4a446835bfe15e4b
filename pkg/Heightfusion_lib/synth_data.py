# Heightfusion_lib/synth_data.py
"""
Procedural RGB / SAR / nDSM / instance-mask scenes.

Buildings are non-overlapping axis-aligned rectangles on a 2-pixel grid.
Roof tone follows height only loosely (each roof is painted for a height
jittered by a few meters), while SAR backscatter rises steeply and exactly
with height under multiplicative speckle, so SAR carries height signal that
RGB lacks.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, PlacementError, ShapeError
from .metrics import InstanceRecord, read_coco_json, write_coco_json
from .raster_io import (MODALITY_DIRS, RasterTile, clamp_ndsm, list_tile_names, read_tiff,
                        tile_path, write_tiff)

logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 200
BUILDING_CATEGORY = 1
INSTANCES_FILE = "instances.json"
FOOTPRINT_GRID = 2

# 8-bit RGB; roof tone runs from ROOF_LOW at the bottom of the height range to ROOF_HIGH at the top
GROUND_RGB = (96.0, 112.0, 82.0)
ROOF_LOW = (150.0, 72.0, 58.0)
ROOF_HIGH = (228.0, 226.0, 236.0)
ROOF_TONE_JITTER = 2.5

# noise-free SAR intensity (linear power)
SAR_GROUND = 0.15
SAR_BUILDING_BASE = 0.3
SAR_PER_METER = 0.05


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    n_buildings: int = 2
    height_range: Tuple[float, float] = (3.0, 60.0)
    speckle_looks: int = 4
    seed: int = 0
    footprint_range: Optional[Tuple[int, int]] = None

    def validate(self):
        if self.size < 16 or self.size % 16:
            raise ConfigError(f"scene size must be a positive multiple of 16, got {self.size}")
        lo, hi = self.height_range
        if not 0 < lo <= hi:
            raise ConfigError(f"height range must be positive and ordered, got {self.height_range}")
        if self.speckle_looks < 1:
            raise ConfigError(f"speckle_looks must be a positive integer, got {self.speckle_looks}")
        if self.n_buildings < 0:
            raise ConfigError(f"n_buildings must be non-negative, got {self.n_buildings}")
        fmin, fmax = self.footprint
        if not 1 <= fmin <= fmax < self.size:
            raise ConfigError(f"footprint range {self.footprint} does not fit a {self.size}px scene")

    @property
    def footprint(self) -> Tuple[int, int]:
        if self.footprint_range is not None:
            return self.footprint_range
        return max(self.size // 4, 2), max(self.size // 2, 2)


@dataclass
class SceneSample:
    """Aligned tiles of one scene; all share width/height and the RGB tile's name."""
    rgb: RasterTile
    sar: Optional[RasterTile] = None
    ndsm: Optional[RasterTile] = None
    instances: List[InstanceRecord] = field(default_factory=list)

    def __post_init__(self):
        shape = (self.rgb.height, self.rgb.width)
        for label, tile in (("SAR", self.sar), ("nDSM", self.ndsm)):
            if tile is not None and (tile.height, tile.width) != shape:
                raise ShapeError(f"{label} tile {tile.name} is {tile.height}x{tile.width}, RGB is {shape[0]}x{shape[1]}")

    @property
    def name(self) -> str:
        return self.rgb.name

    @property
    def heights(self) -> np.ndarray:
        return self.ndsm.planes[0].astype(np.float64)


def sar_intensity_field(heights: np.ndarray) -> np.ndarray:
    """Noise-free backscatter: flat ground level, building returns brighten with height."""
    return np.where(heights > 0, SAR_BUILDING_BASE + SAR_PER_METER * heights, SAR_GROUND)


def roof_tone(height: float, height_range: Tuple[float, float]) -> np.ndarray:
    """RGB roof colour for `height`, linear between ROOF_LOW and ROOF_HIGH over the height range."""
    lo, hi = height_range
    t = 0.0 if hi == lo else float(np.clip((height - lo) / (hi - lo), 0.0, 1.0))
    low = np.asarray(ROOF_LOW)
    return low + t * (np.asarray(ROOF_HIGH) - low)


def _grid_sizes(fmin: int, fmax: int) -> np.ndarray:
    sizes = np.arange(fmin, fmax + 1)
    on_grid = sizes[sizes % FOOTPRINT_GRID == 0]
    return on_grid if on_grid.size else sizes


def _place_footprints(spec: SceneSpec, rng: np.random.Generator) -> List[Tuple[int, int, int, int]]:
    sizes = _grid_sizes(*spec.footprint)
    occupied = np.zeros((spec.size, spec.size), dtype=bool)
    boxes = []
    for k in range(spec.n_buildings):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            h, w = rng.choice(sizes, size=2)
            r = FOOTPRINT_GRID * rng.integers(0, (spec.size - h) // FOOTPRINT_GRID + 1)
            c = FOOTPRINT_GRID * rng.integers(0, (spec.size - w) // FOOTPRINT_GRID + 1)
            # one-pixel street between buildings keeps instances separate
            if not occupied[max(r - 1, 0):r + h + 1, max(c - 1, 0):c + w + 1].any():
                occupied[r:r + h, c:c + w] = True
                boxes.append((int(r), int(c), int(h), int(w)))
                break
        else:
            density = occupied.mean()
            raise PlacementError(
                f"could not place building {k + 1} of {spec.n_buildings} after {MAX_PLACEMENT_ATTEMPTS} attempts: "
                f"density limit reached ({density:.0%} of the scene already built up)")
    return boxes


def generate_scene(spec: SceneSpec, name: Optional[str] = None) -> SceneSample:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    name = name or f"tile_{spec.seed:04d}"
    size = spec.size

    boxes = _place_footprints(spec, rng)
    heights = np.zeros((size, size), dtype=np.float32)
    instances = []
    rgb = np.empty((3, size, size))
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), sigma=2.0) * 40.0
    for b in range(3):
        rgb[b] = GROUND_RGB[b] + texture + rng.normal(0.0, 4.0, (size, size))

    for r, c, h, w in boxes:
        height = np.float32(rng.uniform(*spec.height_range))
        heights[r:r + h, c:c + w] = height
        roof = roof_tone(float(height) + rng.normal(0.0, ROOF_TONE_JITTER), spec.height_range)
        for b in range(3):
            rgb[b, r:r + h, c:c + w] = roof[b] + rng.normal(0.0, 6.0, (h, w))
        mask = np.zeros((size, size), dtype=bool)
        mask[r:r + h, c:c + w] = True
        instances.append(InstanceRecord.from_mask(name, mask, BUILDING_CATEGORY))

    speckle = rng.gamma(shape=spec.speckle_looks, scale=1.0 / spec.speckle_looks, size=(size, size))
    sar = (sar_intensity_field(heights.astype(np.float64)) * speckle).astype(np.float32)

    sample = SceneSample(
        rgb=RasterTile(name, np.clip(np.rint(rgb), 0, 255).astype(np.uint8)),
        sar=RasterTile(name, sar[None]),
        ndsm=RasterTile(name, heights[None]),
        instances=instances,
    )
    logger.debug("generated %s with %d buildings", name, len(boxes))
    return sample


def scene_seeds(seed: int, n_scenes: int) -> List[int]:
    """Independent per-scene seeds derived from one dataset seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n_scenes)]


def generate_dataset(template: SceneSpec, n_scenes: int, seed: int, out_dir=None) -> List[SceneSample]:
    """Generate `n_scenes` scenes; with `out_dir`, also write the split layout and ground-truth JSON."""
    if n_scenes < 1:
        raise ConfigError(f"n_scenes must be positive, got {n_scenes}")
    samples = []
    for k, s in enumerate(scene_seeds(seed, n_scenes)):
        spec = SceneSpec(size=template.size, n_buildings=template.n_buildings, height_range=template.height_range,
                         speckle_looks=template.speckle_looks, seed=s, footprint_range=template.footprint_range)
        samples.append(generate_scene(spec, name=f"tile_{k:04d}"))
    if out_dir is not None:
        save_dataset(samples, out_dir)
    return samples


def save_dataset(samples: List[SceneSample], split_dir):
    for modality in MODALITY_DIRS:
        os.makedirs(os.path.join(split_dir, modality), exist_ok=True)
    records = []
    for sample in samples:
        write_tiff(sample.rgb, tile_path(split_dir, 'rgb', sample.name))
        if sample.sar is not None:
            write_tiff(sample.sar, tile_path(split_dir, 'sar', sample.name))
        if sample.ndsm is not None:
            write_tiff(sample.ndsm, tile_path(split_dir, 'dsm', sample.name))
        records.extend(sample.instances)
    write_coco_json(records, os.path.join(split_dir, INSTANCES_FILE))
    logger.info("wrote %d scenes to %s", len(samples), split_dir)


def _instances_by_image(split_dir) -> dict:
    json_path = os.path.join(split_dir, INSTANCES_FILE)
    by_image = {}
    if os.path.exists(json_path):
        for record in read_coco_json(json_path):
            by_image.setdefault(str(record.image_id), []).append(record)
    return by_image


def load_scene(split_dir, name: str, instances: Optional[List[InstanceRecord]] = None) -> SceneSample:
    """One scene from the split layout; SAR and nDSM are optional, negative nDSM samples are clamped to 0."""
    sar_path, dsm_path = tile_path(split_dir, 'sar', name), tile_path(split_dir, 'dsm', name)
    return SceneSample(
        rgb=read_tiff(tile_path(split_dir, 'rgb', name)),
        sar=read_tiff(sar_path) if os.path.exists(sar_path) else None,
        ndsm=clamp_ndsm(read_tiff(dsm_path)) if os.path.exists(dsm_path) else None,
        instances=list(instances or []),
    )


def load_dataset(split_dir) -> List[SceneSample]:
    """Read every scene named in `<split>/rgb`, with its instances from the split's JSON when present."""
    names = list_tile_names(os.path.join(split_dir, 'rgb'))
    by_image = _instances_by_image(split_dir)
    samples = [load_scene(split_dir, name, by_image.get(name)) for name in names]
    logger.info("loaded %d scenes from %s", len(samples), split_dir)
    return samples


def instances_from_heights(image_id, heights: np.ndarray, min_height: float = 0.0,
                           category_id: int = BUILDING_CATEGORY, scored: bool = False) -> List[InstanceRecord]:
    """
    4-connected components of `heights > min_height`, one instance each.
    With `scored`, each instance carries the fraction of its pixels that clear
    min_height + 1 m, a confidence that grows with how far the roof stands out.
    """
    above = np.asarray(heights) > min_height
    labels, count = ndimage.label(above)
    records = []
    for k in range(1, count + 1):
        mask = labels == k
        score = float(np.mean(np.asarray(heights)[mask] > min_height + 1.0)) if scored else None
        records.append(InstanceRecord.from_mask(image_id, mask, category_id, score))
    return records

