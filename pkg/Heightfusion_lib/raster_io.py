# Heightfusion_lib/raster_io.py
"""
Tile rasters in a small TIFF subset: classic little-endian, uncompressed,
strip-organised, chunky (interleaved) samples, 1-4 bands of uint8, uint16 or
float32. Also band normalisation and early-fusion channel stacking.
"""
import enum
import logging
import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import RasterFormatError, ShapeError, TruncatedFileError
from .tensor_core import Tensor, concat
from .utils import atomic_write_bytes, is_safe_name, load_data_from_json

logger = logging.getLogger(__name__)


class SampleFormat(enum.Enum):
    UINT8 = ("uint8", 8, 1)
    UINT16 = ("uint16", 16, 1)
    FLOAT32 = ("float32", 32, 3)

    def __init__(self, dtype_name, bits, tiff_code):
        self.dtype = np.dtype(dtype_name).newbyteorder('<')
        self.bits = bits
        self.tiff_code = tiff_code

    @classmethod
    def from_dtype(cls, dtype):
        for fmt in cls:
            if np.dtype(dtype).name == fmt.dtype.name:
                return fmt
        raise RasterFormatError(f"Sample dtype {np.dtype(dtype)} is not one of uint8, uint16, float32")

    @classmethod
    def from_tiff(cls, bits, code):
        for fmt in cls:
            if fmt.bits == bits and fmt.tiff_code == code:
                return fmt
        raise RasterFormatError(
            f"Unsupported sample layout: BitsPerSample={bits}, SampleFormat={code}", tag="SampleFormat (339)")


@dataclass
class RasterTile:
    """Georeference-free image planes, stored as a (bands, height, width) array."""
    name: str
    planes: np.ndarray

    def __post_init__(self):
        if not is_safe_name(self.name):
            raise RasterFormatError(f"Tile name '{self.name}' is empty or not filesystem-safe")
        if self.planes.ndim != 3 or not 1 <= self.planes.shape[0] <= 4:
            raise ShapeError(f"Tile '{self.name}' planes must be (bands 1-4, H, W), got {self.planes.shape}")
        SampleFormat.from_dtype(self.planes.dtype)

    @property
    def bands(self) -> int:
        return self.planes.shape[0]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def sample_format(self) -> SampleFormat:
        return SampleFormat.from_dtype(self.planes.dtype)


# ==============================================================================
# == TIFF SUBSET
# ==============================================================================

# tag ids
IMAGE_WIDTH, IMAGE_LENGTH, BITS_PER_SAMPLE, COMPRESSION = 256, 257, 258, 259
PHOTOMETRIC, STRIP_OFFSETS, SAMPLES_PER_PIXEL, ROWS_PER_STRIP = 262, 273, 277, 278
STRIP_BYTE_COUNTS, PLANAR_CONFIG, PREDICTOR, TILE_WIDTH = 279, 284, 317, 322
EXTRA_SAMPLES, SAMPLE_FORMAT_TAG = 338, 339

_TAG_NAMES = {
    COMPRESSION: "Compression (259)", PLANAR_CONFIG: "PlanarConfiguration (284)",
    PREDICTOR: "Predictor (317)", TILE_WIDTH: "TileWidth (322)",
    SAMPLES_PER_PIXEL: "SamplesPerPixel (277)", BITS_PER_SAMPLE: "BitsPerSample (258)",
}

# TIFF field type -> (struct code, byte size)
_FIELD_TYPES = {1: ("B", 1), 3: ("H", 2), 4: ("I", 4)}
SHORT, LONG = 3, 4


def _read_exact(buf, offset, size, path):
    if offset + size > len(buf):
        raise TruncatedFileError(f"'{path}' is truncated: need bytes [{offset}, {offset + size}) of {len(buf)}")
    return buf[offset:offset + size]


def _parse_ifd(buf, offset, path) -> Dict[int, Tuple[int, ...]]:
    (count,) = struct.unpack('<H', _read_exact(buf, offset, 2, path))
    entries = {}
    for k in range(count):
        raw = _read_exact(buf, offset + 2 + 12 * k, 12, path)
        tag, ftype, n = struct.unpack('<HHI', raw[:8])
        if ftype not in _FIELD_TYPES:
            # only the tags we consume need decodable types
            entries[tag] = ()
            continue
        code, size = _FIELD_TYPES[ftype]
        nbytes = size * n
        data = raw[8:8 + nbytes] if nbytes <= 4 else _read_exact(buf, struct.unpack('<I', raw[8:])[0], nbytes, path)
        entries[tag] = struct.unpack('<' + code * n, data)
    return entries


def _require_tag(entries, tag, path):
    if tag not in entries or not entries[tag]:
        raise RasterFormatError(f"'{path}' lacks required tag {tag}", tag=str(tag))
    return entries[tag]


def read_tiff(path) -> RasterTile:
    """Decode a file in the supported TIFF subset; the tile name is the file stem."""
    with open(path, 'rb') as f:
        buf = f.read()
    head = _read_exact(buf, 0, 8, path)
    if head[:2] != b'II':
        raise RasterFormatError(f"'{path}' is not little-endian TIFF", tag="ByteOrder")
    magic, ifd_offset = struct.unpack('<HI', head[2:])
    if magic != 42:
        raise RasterFormatError(f"'{path}' is not classic TIFF (magic {magic})", tag="Magic")
    entries = _parse_ifd(buf, ifd_offset, path)

    compression = entries.get(COMPRESSION, (1,))[0]
    if compression != 1:
        raise RasterFormatError(
            f"'{path}' uses compression scheme {compression}; only uncompressed data is supported",
            tag=_TAG_NAMES[COMPRESSION])
    if TILE_WIDTH in entries:
        raise RasterFormatError(f"'{path}' is tile-organised; only strips are supported", tag=_TAG_NAMES[TILE_WIDTH])
    if entries.get(PLANAR_CONFIG, (1,))[0] != 1:
        raise RasterFormatError(f"'{path}' uses planar sample layout", tag=_TAG_NAMES[PLANAR_CONFIG])
    if entries.get(PREDICTOR, (1,))[0] != 1:
        raise RasterFormatError(f"'{path}' uses a predictor", tag=_TAG_NAMES[PREDICTOR])

    width = _require_tag(entries, IMAGE_WIDTH, path)[0]
    height = _require_tag(entries, IMAGE_LENGTH, path)[0]
    bands = entries.get(SAMPLES_PER_PIXEL, (1,))[0]
    if not 1 <= bands <= 4:
        raise RasterFormatError(f"'{path}' has {bands} samples per pixel", tag=_TAG_NAMES[SAMPLES_PER_PIXEL])
    bits = entries.get(BITS_PER_SAMPLE, (1,) * bands)
    codes = entries.get(SAMPLE_FORMAT_TAG, (1,) * bands)
    if len(set(bits)) != 1 or len(set(codes)) != 1:
        raise RasterFormatError(f"'{path}' mixes sample formats across bands", tag=_TAG_NAMES[BITS_PER_SAMPLE])
    fmt = SampleFormat.from_tiff(bits[0], codes[0])

    offsets = _require_tag(entries, STRIP_OFFSETS, path)
    counts = _require_tag(entries, STRIP_BYTE_COUNTS, path)
    payload = b''.join(_read_exact(buf, o, n, path) for o, n in zip(offsets, counts))
    expected = width * height * bands * fmt.dtype.itemsize
    if len(payload) < expected:
        raise TruncatedFileError(f"'{path}' holds {len(payload)} sample bytes, expected {expected}")

    pixels = np.frombuffer(payload[:expected], dtype=fmt.dtype).reshape(height, width, bands)
    planes = np.ascontiguousarray(pixels.transpose(2, 0, 1)).astype(fmt.dtype.newbyteorder('='))
    name = os.path.splitext(os.path.basename(path))[0]
    return RasterTile(name=name, planes=planes)


def encode_tiff(tile: RasterTile) -> bytes:
    fmt = tile.sample_format
    bands = tile.bands
    pixel_bytes = np.ascontiguousarray(tile.planes.transpose(1, 2, 0)).astype(fmt.dtype).tobytes()
    photometric = 2 if (bands >= 3 and fmt is SampleFormat.UINT8) else 1
    extra = bands - (3 if photometric == 2 else 1)

    tags: List[Tuple[int, int, Sequence[int]]] = [
        (IMAGE_WIDTH, LONG, [tile.width]),
        (IMAGE_LENGTH, LONG, [tile.height]),
        (BITS_PER_SAMPLE, SHORT, [fmt.bits] * bands),
        (COMPRESSION, SHORT, [1]),
        (PHOTOMETRIC, SHORT, [photometric]),
        (STRIP_OFFSETS, LONG, [0]),
        (SAMPLES_PER_PIXEL, SHORT, [bands]),
        (ROWS_PER_STRIP, LONG, [tile.height]),
        (STRIP_BYTE_COUNTS, LONG, [len(pixel_bytes)]),
        (PLANAR_CONFIG, SHORT, [1]),
    ]
    if extra > 0:
        tags.append((EXTRA_SAMPLES, SHORT, [0] * extra))
    tags.append((SAMPLE_FORMAT_TAG, SHORT, [fmt.tiff_code] * bands))

    ifd_offset = 8
    ifd_size = 2 + 12 * len(tags) + 4
    overflow_offset = ifd_offset + ifd_size
    overflow = b''
    out_of_line = {}
    for tag, ftype, values in tags:
        code, size = _FIELD_TYPES[ftype]
        if size * len(values) > 4:
            out_of_line[tag] = overflow_offset + len(overflow)
            overflow += struct.pack('<' + code * len(values), *values)
            if len(overflow) % 2:
                overflow += b'\0'
    data_offset = overflow_offset + len(overflow)

    ifd = struct.pack('<H', len(tags))
    for tag, ftype, values in tags:
        if tag == STRIP_OFFSETS:
            values = [data_offset]
        code, size = _FIELD_TYPES[ftype]
        if tag in out_of_line:
            field = struct.pack('<I', out_of_line[tag])
        else:
            field = struct.pack('<' + code * len(values), *values).ljust(4, b'\0')
        ifd += struct.pack('<HHI', tag, ftype, len(values)) + field
    ifd += struct.pack('<I', 0)

    return b'II' + struct.pack('<HI', 42, ifd_offset) + ifd + overflow + pixel_bytes


def write_tiff(tile: RasterTile, path):
    """Emit the same TIFF subset read_tiff accepts (atomic write-then-rename)."""
    try:
        atomic_write_bytes(path, encode_tiff(tile))
    except OSError as e:
        raise OSError(f"Could not write TIFF '{path}': {e}") from e
    logger.debug("wrote %s (%d bands, %dx%d, %s)", path, tile.bands, tile.width, tile.height,
                 tile.sample_format.dtype.name)


def height_tile(name: str, heights: np.ndarray) -> RasterTile:
    """Single-band float32 tile, the format height predictions are written in."""
    return RasterTile(name=name, planes=np.asarray(heights, dtype=np.float32).reshape((1,) + heights.shape[-2:]))


def clamp_ndsm(tile: RasterTile) -> RasterTile:
    """Negative nDSM samples are nodata; heights above ground are never below 0."""
    return RasterTile(name=tile.name, planes=np.maximum(tile.planes, 0).astype(tile.planes.dtype))


# ==============================================================================
# == NORMALISATION AND FUSION STACKING
# ==============================================================================

@dataclass(frozen=True)
class NormalizationSpec:
    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ShapeError(f"NormalizationSpec has {len(self.mean)} means but {len(self.std)} stds")
        if any(s <= 0 for s in self.std):
            raise ShapeError(f"NormalizationSpec stds must be positive, got {self.std}")

    @property
    def bands(self) -> int:
        return len(self.mean)


def default_spec(modality: str) -> NormalizationSpec:
    """ImageNet-convention RGB constants or the synthetic-SAR statistics (data/normalization.json)."""
    bank = load_data_from_json('normalization.json')[modality]
    return NormalizationSpec(mean=tuple(bank['mean']), std=tuple(bank['std']))


def band_statistics(tiles: Sequence[RasterTile]) -> NormalizationSpec:
    stacked = np.concatenate([t.planes.reshape(t.bands, -1).astype(np.float64) for t in tiles], axis=1)
    std = stacked.std(axis=1)
    return NormalizationSpec(mean=tuple(stacked.mean(axis=1)), std=tuple(np.where(std > 0, std, 1.0)))


def normalize(tile: RasterTile, spec: NormalizationSpec) -> Tensor:
    if tile.bands != spec.bands:
        raise ShapeError(f"Tile '{tile.name}' has {tile.bands} bands, normalization spec has {spec.bands}")
    mean = np.asarray(spec.mean, dtype=np.float64)[:, None, None]
    std = np.asarray(spec.std, dtype=np.float64)[:, None, None]
    return Tensor(((tile.planes.astype(np.float64) - mean) / std)[None])


def denormalize(x: Tensor, spec: NormalizationSpec) -> np.ndarray:
    """Inverse affine of normalize; returns float64 (bands, H, W) samples."""
    if x.shape[1] != spec.bands:
        raise ShapeError(f"Tensor {x.shape} has {x.shape[1]} channels, normalization spec has {spec.bands}")
    mean = np.asarray(spec.mean)[:, None, None]
    std = np.asarray(spec.std)[:, None, None]
    return x.data[0] * std + mean


def stack_early_fusion(rgb: Tensor, sar: Tensor) -> Tensor:
    """Channel order is fixed: [R, G, B, SAR]."""
    if rgb.ndim != 4 or rgb.shape[1] != 3:
        raise ShapeError(f"early fusion expects a 1x3xHxW RGB tensor, got {rgb.shape}")
    if sar.ndim != 4 or sar.shape[1] != 1:
        raise ShapeError(f"early fusion expects a 1x1xHxW SAR tensor, got {sar.shape}")
    if rgb.shape[2:] != sar.shape[2:] or rgb.shape[0] != sar.shape[0]:
        raise ShapeError(f"early fusion spatial mismatch: RGB {rgb.shape} vs SAR {sar.shape}")
    return concat([rgb, sar], axis=1)


# ==============================================================================
# == DIRECTORY LAYOUT: <split>/rgb|sar|dsm/<name>.tif
# ==============================================================================

MODALITY_DIRS = ('rgb', 'sar', 'dsm')


def tile_path(split_dir, modality, name):
    return os.path.join(split_dir, modality, f"{name}.tif")


def list_tile_names(directory) -> List[str]:
    """Sorted stems of the .tif files directly inside `directory`."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"Directory '{directory}' does not exist")
    return sorted(os.path.splitext(f)[0] for f in os.listdir(directory) if f.endswith('.tif'))
