# Heightfusion_lib/metrics.py
"""
Contest evaluation: threshold accuracy (delta1), RMSE, MAE, R2, mask IoU,
COCO-style AP at IoU 0.5 and the combined score (AP50 + delta1) / 2.
Everything here is a pure function of its inputs.
"""
import json
import logging
import math
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import MetricError
from .utils import atomic_write_text

logger = logging.getLogger(__name__)

DELTA1_THRESHOLD = 1.25
FLOOR_EPS = 1.0
AP_IOU_THRESHOLD = 0.5
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
DEFAULT_BAND_EDGES = (0.0, 1.0, 10.0, 20.0, 40.0, math.inf)
REPORT_KEYS = ("delta1", "rmse", "mae", "r2", "ap50", "combined_score")


# ==============================================================================
# == HEIGHT METRICS
# ==============================================================================

def _as_pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise MetricError(f"prediction shape {p.shape} does not match reference shape {g.shape}")
    if p.size == 0:
        raise MetricError("height metrics need at least one pixel")
    if not (np.isfinite(p).all() and np.isfinite(g).all()):
        raise MetricError("height planes contain NaN or Inf samples")
    return p, g


def delta1(pred, gt, threshold: float = DELTA1_THRESHOLD, floor_eps: float = FLOOR_EPS) -> Tuple[float, int, int]:
    """
    Fraction of all pixels with max(y'/p', p'/y') < threshold, where
    p' = max(max(pred, 0), floor_eps) and y' = max(gt, floor_eps).

    Returns (fraction, n_valid, n_total); n_valid counts the pixels whose
    ratio was formed without flooring either operand.
    """
    if threshold <= 1.0:
        raise MetricError(f"delta1 threshold must exceed 1, got {threshold}")
    p, g = _as_pair(pred, gt)
    p_clamped = np.maximum(p, 0.0)
    p_f = np.maximum(p_clamped, floor_eps)
    g_f = np.maximum(g, floor_eps)
    ratio = np.maximum(g_f / p_f, p_f / g_f)
    n_correct = int(np.count_nonzero(ratio < threshold))
    n_valid = int(np.count_nonzero((p_clamped >= floor_eps) & (g >= floor_eps)))
    return n_correct / p.size, n_valid, int(p.size)


def rmse(pred, gt) -> float:
    p, g = _as_pair(pred, gt)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def mae(pred, gt) -> float:
    p, g = _as_pair(pred, gt)
    return float(np.mean(np.abs(p - g)))


def r2(pred, gt) -> float:
    p, g = _as_pair(pred, gt)
    ss_tot = float(np.sum((g - g.mean()) ** 2))
    if ss_tot == 0.0:
        raise MetricError("R2 is undefined: the reference heights have zero variance")
    ss_res = float(np.sum((g - p) ** 2))
    return 1.0 - ss_res / ss_tot


@dataclass
class BandBias:
    low: float
    high: float
    n_pixels: int
    mean_error: Optional[float]


def height_bias_by_band(pred, gt, edges: Sequence[float] = DEFAULT_BAND_EDGES) -> List[BandBias]:
    """Mean signed error (pred - gt) per reference-height band [low, high)."""
    p, g = _as_pair(pred, gt)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise MetricError(f"band edges must be strictly increasing, got {edges}")
    bands = []
    for low, high in zip(edges, edges[1:]):
        sel = (g >= low) & (g < high)
        n = int(np.count_nonzero(sel))
        bands.append(BandBias(low, high, n, float(np.mean(p[sel] - g[sel])) if n else None))
    return bands


@dataclass
class HeightMetricsReport:
    delta1: float
    rmse: float
    mae: float
    r2: Optional[float]
    n_total: int
    n_valid: int
    bias_by_band: List[BandBias] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.delta1 <= 1.0 or self.n_valid > self.n_total:
            raise MetricError(f"inconsistent height report: {self}")


def evaluate_heights(pred, gt, threshold: float = DELTA1_THRESHOLD, floor_eps: float = FLOOR_EPS) -> HeightMetricsReport:
    """
    All height metrics over every pixel of `pred` / `gt` (any matching shape).
    R2 is left as None when the reference is constant, e.g. a building-free split.
    """
    d1, n_valid, n_total = delta1(pred, gt, threshold, floor_eps)
    try:
        r2_value = r2(pred, gt)
    except MetricError as e:
        logger.warning("%s; reporting r2 as nan", e)
        r2_value = None
    return HeightMetricsReport(delta1=d1, rmse=rmse(pred, gt), mae=mae(pred, gt), r2=r2_value,
                               n_total=n_total, n_valid=n_valid, bias_by_band=height_bias_by_band(pred, gt))


# ==============================================================================
# == INSTANCE MASKS (row-major RLE)
# ==============================================================================

@dataclass
class InstanceRecord:
    """One instance mask. `counts` alternate background/foreground runs, starting with background."""
    image_id: Union[str, int]
    category_id: int
    size: Tuple[int, int]
    counts: Tuple[int, ...]
    score: Optional[float] = None

    def __post_init__(self):
        self.size = (int(self.size[0]), int(self.size[1]))
        self.counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in self.counts):
            raise MetricError(f"negative RLE run in instance of image {self.image_id}")
        if sum(self.counts) != self.size[0] * self.size[1]:
            raise MetricError(
                f"RLE runs of image {self.image_id} sum to {sum(self.counts)}, expected {self.size[0]}x{self.size[1]}")

    @classmethod
    def from_mask(cls, image_id, mask: np.ndarray, category_id: int = 1, score: Optional[float] = None):
        return cls(image_id, category_id, mask.shape, encode_rle(mask), score)

    def to_mask(self) -> np.ndarray:
        return decode_rle(self.counts, self.size)

    @property
    def area(self) -> int:
        return sum(self.counts[1::2])


def encode_rle(mask: np.ndarray) -> Tuple[int, ...]:
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return tuple(runs)


def decode_rle(counts: Sequence[int], size: Tuple[int, int]) -> np.ndarray:
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(size)


def mask_iou(a: InstanceRecord, b: InstanceRecord) -> float:
    if a.size != b.size:
        raise MetricError(f"mask sizes differ: {a.size} vs {b.size}")
    ma, mb = a.to_mask(), b.to_mask()
    union = int(np.count_nonzero(ma | mb))
    if union == 0:
        raise MetricError(f"IoU undefined: both masks of image {a.image_id} are empty")
    return int(np.count_nonzero(ma & mb)) / union


# ==============================================================================
# == AP50
# ==============================================================================

@dataclass
class Match:
    prediction: int
    ground_truth: Optional[int]
    iou: float


@dataclass
class APReport:
    ap50: float
    precision: Dict[int, np.ndarray]
    recall: Dict[int, np.ndarray]
    matches: Dict[Union[str, int], List[Match]]

    def __post_init__(self):
        for cat in self.precision:
            p, r = self.precision[cat], self.recall[cat]
            if p.size and (p.min() < 0 or p.max() > 1 or r.min() < 0 or r.max() > 1 or np.any(np.diff(r) < 0)):
                raise MetricError(f"invalid precision/recall sweep for category {cat}")


def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """Mean of the interpolated precision at the 101 COCO recall points."""
    if precision.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_THRESHOLDS, side='left')
    q = np.where(idx < envelope.size, envelope[np.minimum(idx, envelope.size - 1)], 0.0)
    return float(q.mean())


def ap50(predictions: Sequence[InstanceRecord], ground_truths: Sequence[InstanceRecord],
         iou_threshold: float = AP_IOU_THRESHOLD) -> APReport:
    """
    COCO-style mask AP at one IoU threshold. Predictions are swept by descending
    score (ties keep input order); each one greedily takes the unmatched
    ground truth of its image with the highest IoU, if that IoU reaches the
    threshold. AP is averaged over categories that have ground truth.
    """
    for k, pr in enumerate(predictions):
        if pr.score is None or not 0.0 <= pr.score <= 1.0:
            raise MetricError(f"prediction {k} of image {pr.image_id} has score {pr.score} outside [0, 1]")
    if not ground_truths:
        raise MetricError("AP50 is undefined without ground-truth instances")

    gt_index = defaultdict(list)
    for j, g in enumerate(ground_truths):
        gt_index[(g.image_id, g.category_id)].append(j)
    gt_masks = [g.to_mask() for g in ground_truths]

    categories = sorted({g.category_id for g in ground_truths})
    precision, recall = {}, {}
    matches: Dict[Union[str, int], List[Match]] = OrderedDict()
    aps = []
    for cat in categories:
        n_gt = sum(len(v) for (img, c), v in gt_index.items() if c == cat)
        order = sorted((i for i, p in enumerate(predictions) if p.category_id == cat),
                       key=lambda i: -predictions[i].score)
        taken = set()
        tp = np.zeros(len(order))
        for rank, i in enumerate(order):
            pr = predictions[i]
            pm = pr.to_mask()
            best_iou, best_j = -1.0, None
            for j in gt_index.get((pr.image_id, cat), []):
                if j in taken:
                    continue
                if ground_truths[j].size != pr.size:
                    raise MetricError(f"mask sizes differ in image {pr.image_id}: {pr.size} vs {ground_truths[j].size}")
                union = np.count_nonzero(pm | gt_masks[j])
                iou = np.count_nonzero(pm & gt_masks[j]) / union if union else 0.0
                if iou > best_iou:
                    best_iou, best_j = iou, j
            if best_j is not None and best_iou >= iou_threshold:
                taken.add(best_j)
                tp[rank] = 1.0
                matches.setdefault(pr.image_id, []).append(Match(i, best_j, best_iou))
            else:
                matches.setdefault(pr.image_id, []).append(Match(i, None, max(best_iou, 0.0)))
        tp_cum = np.cumsum(tp)
        fp_cum = np.cumsum(1.0 - tp)
        recall[cat] = tp_cum / n_gt
        precision[cat] = tp_cum / (tp_cum + fp_cum)
        aps.append(interpolated_ap(precision[cat], recall[cat]))

    report = APReport(ap50=float(np.mean(aps)), precision=precision, recall=recall, matches=matches)
    logger.debug("AP50 %.4f over %d predictions / %d ground truths", report.ap50, len(predictions), len(ground_truths))
    return report


def combined_score(ap50_value: float, delta1_value: float) -> float:
    """(AP50 + delta1) / 2."""
    for label, v in (("ap50", ap50_value), ("delta1", delta1_value)):
        if not 0.0 <= v <= 1.0:
            raise MetricError(f"{label} must lie in [0, 1], got {v}")
    return (ap50_value + delta1_value) / 2.0


# ==============================================================================
# == FILES: COCO-style JSON and key: value reports
# ==============================================================================

def _record_to_json(r: InstanceRecord) -> dict:
    obj = OrderedDict([("image_id", r.image_id), ("category_id", r.category_id),
                       ("segmentation", {"size": list(r.size), "counts": list(r.counts)})])
    if r.score is not None:
        obj["score"] = r.score
    return obj


def write_coco_json(records: Sequence[InstanceRecord], path):
    atomic_write_text(path, json.dumps([_record_to_json(r) for r in records], indent=1) + "\n")


def read_coco_json(path) -> List[InstanceRecord]:
    """Array of {image_id, category_id, segmentation: {size, counts}, score?}; a COCO dict with
    an 'annotations' list is accepted too. Polygon segmentations are not supported."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise MetricError(f"malformed JSON in '{path}': {e}")
    if isinstance(payload, dict):
        payload = payload.get("annotations")
    if not isinstance(payload, list):
        raise MetricError(f"'{path}' must hold a JSON array of instance records")
    records = []
    for k, obj in enumerate(payload):
        try:
            seg = obj["segmentation"]
            if not isinstance(seg, dict) or not isinstance(seg.get("counts"), list):
                raise MetricError(f"record {k} of '{path}' is not an uncompressed RLE segmentation")
            score = obj.get("score")
            records.append(InstanceRecord(image_id=obj["image_id"], category_id=int(obj.get("category_id", 1)),
                                          size=tuple(seg["size"]), counts=tuple(seg["counts"]),
                                          score=None if score is None else float(score)))
        except (KeyError, TypeError, ValueError) as e:
            raise MetricError(f"malformed record {k} in '{path}': {e!r}")
    return records


@dataclass
class EvalReport:
    """The six report keys; metrics a command did not compute stay None (written as nan)."""
    delta1: Optional[float] = None
    rmse: Optional[float] = None
    mae: Optional[float] = None
    r2: Optional[float] = None
    ap50: Optional[float] = None
    combined_score: Optional[float] = None
    details: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_height(cls, h: HeightMetricsReport) -> "EvalReport":
        return cls(delta1=h.delta1, rmse=h.rmse, mae=h.mae, r2=h.r2,
                   details={"n_total": h.n_total, "n_valid": h.n_valid,
                            "bias_by_band": [_band_json(b) for b in h.bias_by_band]})

    def merged(self, other: "EvalReport") -> "EvalReport":
        values = {k: getattr(self, k) if getattr(self, k) is not None else getattr(other, k) for k in REPORT_KEYS}
        out = EvalReport(**values, details={**other.details, **self.details})
        if out.ap50 is not None and out.delta1 is not None:
            out.combined_score = combined_score(out.ap50, out.delta1)
        return out


def write_report(report: EvalReport, path, json_path=None):
    lines = []
    for key in REPORT_KEYS:
        value = getattr(report, key)
        lines.append(f"{key}: {'nan' if value is None else repr(float(value))}")
    atomic_write_text(path, "\n".join(lines) + "\n")
    if json_path:
        payload = {key: getattr(report, key) for key in REPORT_KEYS}
        payload["details"] = report.details
        atomic_write_text(json_path, json.dumps(payload, indent=2) + "\n")


def _band_json(b: BandBias) -> dict:
    # JSON has no infinity; an open upper band is written as null
    return {"low": b.low, "high": None if math.isinf(b.high) else b.high,
            "n_pixels": b.n_pixels, "mean_error": b.mean_error}


def read_report(path) -> EvalReport:
    values = {}
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            key, sep, raw = line.partition(":")
            if not sep or key.strip() not in REPORT_KEYS:
                raise MetricError(f"'{path}' line {lineno} is not a report entry: {line!r}")
            try:
                value = float(raw)
            except ValueError:
                raise MetricError(f"'{path}' line {lineno}: {raw.strip()!r} is not a number")
            values[key.strip()] = None if math.isnan(value) else value
    return EvalReport(**values)
