"""Corner, edge and region precision / recall / F1 for predicted building graphs."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .geometry import PlanarGraph
from .planar import extract_regions, rasterize_polygon
from .trainer import assign_detected_corners

CLASSES = ("corner", "edge", "region")
RASTER_SIZE = 512
SWEEP_THRESHOLDS = tuple(round(0.10 + 0.05 * k, 2) for k in range(15))


@dataclass(frozen=True)
class MatchConfig:
    corner_radius: float = 8.0
    region_iou: float = 0.7
    threshold: float = 0.5
    image_size: int = 64

    def __post_init__(self):
        if not self.corner_radius > 0:
            raise ValueError("corner_radius must be positive")
        if not 0 < self.region_iou <= 1:
            raise ValueError("region_iou must lie in (0, 1]")
        if not 0 <= self.threshold <= 1:
            raise ValueError("threshold must lie in [0, 1]")
        if self.image_size < 1:
            raise ValueError("image_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MatchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown match config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "fn": self.fn}


@dataclass
class MetricReport:
    threshold: float
    corner: Counts = field(default_factory=Counts)
    edge: Counts = field(default_factory=Counts)
    region: Counts = field(default_factory=Counts)

    def __add__(self, other: "MetricReport") -> "MetricReport":
        return MetricReport(self.threshold, self.corner + other.corner, self.edge + other.edge,
                            self.region + other.region)

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, **{c: getattr(self, c).to_dict() for c in CLASSES}}

    def to_json(self, cfg: MatchConfig | None = None) -> str:
        d = self.to_dict()
        if cfg is not None:
            d["match_config"] = cfg.to_dict()
        return json.dumps(d, indent=1)

    def table(self) -> str:
        """Aligned text table: corner / edge / region, each as precision, recall, F1 (percent)."""
        head = f"{'':>10}" + "".join(f"{c:>24}" for c in CLASSES)
        sub = f"{'':>10}" + "".join(f"{'prec':>8}{'recall':>8}{'f1':>8}" for _ in CLASSES)
        row = f"{self.threshold:>10.2f}" + "".join(
            f"{100 * x.precision:8.1f}{100 * x.recall:8.1f}{100 * x.f1:8.1f}"
            for x in (self.corner, self.edge, self.region)
        )
        return "\n".join([head, sub, row])


def kept_graph(pred: PlanarGraph, threshold: float) -> PlanarGraph:
    """Edges with confidence >= threshold, then only corners that still have an edge."""
    conf = pred.confidences if pred.confidences is not None else [1.0] * len(pred.edges)
    edges = [e for e, c in zip(pred.edges, conf) if c >= threshold]
    used = sorted({v for e in edges for v in e})
    index = {v: k for k, v in enumerate(used)}
    return PlanarGraph([pred.corners[v] for v in used], [(index[i], index[j]) for i, j in edges])


def region_masks(graph: PlanarGraph, image_size: int) -> list[np.ndarray]:
    scale = RASTER_SIZE / image_size
    return [rasterize_polygon(r.boundary, RASTER_SIZE, scale) for r in extract_regions(graph)]


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def match_regions(pred_masks: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray], min_iou: float) -> int:
    """Number of one-to-one matches taken in order of decreasing IoU, each >= min_iou."""
    pairs = []
    for i, a in enumerate(pred_masks):
        for j, b in enumerate(gt_masks):
            v = iou(a, b)
            if v >= min_iou:
                pairs.append((-v, i, j))
    pairs.sort()
    used_p, used_g = set(), set()
    for _, i, j in pairs:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
    return len(used_p)


def evaluate(pred: PlanarGraph, gt: PlanarGraph, cfg: MatchConfig = MatchConfig(),
             gt_masks: list[np.ndarray] | None = None) -> MetricReport:
    """Metrics of ``pred`` (thresholded at ``cfg.threshold``) against ``gt``."""
    kept = kept_graph(pred, cfg.threshold)
    match = assign_detected_corners(kept.corners, gt.corners, cfg.corner_radius)
    corner_tp = sum(m is not None for m in match)
    corner = Counts(corner_tp, len(kept.corners) - corner_tp, len(gt.corners) - corner_tp)

    gt_edges = gt.edge_set()
    edge_tp = 0
    for i, j in kept.edges:
        a, b = match[i], match[j]
        if a is not None and b is not None and (min(a, b), max(a, b)) in gt_edges:
            edge_tp += 1
    edge = Counts(edge_tp, len(kept.edges) - edge_tp, len(gt_edges) - edge_tp)

    if gt_masks is None:
        gt_masks = region_masks(gt, cfg.image_size)
    pred_masks = region_masks(kept, cfg.image_size)
    region_tp = match_regions(pred_masks, gt_masks, cfg.region_iou)
    region = Counts(region_tp, len(pred_masks) - region_tp, len(gt_masks) - region_tp)
    return MetricReport(cfg.threshold, corner, edge, region)


def pr_sweep(pred: PlanarGraph, gt: PlanarGraph, cfg: MatchConfig = MatchConfig(),
             thresholds: Sequence[float] = SWEEP_THRESHOLDS) -> list[MetricReport]:
    gt_masks = region_masks(gt, cfg.image_size)
    return [evaluate(pred, gt, _with_threshold(cfg, t), gt_masks) for t in thresholds]


def evaluate_corpus(preds: Sequence[PlanarGraph], gts: Sequence[PlanarGraph],
                    cfg: MatchConfig = MatchConfig()) -> MetricReport:
    """Micro-average: counts are summed over records before rates are taken."""
    total = MetricReport(cfg.threshold)
    for p, g in zip(preds, gts, strict=True):
        total = total + evaluate(p, g, cfg)
    return total


def sweep_corpus(preds: Sequence[PlanarGraph], gts: Sequence[PlanarGraph], cfg: MatchConfig = MatchConfig(),
                 thresholds: Sequence[float] = SWEEP_THRESHOLDS) -> list[MetricReport]:
    totals = [MetricReport(t) for t in thresholds]
    for p, g in zip(preds, gts, strict=True):
        totals = [a + b for a, b in zip(totals, pr_sweep(p, g, cfg, thresholds))]
    return totals


def sweep_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "class", "precision", "recall"])
    for r in reports:
        for c in CLASSES:
            x = getattr(r, c)
            w.writerow([f"{r.threshold:.2f}", c, f"{x.precision:.6f}", f"{x.recall:.6f}"])
    return buf.getvalue()


def _with_threshold(cfg: MatchConfig, t: float) -> MatchConfig:
    return MatchConfig(cfg.corner_radius, cfg.region_iou, t, cfg.image_size)
