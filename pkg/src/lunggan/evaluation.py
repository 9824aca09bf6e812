"""Overlap metrics, segmentation anomaly flags and inference latency."""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .tensor import Tensor

__all__ = [
    "ConfusionCounts",
    "MetricRecord",
    "confusion",
    "dice",
    "iou",
    "anomaly",
    "evaluate_pair",
    "summarize",
    "write_report",
    "benchmark_latency",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _binary(x, what: str) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{what} mask must be binary (values 0/1)")
        arr = arr.astype(bool)
    return arr


def confusion(pred, gt) -> ConfusionCounts:
    """Per-pixel tally with foreground = 1."""
    p, g = _binary(pred, "predicted"), _binary(gt, "ground-truth")
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p)) - tp
    fn = int(np.count_nonzero(g)) - tp
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dice(c: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both masks are empty."""
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def iou(c: ConfusionCounts) -> float:
    """TP / (TP + FP + FN); 1.0 when both masks are empty."""
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def anomaly(c: ConfusionCounts, over_frac: float = 0.10, under_frac: float = 0.10) -> str:
    """Classify a prediction as ``none``, ``over``, ``under`` or ``both``.

    Over-segmentation: false positives exceed ``over_frac`` of the true lung
    area. Under-segmentation: missed lung pixels exceed ``under_frac`` of it.
    """
    area = c.tp + c.fn
    if area == 0:
        raise ValueError("anomaly is undefined for an empty ground-truth mask")
    over = c.fp / area > over_frac
    under = c.fn / area > under_frac
    return {(False, False): "none", (True, False): "over", (False, True): "under", (True, True): "both"}[
        (over, under)]


@dataclass
class MetricRecord:
    id: str
    counts: ConfusionCounts
    dice: float
    iou: float
    anomaly: str
    latency_s: Optional[float] = None


def evaluate_pair(id: str, pred, gt, over_frac: float = 0.10, under_frac: float = 0.10,
                  latency_s: Optional[float] = None) -> MetricRecord:
    c = confusion(pred, gt)
    flag = anomaly(c, over_frac, under_frac) if c.tp + c.fn > 0 else "none"
    return MetricRecord(id, c, dice(c), iou(c), flag, latency_s)


def summarize(records: Sequence[MetricRecord]) -> dict:
    """Per-image averages (not pooled counts) plus anomaly tallies."""
    if not records:
        return {"n": 0}
    d = np.array([r.dice for r in records])
    j = np.array([r.iou for r in records])
    flags = [r.anomaly for r in records]
    return {
        "n": len(records),
        "mean_dice": float(d.mean()),
        "std_dice": float(d.std()),
        "mean_iou": float(j.mean()),
        "std_iou": float(j.std()),
        **{f"n_{k}": flags.count(k) for k in ("none", "over", "under", "both")},
    }


def write_report(records: Sequence[MetricRecord], path) -> dict:
    """Write the per-image CSV followed by a ``#``-prefixed summary block."""
    summary = summarize(records)
    lines = ["id,tp,fp,fn,tn,dice,iou,anomaly,latency_s"]
    for r in records:
        c = r.counts
        lat = "" if r.latency_s is None else f"{r.latency_s:.6f}"
        lines.append(f"{r.id},{c.tp},{c.fp},{c.fn},{c.tn},{r.dice:.4f},{r.iou:.4f},{r.anomaly},{lat}")
    lines.append("")
    lines.append("# summary")
    for k, v in summary.items():
        lines.append(f"# {k}={v:.4f}" if isinstance(v, float) else f"# {k}={v}")
    Path(path).write_text("\n".join(lines) + "\n")
    return summary


def _fits(model, size: tuple[int, int]) -> bool:
    div = model.meta.get("divisor", 1)
    return size[0] % div == 0 and size[1] % div == 0 and min(size) // div >= 4


def benchmark_latency(model, sizes: Iterable, repeats: int = 5, warmup: int = 1,
                      rebuild: Optional[Callable] = None, clock=time.perf_counter) -> list:
    """Median wall time of inference-mode forwards for each (H, W) in ``sizes``.

    ``rebuild(size)`` supplies a model for sizes ``model`` cannot take; without
    it such sizes are skipped and logged. Returns ``[((H, W), seconds), ...]``.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    results = []
    for size in sizes:
        size = (size, size) if isinstance(size, int) else tuple(size)
        m = model
        if not _fits(model, size):
            if rebuild is None:
                logger.warning("skipping %dx%d: not divisible by %d", *size, model.meta.get("divisor", 1))
                continue
            try:
                m = rebuild(size)
            except ValueError as exc:
                logger.warning("skipping %dx%d: %s", *size, exc)
                continue
        c = m.input_shape[0] - (1 if m.meta.get("noise") else 0)
        x = np.random.default_rng(0).random((1, c, *size), dtype=np.float32)
        for _ in range(warmup):
            m.forward(x, mode="infer")
        times = []
        for _ in range(repeats):
            t0 = clock()
            m.forward(x, mode="infer")
            times.append(clock() - t0)
        results.append((size, statistics.median(times)))
    return results
