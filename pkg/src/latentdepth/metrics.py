"""Standard monocular depth metrics over valid pixels."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .depth_codec import DepthMap
from .errors import DataError, DimensionError


@dataclass
class MetricsReport:
    abs_rel: float
    rmse: float
    delta1: float
    delta2: float
    delta3: float
    valid_pixel_count: int

    def as_dict(self) -> dict:
        return asdict(self)


def _valid_values(pred: DepthMap, gt: DepthMap, max_depth: float | None):
    if pred.values.shape != gt.values.shape:
        raise DimensionError(
            f"prediction shape {pred.values.shape} != ground truth shape {gt.values.shape}"
        )
    mask = gt.valid_mask & (gt.values > 0)
    if max_depth is not None:
        mask &= gt.values <= max_depth
    if not mask.any():
        raise DataError("no valid pixels to evaluate")
    return (
        pred.values[mask].astype(np.float64),
        gt.values[mask].astype(np.float64),
        int(mask.sum()),
    )


def abs_rel(pred: DepthMap, gt: DepthMap, max_depth: float | None = None) -> float:
    """Mean over valid pixels of |pred - gt| / gt."""
    p, g, _ = _valid_values(pred, gt, max_depth)
    return float(np.mean(np.abs(p - g) / g))


def rmse(pred: DepthMap, gt: DepthMap, max_depth: float | None = None) -> float:
    p, g, _ = _valid_values(pred, gt, max_depth)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def delta_acc(pred: DepthMap, gt: DepthMap, k: int, max_depth: float | None = None) -> float:
    """Fraction of valid pixels with max(pred/gt, gt/pred) < 1.25^k."""
    if k not in (1, 2, 3):
        raise DataError(f"delta exponent must be 1, 2 or 3, got {k}")
    p, g, _ = _valid_values(pred, gt, max_depth)
    ratio = np.maximum(p / g, g / p)
    return float(np.mean(ratio < 1.25**k))


def compute_report(pred: DepthMap, gt: DepthMap, max_depth: float | None = None) -> MetricsReport:
    p, g, count = _valid_values(pred, gt, max_depth)
    ratio = np.maximum(p / g, g / p)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        valid_pixel_count=count,
    )


def aggregate_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Unweighted mean of per-image metrics; pixel counts are summed."""
    if not reports:
        raise DataError("no reports to aggregate")
    return MetricsReport(
        abs_rel=float(np.mean([r.abs_rel for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        delta1=float(np.mean([r.delta1 for r in reports])),
        delta2=float(np.mean([r.delta2 for r in reports])),
        delta3=float(np.mean([r.delta3 for r in reports])),
        valid_pixel_count=int(sum(r.valid_pixel_count for r in reports)),
    )
