"""Affine-invariant depth evaluation: delta1/AbsRel, aggregation, ranking.

Predictions are least-squares aligned to the ground truth per image before
either metric is computed, so any positive affine transform of a prediction
scores identically. Dataset aggregates are unweighted means of per-image
values over non-degenerate images.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DataError, DegenerateInputError, ShapeError
from .losses import align_lsq
from .tensor import Tensor, resize_bilinear

DELTA1_THRESHOLD = 1.25
CLAMP_FLOOR = 1e-6
SPACES = ("depth", "disparity")
METRIC_KEYS = ("delta1", "absrel")


@dataclass
class DepthMap:
    """Single-channel raster with validity mask and space tag."""

    values: np.ndarray
    valid: np.ndarray
    space: str = "depth"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or v.shape[0] != 1:
            raise ShapeError(f"DepthMap: values must be (1, H, W), got {v.shape}")
        m = np.asarray(self.valid).astype(bool)
        if m.ndim == 2:
            m = m[None]
        if m.shape != v.shape:
            raise ShapeError(f"DepthMap: mask {m.shape} does not match values {v.shape}")
        if self.space not in SPACES:
            raise ShapeError(f"DepthMap: unknown space {self.space!r}")
        if m.any() and not np.isfinite(v[m]).all():
            raise ShapeError("DepthMap: non-finite values marked valid")
        self.values = v
        self.valid = m

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape[1:]

    def resized(self, hw: tuple[int, int]) -> "DepthMap":
        """Bilinear resize of values; the mask is resampled nearest-neighbor."""
        if self.resolution == tuple(hw):
            return self
        vals = resize_bilinear(Tensor(np.where(self.valid, self.values, 0.0)), hw).data
        ys = np.clip(((np.arange(hw[0]) + 0.5) * self.values.shape[1] / hw[0] - 0.5)
                     .round().astype(int), 0, self.values.shape[1] - 1)
        xs = np.clip(((np.arange(hw[1]) + 0.5) * self.values.shape[2] / hw[1] - 0.5)
                     .round().astype(int), 0, self.values.shape[2] - 1)
        mask = self.valid[:, ys][:, :, xs]
        return DepthMap(values=vals, valid=mask, space=self.space)


class ImageMetrics(NamedTuple):
    delta1: float
    absrel: float
    degenerate: bool
    n_valid: int


@dataclass
class ImageRecord:
    image_id: str
    delta1: float
    absrel: float
    n_valid: int
    degenerate: bool
    category: str | None = None


@dataclass
class MetricReport:
    method: str
    dataset: str
    per_image: list[ImageRecord]
    aggregate_delta1: float
    aggregate_absrel: float


def compute_metrics(gt: DepthMap, pred: DepthMap, *, align: bool = True) -> ImageMetrics:
    """delta1 and AbsRel of a prediction against ground truth.

    The prediction is least-squares aligned to the GT over the joint validity
    mask (unless ``align=False`` for raw comparisons), aligned values are
    floored at 1e-6, and pixels whose pre-clamp aligned value is <= 0 count as
    delta1 failures. A degenerate (constant) prediction falls back to the
    constant-mean alignment and is flagged.
    """
    if gt.resolution != pred.resolution:
        raise ShapeError(
            f"compute_metrics: resolutions differ, {gt.resolution} vs {pred.resolution}"
            " (resize the prediction first)")
    joint = gt.valid & pred.valid
    n = int(joint.sum())
    if n < 2:
        raise DegenerateInputError(
            f"compute_metrics: joint validity mask has {n} pixels")

    degenerate = False
    if align:
        res = align_lsq(gt.values, pred.values, joint)
        aligned = res.aligned.data
        degenerate = res.degenerate
    else:
        aligned = pred.values

    g = gt.values[joint]
    raw = aligned[joint]
    a = np.maximum(raw, CLAMP_FLOOR)
    absrel = float(np.mean(np.abs(g - a) / g))
    ratio = np.maximum(a / g, g / a)
    delta1 = float(np.mean((ratio < DELTA1_THRESHOLD) & (raw > 0)))
    return ImageMetrics(delta1=delta1, absrel=absrel, degenerate=degenerate, n_valid=n)


def build_report(method: str, dataset: str,
                 records: Sequence[ImageRecord]) -> MetricReport:
    ok = [r for r in records if not r.degenerate]
    d1 = float(np.mean([r.delta1 for r in ok])) if ok else float("nan")
    ar = float(np.mean([r.absrel for r in ok])) if ok else float("nan")
    return MetricReport(method=method, dataset=dataset, per_image=list(records),
                        aggregate_delta1=d1, aggregate_absrel=ar)


def evaluate_dataset(manifest, predictions: Mapping[str, DepthMap], method: str,
                     *, jobs: int = 1) -> MetricReport:
    """Evaluate a prediction set against every manifest entry.

    ``predictions`` maps image id to DepthMap (already in the manifest's
    space); predictions are resized to the GT resolution. Missing predictions
    are all enumerated in one error. Image order and therefore the report is
    independent of ``jobs``.
    """
    from .io.manifest import load_entry_gt

    if not manifest.entries:
        raise DataError(f"manifest {manifest.dataset!r} has no entries")
    missing = [e.image_id for e in manifest.entries if e.image_id not in predictions]
    if missing:
        raise DataError(
            f"missing predictions for {len(missing)} image(s): {', '.join(missing)}")

    def one(entry) -> ImageRecord:
        gt = load_entry_gt(manifest, entry)
        pred = predictions[entry.image_id].resized(gt.resolution)
        m = compute_metrics(gt, pred)
        return ImageRecord(image_id=entry.image_id, delta1=m.delta1,
                           absrel=m.absrel, n_valid=m.n_valid,
                           degenerate=m.degenerate, category=entry.category)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(one, manifest.entries))
    else:
        records = [one(e) for e in manifest.entries]
    return build_report(method, manifest.dataset, records)


# ---------------------------------------------------------------------------
# rank aggregation
# ---------------------------------------------------------------------------

@dataclass
class MethodRanking:
    methods: list[str]
    columns: list[tuple[str, str]]
    ranks: np.ndarray            # methods x columns
    average_rank: dict[str, float] = field(default_factory=dict)


def _rank_column(values: np.ndarray, higher_better: bool, ties: str) -> np.ndarray:
    key = -values if higher_better else values
    ranks = np.empty(len(key), dtype=np.float64)
    for i, k in enumerate(key):
        better = int((key < k).sum())
        if ties == "min":
            ranks[i] = better + 1
        else:
            equal = int((key == k).sum())
            ranks[i] = better + (equal + 1) / 2.0
    return ranks


def average_rank(scores: Mapping[str, Mapping[tuple[str, str], float]],
                 *, ties: str = "min") -> MethodRanking:
    """Rank methods per (dataset, metric) column and average across columns.

    Rank 1 is best: delta1 descending, absrel ascending. ``ties`` selects
    competition ranking (``min``, tied methods share the best tied position)
    or ``average`` (tied methods share the mean of the tied positions). The
    grid must be complete.
    """
    if ties not in ("min", "average"):
        raise ShapeError(f"average_rank: unknown tie policy {ties!r}")
    methods = list(scores)
    if not methods:
        raise DataError("average_rank: no methods")
    columns = sorted({col for m in methods for col in scores[m]})
    if not columns:
        raise DataError("average_rank: no score columns")
    for m in methods:
        for col in columns:
            if col not in scores[m]:
                raise DataError(f"average_rank: method {m!r} missing column {col}")
    for _, metric in columns:
        if metric not in METRIC_KEYS:
            raise DataError(f"average_rank: unknown metric {metric!r}")

    ranks = np.empty((len(methods), len(columns)), dtype=np.float64)
    for j, col in enumerate(columns):
        vals = np.array([float(scores[m][col]) for m in methods])
        ranks[:, j] = _rank_column(vals, higher_better=col[1] == "delta1", ties=ties)
    avg = {m: float(ranks[i].mean()) for i, m in enumerate(methods)}
    return MethodRanking(methods=methods, columns=columns, ranks=ranks,
                         average_rank=avg)


# ---------------------------------------------------------------------------
# per-category robustness statistics
# ---------------------------------------------------------------------------

@dataclass
class CategoryStats:
    category: str
    count: int
    median: float
    q1: float
    q3: float
    iqr: float
    whisker_lo: float
    whisker_hi: float
    outlier_ids: list[str]
    outlier_values: list[float]


def category_stats(report: MetricReport, *, metric: str = "delta1") -> list[CategoryStats]:
    """Boxplot statistics (median, quartiles, 1.5 IQR whiskers, outliers) of a
    per-image metric, grouped by category. Quartiles use linear interpolation
    between order statistics."""
    if metric not in METRIC_KEYS:
        raise DataError(f"category_stats: unknown metric {metric!r}")
    groups: dict[str, list[ImageRecord]] = {}
    for rec in report.per_image:
        if rec.category is not None:
            groups.setdefault(rec.category, []).append(rec)
    if not groups:
        raise DataError("category_stats: report carries no categories")

    out = []
    for cat in sorted(groups):
        recs = groups[cat]
        vals = np.array([getattr(r, metric) for r in recs], dtype=np.float64)
        q1, med, q3 = np.percentile(vals, [25.0, 50.0, 75.0])
        iqr = q3 - q1
        lo_lim, hi_lim = q1 - 1.5 * iqr, q3 + 1.5 * iqr
        inliers = vals[(vals >= lo_lim) & (vals <= hi_lim)]
        whisker_lo = float(inliers.min()) if inliers.size else float(q1)
        whisker_hi = float(inliers.max()) if inliers.size else float(q3)
        outliers = [(r.image_id, float(v)) for r, v in zip(recs, vals)
                    if v < lo_lim or v > hi_lim]
        out.append(CategoryStats(
            category=cat, count=len(recs), median=float(med), q1=float(q1),
            q3=float(q3), iqr=float(iqr), whisker_lo=whisker_lo,
            whisker_hi=whisker_hi, outlier_ids=[i for i, _ in outliers],
            outlier_values=[v for _, v in outliers]))
    return out
