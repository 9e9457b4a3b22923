"""Combining two prediction sets: pixel-wise averaging and a per-image oracle.

Averaging only makes sense after both predictions are expressed on the same
affine scale, so :func:`pixel_average` first aligns each input to the supplied
ground-truth reference. The oracle picks, image by image, the method with the
better metric; its aggregate is an upper bound on either input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .losses import align_lsq
from .metrics import DepthMap, ImageRecord, MetricReport, build_report


@dataclass
class OracleSelection:
    report: MetricReport
    fraction_a: float            # percent of images taken from method a
    fraction_b: float
    chosen: dict[str, str]       # image id -> source method name


def align_to_reference(pred: DepthMap, reference: DepthMap) -> DepthMap:
    """Least-squares align a prediction to the reference over the joint mask."""
    pred = pred.resized(reference.resolution)
    joint = pred.valid & reference.valid
    if joint.sum() < 2:
        raise DataError("align_to_reference: no joint valid pixels with reference")
    res = align_lsq(reference.values, pred.values, joint)
    return DepthMap(values=res.aligned.data, valid=pred.valid, space=reference.space)


def pixel_average(a: DepthMap, b: DepthMap, gt_space_reference: DepthMap) -> DepthMap:
    """Element-wise mean of two predictions, both aligned to the reference.

    Validity is the intersection of the input masks; disjoint masks are an
    error.
    """
    aa = align_to_reference(a, gt_space_reference)
    bb = align_to_reference(b, gt_space_reference)
    joint = aa.valid & bb.valid
    if not joint.any():
        raise DataError("pixel_average: input validity masks are disjoint")
    merged = np.where(joint, 0.5 * (aa.values + bb.values), 0.0)
    return DepthMap(values=merged, valid=joint, space=gt_space_reference.space)


def _record_map(report: MetricReport) -> dict[str, ImageRecord]:
    return {r.image_id: r for r in report.per_image}


def image_oracle(reports_a: MetricReport, reports_b: MetricReport,
                 criterion: str = "delta1") -> OracleSelection:
    """Per image, keep the method with the better criterion (ties go to the
    first method). Returns the oracle report plus selection percentages."""
    if criterion not in ("delta1", "absrel"):
        raise ShapeError(f"image_oracle: unknown criterion {criterion!r}")
    map_a, map_b = _record_map(reports_a), _record_map(reports_b)
    if set(map_a) != set(map_b):
        only_a = sorted(set(map_a) - set(map_b))
        only_b = sorted(set(map_b) - set(map_a))
        raise DataError(
            f"image_oracle: image sets differ (only in a: {only_a}, only in b: {only_b})")

    picked: list[ImageRecord] = []
    chosen: dict[str, str] = {}
    n_a = 0
    for rec_a in reports_a.per_image:
        rec_b = map_b[rec_a.image_id]
        va, vb = getattr(rec_a, criterion), getattr(rec_b, criterion)
        better_a = va >= vb if criterion == "delta1" else va <= vb
        rec = rec_a if better_a else rec_b
        source = reports_a.method if better_a else reports_b.method
        n_a += int(better_a)
        picked.append(rec)
        chosen[rec_a.image_id] = source

    n = len(picked)
    frac_a = 100.0 * n_a / n
    method = f"oracle[{reports_a.method}|{reports_b.method}]"
    report = build_report(method, reports_a.dataset, picked)
    return OracleSelection(report=report, fraction_a=frac_a,
                           fraction_b=100.0 - frac_a, chosen=chosen)
