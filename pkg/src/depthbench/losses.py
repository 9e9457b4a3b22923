"""Training losses: scale/shift-invariant depth, Dice, Focal, weighted total.

Ground truth depth is normalized to median 0 and mean absolute deviation 1
before comparison; predictions are aligned to the normalized target with a
closed-form least-squares scale and shift. All losses accept plain arrays or
graph tensors and stay differentiable w.r.t. the prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .tensor import (Tensor, add, add_scalar, clamp_min, div, log, mean_all,
                     mul, mul_scalar, sub, sum_all, sum_channels, sum_spatial)

DICE_EPS = 1e-6
FOCAL_FLOOR = 1e-7
_DET_TOL = 1e-12


@dataclass
class NormalizedDepth:
    """Depth normalized to median 0 and mean absolute deviation 1.

    ``values`` keeps the input shape with invalid pixels zeroed; ``t`` and
    ``s`` are the shift (median) and scale (MAD) that were removed.
    """

    values: np.ndarray
    t: float
    s: float
    mask: np.ndarray


class AlignResult(NamedTuple):
    aligned: Tensor
    scale: float
    shift: float
    degenerate: bool


class TotalLoss(NamedTuple):
    total: Tensor
    lam: float
    degenerate: bool


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _resolve_mask(shape, mask) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask).astype(bool)
    if m.shape != shape:
        raise ShapeError(f"mask shape {m.shape} does not match data shape {shape}")
    return m


def normalize_gt(d, mask=None) -> NormalizedDepth:
    """Shift by the median and scale by the mean absolute deviation.

    Raises :class:`DegenerateInputError` for < 2 valid pixels or a constant
    input (zero scale).
    """
    arr = _as_array(d)
    m = _resolve_mask(arr.shape, mask)
    valid = arr[m]
    if valid.size < 2:
        raise DegenerateInputError(
            f"normalize_gt: needs >= 2 valid pixels, got {valid.size}")
    t = float(np.median(valid))
    s = float(np.abs(valid - t).mean())
    if s <= 0.0:
        raise DegenerateInputError("normalize_gt: constant ground truth (scale 0)")
    out = np.zeros_like(arr, dtype=np.float64)
    out[m] = (valid - t) / s
    return NormalizedDepth(values=out, t=t, s=s, mask=m)


def align_lsq(d_star, d_hat, mask=None) -> AlignResult:
    """Least-squares scale and shift mapping ``d_hat`` onto ``d_star``.

    Solves the 2x2 normal equations in closed form; the result stays
    differentiable w.r.t. ``d_hat`` when it lives on a graph. A constant
    prediction makes the system singular: the fallback is the constant map
    ``mean(d_star)`` (scale 0) with the degeneracy flag set.
    """
    target = _as_array(d_star)
    pred = d_hat if isinstance(d_hat, Tensor) else Tensor(d_hat)
    if target.shape != pred.shape:
        raise ShapeError(
            f"align_lsq: shapes {target.shape} and {pred.shape} do not match")
    m = _resolve_mask(target.shape, mask)
    n = int(m.sum())
    if n < 2:
        raise DegenerateInputError(f"align_lsq: needs >= 2 valid pixels, got {n}")
    if pred.graph is None and not np.isfinite(pred.data[~m]).all():
        # masking works by multiplication, so non-finite masked-out entries
        # (NaN holes in sparse rasters) must be zeroed first
        pred = Tensor(np.where(m, pred.data, 0.0))

    mf = m.astype(pred.data.dtype)
    ty = np.where(m, target, 0.0).astype(pred.data.dtype)
    sy = float(ty.sum())

    xm = mul(pred, Tensor(mf))
    sx = sum_all(xm)
    sxx = sum_all(mul(xm, pred))
    sxy = sum_all(mul(pred, Tensor(ty)))

    det_t = sub(mul_scalar(sxx, float(n)), mul(sx, sx))
    det = det_t.item()
    scale_ref = max(1.0, abs(float(n) * sxx.item()))
    if abs(det) <= _DET_TOL * scale_ref:
        mean_y = sy / n
        aligned = add_scalar(mul_scalar(pred, 0.0), mean_y)
        return AlignResult(aligned=aligned, scale=0.0, shift=mean_y, degenerate=True)

    scale_t = div(sub(mul_scalar(sxy, float(n)), mul_scalar(sx, sy)), det_t)
    shift_t = div(sub(mul_scalar(sxx, sy), mul(sx, sxy)), det_t)
    aligned = add(mul(pred, scale_t), shift_t)
    return AlignResult(aligned=aligned, scale=scale_t.item(),
                       shift=shift_t.item(), degenerate=False)


def loss_ssi(d_star, d_hat, mask=None, *, detach_alignment: bool = False) -> Tensor:
    """MSE between normalized GT and the least-squares aligned prediction.

    ``d_star`` is a :class:`NormalizedDepth` (or raw array treated as already
    normalized). Gradients flow through the closed-form alignment unless
    ``detach_alignment`` is set. Raises on alignment degeneracy.
    """
    if isinstance(d_star, NormalizedDepth):
        target, m = d_star.values, d_star.mask
    else:
        target = _as_array(d_star)
        m = np.ones(target.shape, dtype=bool)
    if mask is not None:
        m = m & _resolve_mask(target.shape, mask)
    pred = d_hat if isinstance(d_hat, Tensor) else Tensor(d_hat)

    res = align_lsq(target, pred, m)
    if res.degenerate:
        raise DegenerateInputError("loss_ssi: constant prediction, alignment degenerate")
    if detach_alignment:
        aligned = add_scalar(mul_scalar(pred, res.scale), res.shift)
    else:
        aligned = res.aligned

    n = int(m.sum())
    mf = m.astype(pred.data.dtype)
    ty = np.where(m, target, 0.0).astype(pred.data.dtype)
    err = mul(sub(aligned, Tensor(ty)), Tensor(mf))
    return mul_scalar(sum_all(mul(err, err)), 1.0 / n)


def _check_seg_shapes(kind: str, y_star: np.ndarray, y_hat) -> None:
    hat_shape = y_hat.shape if isinstance(y_hat, Tensor) else np.shape(y_hat)
    if y_star.ndim != 3 or hat_shape != y_star.shape:
        raise ShapeError(
            f"{kind}: expected matching (C, H, W) maps, got {y_star.shape} vs {hat_shape}")


def loss_dice(y_star, y_hat) -> Tensor:
    """Mean Dice loss over classes between one-hot GT and predicted probabilities.

    Classes absent from both maps contribute zero loss through the epsilon.
    """
    target = _as_array(y_star)
    _check_seg_shapes("loss_dice", target, y_hat)
    pred = y_hat if isinstance(y_hat, Tensor) else Tensor(y_hat)
    tc = Tensor(target.astype(pred.data.dtype))

    inter = sum_spatial(mul(pred, tc))
    total = sum_spatial(add(pred, tc))
    ratio = div(add_scalar(mul_scalar(inter, 2.0), DICE_EPS),
                add_scalar(total, DICE_EPS))
    return add_scalar(mul_scalar(mean_all(ratio), -1.0), 1.0)


def loss_focal(y_star, y_hat) -> Tensor:
    """Focal loss summed over pixels: -sum (1 - p)^2 log(p) with p the
    predicted probability of the true class, floored at 1e-7."""
    target = _as_array(y_star)
    _check_seg_shapes("loss_focal", target, y_hat)
    pred = y_hat if isinstance(y_hat, Tensor) else Tensor(y_hat)
    tc = Tensor(target.astype(pred.data.dtype))

    p = clamp_min(sum_channels(mul(pred, tc)), FOCAL_FLOOR)
    miss = add_scalar(mul_scalar(p, -1.0), 1.0)
    return mul_scalar(sum_all(mul(mul(miss, miss), log(p))), -1.0)


def loss_total(dice, focal, ssi) -> TotalLoss:
    """Combined objective ``dice + focal + lam * ssi`` with
    ``lam = (dice + focal) / ssi`` treated as a constant during
    differentiation (no gradient flows through lam's definition)."""
    d = dice if isinstance(dice, Tensor) else Tensor(np.asarray(dice, dtype=np.float64))
    f = focal if isinstance(focal, Tensor) else Tensor(np.asarray(focal, dtype=np.float64))
    s = ssi if isinstance(ssi, Tensor) else Tensor(np.asarray(ssi, dtype=np.float64))
    for name, t in (("dice", d), ("focal", f), ("ssi", s)):
        if t.shape != ():
            raise ShapeError(f"loss_total: {name} must be a scalar, got {t.shape}")

    ssi_val = s.item()
    degenerate = ssi_val == 0.0
    lam = 1.0 if degenerate else (d.item() + f.item()) / ssi_val
    total = add(add(d, f), mul_scalar(s, lam))
    return TotalLoss(total=total, lam=lam, degenerate=degenerate)
