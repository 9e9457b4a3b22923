"""Numerical gradient verification across every differentiable operation.

Each entry builds a scalar loss from leaf parameters and compares the
reverse-mode gradient with central finite differences via
:func:`depthbench.tensor.grad_check`. Primitives are exercised on randomized
shapes; composites run the fusion stack, both refiner wirings and the loss
family end to end.

The combined objective re-derives its balancing weight from the current loss
values, so its finite-difference reference uses the weight frozen at the
unperturbed parameters - which is exactly the gradient the stop-gradient
semantics define.

Composite losses are rescaled by a frozen constant to ~1e-4 magnitude before
checking: central differences resolve a loss L only to ~eps*L/step, and
keeping that rounding floor below the 1e-8 denominator floor of the relative
error requires a small loss scale. The rescaling is a constant factor, so it
exercises exactly the same backward paths.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as tz
from .losses import (loss_dice, loss_focal, loss_ssi, loss_total, normalize_gt)
from .preimage import FusionParams, fuse_stage
from .refiner import RefinerConfig, RefinerParams, _forward, init_params
from .synthetic import make_sample
from .tensor import Tensor, grad_check

PRIMITIVE_NAMES = [
    "add", "add_scalar", "sub", "mul", "mul_scalar", "mul_scalar_broadcast",
    "div", "log", "clamp_min", "relu", "silu", "mean_all", "sum_all",
    "sum_channels", "sum_spatial", "mean_channels", "concat_channels",
    "slice_channels", "conv2d_1x1", "conv2d_3x3_pad1", "upsample_bilinear_x2",
    "resize_bilinear", "downsample_avg_x2", "softmax_channels",
    "block_mean_pool",
]
COMPOSITE_NAMES = [
    "fuse_stage", "refiner_stagewise", "refiner_block",
    "loss_ssi", "loss_dice", "loss_focal", "loss_total",
]


def _weighted_mean(t: Tensor, r: np.ndarray) -> Tensor:
    return tz.mean_all(tz.mul(t, Tensor(r)))


def _rand_chw(rng, cmax=4, hmax=8, even=False, div8=False):
    c = int(rng.integers(1, cmax + 1))
    if div8:
        h = w = 8
    else:
        h = int(rng.integers(2, hmax + 1))
        w = int(rng.integers(2, hmax + 1))
        if even:
            h += h % 2
            w += w % 2
    return c, h, w


def _primitive_checks(seed: int) -> dict[str, Callable]:
    rng = np.random.default_rng(seed)
    checks: dict[str, Callable] = {}

    def pair_shapes():
        return _rand_chw(rng)

    c, h, w = pair_shapes()
    a0 = rng.normal(size=(c, h, w))
    b0 = rng.normal(size=(c, h, w))
    r_ab = rng.normal(size=(c, h, w))
    checks["add"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.add(p["a"], p["b"]), r_ab),
        {"a": a0, "b": b0}, seed=seed)
    checks["sub"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.sub(p["a"], p["b"]), r_ab),
        {"a": a0, "b": b0}, seed=seed)
    checks["mul"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.mul(p["a"], p["b"]), r_ab),
        {"a": a0, "b": b0}, seed=seed)

    bsafe = np.sign(b0) * (0.5 + np.abs(b0))
    checks["div"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.div(p["a"], p["b"]), r_ab),
        {"a": a0, "b": bsafe}, seed=seed)

    checks["add_scalar"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.add_scalar(p["x"], 0.7), r_ab),
        {"x": a0}, seed=seed)
    checks["mul_scalar"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.mul_scalar(p["x"], -1.3), r_ab),
        {"x": a0}, seed=seed)
    checks["mul_scalar_broadcast"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.mul(p["x"], p["s"]), r_ab),
        {"x": a0, "s": np.asarray(0.8)}, seed=seed)

    pos = 0.5 + rng.random(size=(c, h, w)) * 1.5
    checks["log"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.log(p["x"]), r_ab), {"x": pos}, seed=seed)
    checks["clamp_min"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.clamp_min(p["x"], 1.0), r_ab),
        {"x": pos + np.sign(pos - 1.0) * 0.05}, seed=seed)

    away = np.sign(a0) * (0.2 + np.abs(a0))  # keep clear of the kink at 0
    checks["relu"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.relu(p["x"]), r_ab), {"x": away}, seed=seed)
    checks["silu"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.silu(p["x"]), r_ab), {"x": a0}, seed=seed)

    checks["mean_all"] = lambda: grad_check(
        lambda p: tz.mean_all(p["x"]), {"x": a0}, seed=seed)
    checks["sum_all"] = lambda: grad_check(
        lambda p: tz.sum_all(tz.mul(p["x"], Tensor(r_ab))), {"x": a0}, seed=seed)

    rc = rng.normal(size=(1, h, w))
    checks["sum_channels"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.sum_channels(p["x"]), rc), {"x": a0}, seed=seed)
    rs = rng.normal(size=(c,))
    checks["sum_spatial"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.sum_spatial(p["x"]), rs), {"x": a0}, seed=seed)
    checks["mean_channels"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.mean_channels(p["x"]), rc), {"x": a0}, seed=seed)

    c2 = int(rng.integers(1, 4))
    other = rng.normal(size=(c2, h, w))
    rcat = rng.normal(size=(c + c2, h, w))
    checks["concat_channels"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.concat_channels([p["a"], p["b"]]), rcat),
        {"a": a0, "b": other}, seed=seed)

    c3 = max(c, 2)
    wide = rng.normal(size=(c3, h, w))
    rsl = rng.normal(size=(c3 - 1, h, w))
    checks["slice_channels"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.slice_channels(p["x"], 1, c3), rsl),
        {"x": wide}, seed=seed)

    co = int(rng.integers(1, 5))
    k1 = rng.normal(size=(co, c, 1, 1))
    k3 = rng.normal(size=(co, c, 3, 3))
    rco = rng.normal(size=(co, h, w))
    checks["conv2d_1x1"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.conv2d_1x1(p["x"], p["w"]), rco),
        {"x": a0, "w": k1}, seed=seed)
    checks["conv2d_3x3_pad1"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.conv2d_3x3_pad1(p["x"], p["w"]), rco),
        {"x": a0, "w": k3}, seed=seed)

    rup = rng.normal(size=(c, 2 * h, 2 * w))
    checks["upsample_bilinear_x2"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.upsample_bilinear_x2(p["x"]), rup),
        {"x": a0}, seed=seed)
    oh, ow = int(rng.integers(2, 12)), int(rng.integers(2, 12))
    rrs = rng.normal(size=(c, oh, ow))
    checks["resize_bilinear"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.resize_bilinear(p["x"], (oh, ow)), rrs),
        {"x": a0}, seed=seed)

    ce, he, we = _rand_chw(rng, even=True)
    ev = rng.normal(size=(ce, he, we))
    rdn = rng.normal(size=(ce, he // 2, we // 2))
    checks["downsample_avg_x2"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.downsample_avg_x2(p["x"]), rdn),
        {"x": ev}, seed=seed)

    cs = int(rng.integers(2, 5))
    sm = rng.normal(size=(cs, h, w))
    rsm = rng.normal(size=(cs, h, w))
    checks["softmax_channels"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.softmax_channels(p["x"]), rsm),
        {"x": sm}, seed=seed)

    cb, hb, wb = _rand_chw(rng, div8=True)
    bp = rng.normal(size=(cb, hb, wb))
    rbp = rng.normal(size=(cb, 4, 4))
    checks["block_mean_pool"] = lambda: grad_check(
        lambda p: _weighted_mean(tz.block_mean_pool(p["x"], (4, 4)), rbp),
        {"x": bp}, seed=seed)

    return checks


def _tiny_refiner(seed: int):
    config = RefinerConfig(stages=3, base_channels=4, seg_classes=3,
                           latent_hw=(16, 16), heads=1, feature_channels=4,
                           preimage_seed=seed)
    sample = make_sample(seed + 17, latent=config.latent_hw,
                         classes=config.seg_classes)
    stages = config.synthesize(sample.image)
    params = init_params(config, seed)
    return config, sample, stages, params


def _refiner_loss(config, sample, stages, named, mode, lam: float) -> Tensor:
    p = RefinerParams.from_tensors(config, named)
    _, depth, seg_logits = _forward(stages, p, mode)
    seg_prob = tz.softmax_channels(seg_logits)
    dice = loss_dice(sample.seg, seg_prob)
    focal = loss_focal(sample.seg, seg_prob)
    ssi = loss_ssi(normalize_gt(sample.depth), depth)
    return tz.add(tz.add(dice, focal), tz.mul_scalar(ssi, lam))


def _frozen_lambda(config, sample, stages, arrays, mode) -> float:
    named = {k: Tensor(v) for k, v in arrays.items()}
    p = RefinerParams.from_tensors(config, named)
    _, depth, seg_logits = _forward(stages, p, mode)
    seg_prob = tz.softmax_channels(seg_logits)
    dice = loss_dice(sample.seg, seg_prob).item()
    focal = loss_focal(sample.seg, seg_prob).item()
    ssi = loss_ssi(normalize_gt(sample.depth), depth).item()
    return (dice + focal) / ssi


def _normalized(builder: Callable, params: dict, target: float = 1e-4) -> Callable:
    """Rescale a builder's loss by a frozen constant to ``target`` magnitude."""
    base = builder({k: Tensor(np.asarray(v, dtype=np.float64))
                    for k, v in params.items()}).item()
    c = target / abs(base) if abs(base) > 1e-12 else 1.0
    return lambda p: tz.mul_scalar(builder(p), c)


def _composite_checks(seed: int) -> dict[str, Callable]:
    rng = np.random.default_rng(seed + 1)
    checks: dict[str, Callable] = {}

    config, sample, stages, params = _tiny_refiner(seed)
    stage0 = stages[-1]  # finest, has self-attention at 16x16
    cin = sum(f.channels for f in stage0.features) + 64 + 77
    w1 = rng.normal(size=(4, cin, 1, 1)) * 0.2
    w2 = rng.normal(size=(3, 4, 1, 1)) * 0.2
    r_fuse = rng.normal(size=(3,) + stage0.resolution)

    def fuse_builder(p):
        fused = fuse_stage(stage0, 3, FusionParams(w1=p["w1"], w2=p["w2"]))
        return _weighted_mean(fused, r_fuse)

    fuse_params = {"w1": w1, "w2": w2}
    checks["fuse_stage"] = lambda: grad_check(
        _normalized(fuse_builder, fuse_params), fuse_params, seed=seed)

    arrays = params.to_arrays()
    for mode, key in (("stagewise", "refiner_stagewise"), ("block", "refiner_block")):
        lam = _frozen_lambda(config, sample, stages, arrays, mode)

        def refiner_builder(named, m=mode, l=lam):
            return _refiner_loss(config, sample, stages, named, m, l)

        checks[key] = (lambda b=refiner_builder: grad_check(
            _normalized(b, arrays), arrays, seed=seed))

    nd = normalize_gt(1.0 + rng.random(size=(1, 6, 6)) * 3.0)
    d_hat = rng.normal(size=(1, 6, 6))
    ssi_params = {"d": d_hat}
    checks["loss_ssi"] = lambda: grad_check(
        _normalized(lambda p: loss_ssi(nd, p["d"]), ssi_params),
        ssi_params, seed=seed)

    classes, hh, ww = 3, 5, 5
    one_hot = np.zeros((classes, hh, ww))
    labels = rng.integers(0, classes, size=(hh, ww))
    for cc in range(classes):
        one_hot[cc][labels == cc] = 1.0
    logits = rng.normal(size=(classes, hh, ww))
    seg_params = {"z": logits}
    checks["loss_dice"] = lambda: grad_check(
        _normalized(lambda p: loss_dice(one_hot, tz.softmax_channels(p["z"])),
                    seg_params),
        seg_params, seed=seed)
    checks["loss_focal"] = lambda: grad_check(
        _normalized(lambda p: loss_focal(one_hot, tz.softmax_channels(p["z"])),
                    seg_params),
        seg_params, seed=seed)

    def total_parts(p):
        prob = tz.softmax_channels(p["z"])
        dice = loss_dice(one_hot, prob)
        focal = loss_focal(one_hot, prob)
        ssi = loss_ssi(nd, tz.resize_bilinear(tz.slice_channels(prob, 0, 1), (6, 6)))
        return dice, focal, ssi

    d0, f0, s0 = (t.item() for t in total_parts({"z": Tensor(logits)}))
    lam0 = (d0 + f0) / s0

    def total_builder(p):
        dice, focal, ssi = total_parts(p)
        return tz.add(tz.add(dice, focal), tz.mul_scalar(ssi, lam0))

    checks["loss_total"] = lambda: grad_check(
        _normalized(total_builder, seg_params), seg_params, seed=seed)

    return checks


def gradient_suite(seed: int = 0, *, composites: bool = True) -> dict[str, float]:
    """Run every check; returns component name -> max relative error."""
    out: dict[str, float] = {}
    for name, runner in _primitive_checks(seed).items():
        out[name] = max(runner().values())
    if composites:
        for name, runner in _composite_checks(seed).items():
            out[name] = max(runner().values())
    return out
