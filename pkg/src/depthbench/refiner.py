"""Miniature multi-stage refiner decoding a preimage into depth + segmentation.

Two wirings share one parameter set: ``stagewise`` injects each fused stage at
its own resolution (concat -> pointwise inject -> residual block -> x2
upsample, coarsest to finest); ``block`` resizes every fused stage to the
second-finest resolution, concatenates them into a single block, projects once
and runs only the remaining decoder tail. The residual blocks and heads are
identical in shape for both modes, so the comparison isolates the injection
wiring.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ShapeError
from .losses import loss_dice, loss_focal, loss_ssi, loss_total, normalize_gt
from .preimage import (REGION_GRID, TEXT_TOKENS, FusionParams, PreimageStage,
                       fuse_stage, init_fusion_params, synth_preimage)
from .tensor import (Graph, Tensor, add, backward, concat_channels, conv2d_1x1,
                     conv2d_3x3_pad1, downsample_avg_x2, mean_channels,
                     mul_scalar, resize_bilinear, silu, softmax_channels,
                     upsample_bilinear_x2)

INJECTION_MODES = ("stagewise", "block")
HEAD_MODES = ("pixel", "latent_surrogate")


@dataclass
class RefinerConfig:
    stages: int = 4
    base_channels: int = 32
    seg_classes: int = 8
    injection_mode: str = "stagewise"
    head_mode: str = "pixel"
    latent_hw: tuple[int, int] = (16, 16)
    heads: int = 1
    feature_channels: int = 6
    preimage_seed: int = 0

    def __post_init__(self):
        if self.stages < 2:
            raise ShapeError(f"RefinerConfig: stages must be >= 2, got {self.stages}")
        if self.base_channels < 4:
            raise ShapeError(
                f"RefinerConfig: base_channels must be >= 4, got {self.base_channels}")
        if self.seg_classes < 2:
            raise ShapeError(
                f"RefinerConfig: seg_classes must be >= 2, got {self.seg_classes}")
        if self.injection_mode not in INJECTION_MODES:
            raise ShapeError(f"RefinerConfig: unknown injection_mode {self.injection_mode!r}")
        if self.head_mode not in HEAD_MODES:
            raise ShapeError(f"RefinerConfig: unknown head_mode {self.head_mode!r}")
        h, w = self.latent_hw
        div = 2 ** (self.stages - 1)
        if h % div or w % div:
            raise ShapeError(
                f"RefinerConfig: latent {h}x{w} not divisible by 2**(stages-1) = {div}")

    def stage_resolution(self, scale_index: int) -> tuple[int, int]:
        h, w = self.latent_hw
        return (h // 2 ** scale_index, w // 2 ** scale_index)

    def stage_has_self_attn(self, scale_index: int) -> bool:
        h, w = self.stage_resolution(scale_index)
        return h % REGION_GRID == 0 and w % REGION_GRID == 0

    def stage_in_channels(self, scale_index: int) -> int:
        c = 3 + self.feature_channels + TEXT_TOKENS * self.heads
        if self.stage_has_self_attn(scale_index):
            c += REGION_GRID * REGION_GRID * self.heads
        return c

    def synthesize(self, image) -> list[PreimageStage]:
        return synth_preimage(image, self.preimage_seed, self.stages,
                              heads=self.heads,
                              feature_channels=self.feature_channels)


@dataclass
class RefinerParams:
    """All trainable tensors; lists are indexed by scale_index (0 = finest)."""

    config: RefinerConfig
    fusion: list[FusionParams]
    inject: list[Tensor]
    res_w1: list[Tensor]
    res_w2: list[Tensor]
    block_proj: Tensor
    head_depth_w1: Tensor
    head_depth_w2: Tensor
    head_seg_w1: Tensor
    head_seg_w2: Tensor

    def to_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for s in range(self.config.stages):
            out[f"fusion{s}.w1"] = self.fusion[s].w1.data
            out[f"fusion{s}.w2"] = self.fusion[s].w2.data
            out[f"inject{s}"] = self.inject[s].data
            out[f"res{s}.w1"] = self.res_w1[s].data
            out[f"res{s}.w2"] = self.res_w2[s].data
        out["block_proj"] = self.block_proj.data
        out["head_depth.w1"] = self.head_depth_w1.data
        out["head_depth.w2"] = self.head_depth_w2.data
        out["head_seg.w1"] = self.head_seg_w1.data
        out["head_seg.w2"] = self.head_seg_w2.data
        return out

    @classmethod
    def from_tensors(cls, config: RefinerConfig, named) -> "RefinerParams":
        def wrap(key):
            v = named[key]
            return v if isinstance(v, Tensor) else Tensor(v)

        return cls(
            config=config,
            fusion=[FusionParams(w1=wrap(f"fusion{s}.w1"), w2=wrap(f"fusion{s}.w2"))
                    for s in range(config.stages)],
            inject=[wrap(f"inject{s}") for s in range(config.stages)],
            res_w1=[wrap(f"res{s}.w1") for s in range(config.stages)],
            res_w2=[wrap(f"res{s}.w2") for s in range(config.stages)],
            block_proj=wrap("block_proj"),
            head_depth_w1=wrap("head_depth.w1"),
            head_depth_w2=wrap("head_depth.w2"),
            head_seg_w1=wrap("head_seg.w1"),
            head_seg_w2=wrap("head_seg.w2"),
        )

    def body_parameter_count(self) -> int:
        """Size of the decoder body (residual blocks + heads)."""
        n = sum(t.size for t in self.res_w1) + sum(t.size for t in self.res_w2)
        n += self.head_depth_w1.size + self.head_depth_w2.size
        n += self.head_seg_w1.size + self.head_seg_w2.size
        return n


def _uniform(rng: np.random.Generator, shape, dtype=np.float64) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


def init_params(config: RefinerConfig, seed: int, dtype=np.float64) -> RefinerParams:
    """Fan-in-scaled uniform init (bound sqrt(1/fan_in)); bit-stable per seed."""
    rng = np.random.default_rng(seed)
    b = config.base_channels
    fusion, inject, res_w1, res_w2 = [], [], [], []
    for s in range(config.stages):
        fusion.append(init_fusion_params(config.stage_in_channels(s), b, rng,
                                         dtype=dtype))
        inject.append(_uniform(rng, (b, 2 * b, 1, 1), dtype))
        res_w1.append(_uniform(rng, (b, b, 3, 3), dtype))
        res_w2.append(_uniform(rng, (b, b, 3, 3), dtype))
    return RefinerParams(
        config=config,
        fusion=fusion,
        inject=inject,
        res_w1=res_w1,
        res_w2=res_w2,
        block_proj=_uniform(rng, (b, config.stages * b, 1, 1), dtype),
        head_depth_w1=_uniform(rng, (b, b, 3, 3), dtype),
        head_depth_w2=_uniform(rng, (1, b, 3, 3), dtype),
        head_seg_w1=_uniform(rng, (b, b, 3, 3), dtype),
        head_seg_w2=_uniform(rng, (config.seg_classes, b, 3, 3), dtype),
    )


def _check_stage_chain(stages: Sequence[PreimageStage], config: RefinerConfig) -> None:
    if len(stages) != config.stages:
        raise ShapeError(
            f"refiner: got {len(stages)} stages, config expects {config.stages}")
    for i, st in enumerate(stages):
        want_scale = config.stages - 1 - i
        if st.scale_index != want_scale:
            raise ShapeError(
                "refiner: stages must be ordered coarsest to finest "
                f"(position {i} has scale_index {st.scale_index}, expected {want_scale})")
        if st.resolution != config.stage_resolution(st.scale_index):
            raise ShapeError(
                f"refiner: stage {st.scale_index} at {st.resolution}, expected "
                f"{config.stage_resolution(st.scale_index)} (resolution chain broken)")


def _resblock(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    return add(x, conv2d_3x3_pad1(silu(conv2d_3x3_pad1(x, w1)), w2))


def _head(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    return conv2d_3x3_pad1(silu(conv2d_3x3_pad1(x, w1)), w2)


def fuse_all_stages(stages: Sequence[PreimageStage],
                    params: RefinerParams) -> list[Tensor]:
    b = params.config.base_channels
    return [fuse_stage(st, b, params.fusion[st.scale_index]) for st in stages]


def block_entry_input(stages: Sequence[PreimageStage],
                      params: RefinerParams) -> Tensor:
    """Every fused stage resized to the second-finest resolution, concatenated."""
    fused = fuse_all_stages(stages, params)
    target = stages[-2].resolution
    return concat_channels([resize_bilinear(f, target) for f in fused])


def _forward(stages: Sequence[PreimageStage], params: RefinerParams,
             mode: str) -> tuple[Tensor, Tensor, Tensor]:
    config = params.config
    _check_stage_chain(stages, config)

    if mode == "stagewise":
        fused = fuse_all_stages(stages, params)
        cur = fused[0]
        for i, st in enumerate(stages):
            s = st.scale_index
            x = concat_channels([cur, fused[i]])
            x = conv2d_1x1(x, params.inject[s])
            x = _resblock(x, params.res_w1[s], params.res_w2[s])
            cur = upsample_bilinear_x2(x)
    elif mode == "block":
        if len(stages) < 2:
            raise ShapeError("refine_block: needs at least 2 stages")
        entry = block_entry_input(stages, params)
        cur = conv2d_1x1(entry, params.block_proj)
        for st in stages[-2:]:
            s = st.scale_index
            x = _resblock(cur, params.res_w1[s], params.res_w2[s])
            cur = upsample_bilinear_x2(x)
    else:
        raise ShapeError(f"refiner: unknown injection mode {mode!r}")

    depth = _head(cur, params.head_depth_w1, params.head_depth_w2)
    seg_logits = _head(cur, params.head_seg_w1, params.head_seg_w2)
    return cur, depth, seg_logits


def refine_stagewise(stages: Sequence[PreimageStage],
                     params: RefinerParams) -> tuple[Tensor, Tensor]:
    """Per-stage injection decoding: (depth 1xHxW, seg_logits CxHxW) where
    (H, W) is twice the finest stage resolution."""
    _, depth, seg = _forward(stages, params, "stagewise")
    return depth, seg


def refine_block(stages: Sequence[PreimageStage],
                 params: RefinerParams) -> tuple[Tensor, Tensor]:
    """Single-block injection at the second-finest resolution; same output
    shapes as :func:`refine_stagewise`."""
    _, depth, seg = _forward(stages, params, "block")
    return depth, seg


# ---------------------------------------------------------------------------
# toy training
# ---------------------------------------------------------------------------

class TrainStep(NamedTuple):
    total: float
    ssi: float
    dice: float
    focal: float


@dataclass
class TrainResult:
    history: list[TrainStep]
    params: RefinerParams


def _quarter_res(x: Tensor) -> Tensor:
    return downsample_avg_x2(downsample_avg_x2(x))


def _quarter_res_np(a: np.ndarray) -> np.ndarray:
    c, h, w = a.shape
    return a.reshape(c, h // 4, 4, w // 4, 4).mean(axis=(2, 4))


def train_toy(config: RefinerConfig, dataset, steps: int, lr: float,
              seed: int, *, batch_size: int = 8) -> TrainResult:
    """Plain (mini-batch) gradient descent on the combined objective.

    Batches are taken cyclically from the dataset and the balancing weight is
    derived from the batch-mean losses, which keeps it from whipsawing on
    per-sample depth-fit variance. The preimage of each sample is synthesized
    once up front. In ``latent_surrogate`` mode the depth term is computed on
    the channel-mean of the pre-head activation at quarter resolution against
    the equally downsampled ground truth instead of the pixel head output.
    """
    if steps < 1:
        raise ShapeError(f"train_toy: steps must be >= 1, got {steps}")
    if lr <= 0:
        raise ShapeError(f"train_toy: lr must be > 0, got {lr}")
    if not dataset:
        raise ShapeError("train_toy: empty dataset")
    batch_size = min(batch_size, len(dataset))

    params = init_params(config, seed)
    arrays = {k: v.copy() for k, v in params.to_arrays().items()}
    names = sorted(arrays)
    stage_cache = [config.synthesize(sample.image) for sample in dataset]
    n = len(dataset)

    history: list[TrainStep] = []
    for step in range(steps):
        graph = Graph()
        leaves = {k: graph.leaf(arrays[k]) for k in names}
        p = RefinerParams.from_tensors(config, leaves)

        dice_terms, focal_terms, ssi_terms = [], [], []
        for j in range(batch_size):
            idx = (step * batch_size + j) % n
            sample = dataset[idx]
            act, depth, seg_logits = _forward(stage_cache[idx], p,
                                              config.injection_mode)
            seg_prob = softmax_channels(seg_logits)
            dice_terms.append(loss_dice(sample.seg, seg_prob))
            focal_terms.append(loss_focal(sample.seg, seg_prob))
            if config.head_mode == "pixel":
                ssi_terms.append(loss_ssi(normalize_gt(sample.depth), depth))
            else:
                surrogate = _quarter_res(mean_channels(act))
                gt_small = _quarter_res_np(sample.depth)
                ssi_terms.append(loss_ssi(normalize_gt(gt_small), surrogate))

        def batch_mean(terms):
            acc = terms[0]
            for t in terms[1:]:
                acc = add(acc, t)
            return mul_scalar(acc, 1.0 / len(terms))

        dice = batch_mean(dice_terms)
        focal = batch_mean(focal_terms)
        ssi = batch_mean(ssi_terms)

        tot = loss_total(dice, focal, ssi)
        values = TrainStep(total=tot.total.item(), ssi=ssi.item(),
                           dice=dice.item(), focal=focal.item())
        if not all(np.isfinite(v) for v in values):
            raise FloatingPointError(f"train_toy: non-finite loss at step {step}")
        history.append(values)

        grads = backward(tot.total)
        for k in names:
            g = grads.get(leaves[k].node)
            if g is not None:
                arrays[k] -= lr * g.data

    final = RefinerParams.from_tensors(config, {k: Tensor(v) for k, v in arrays.items()})
    return TrainResult(history=history, params=final)


def predict_depth(params: RefinerParams, image) -> np.ndarray:
    """Forward pass on one image; returns the raw depth map (1, 2H, 2W)."""
    stages = params.config.synthesize(image)
    _, depth, _ = _forward(stages, params, params.config.injection_mode)
    return depth.data


def validation_delta1(params: RefinerParams, samples) -> float:
    """Mean delta1 of raw predictions against sample ground truth."""
    from .metrics import DepthMap, compute_metrics

    scores = []
    for sample in samples:
        pred = predict_depth(params, sample.image)
        gt = DepthMap(values=sample.depth, valid=np.ones_like(sample.depth, dtype=bool),
                      space="depth")
        pm = DepthMap(values=pred, valid=np.ones_like(pred, dtype=bool), space="depth")
        scores.append(compute_metrics(gt, pm).delta1)
    return float(np.mean(scores))
