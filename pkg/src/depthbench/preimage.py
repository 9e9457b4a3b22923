"""Attention/feature bundles per resolution stage and their transforms.

A stage groups feature maps, per-head self-attention (each query position
holding a distribution over all key positions) and per-head cross-attention
over 77 token slots, all at one spatial resolution. Self-attention is pooled
over an 8x8 grid of key regions so the channel count no longer depends on the
resolution; cross-attention folds its token axis into channels unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, concat_channels, conv2d_1x1, silu

REGION_GRID = 8
TEXT_TOKENS = 77
ROW_SUM_TOL = 1e-6


def _check_rows_stochastic(kind: str, data: np.ndarray) -> None:
    sums = data.sum(axis=-1)
    worst = float(np.abs(sums - 1.0).max())
    if worst > ROW_SUM_TOL:
        raise ShapeError(f"{kind}: attention rows must sum to 1 (off by {worst:.3g})")


@dataclass
class SelfAttnMap:
    """(heads, h, w, h*w) attention where every pixel attends to all pixels."""

    heads: int
    h: int
    w: int
    data: np.ndarray

    def __post_init__(self):
        expect = (self.heads, self.h, self.w, self.h * self.w)
        if self.data.shape != expect:
            raise ShapeError(f"SelfAttnMap: data shape {self.data.shape}, expected {expect}")
        _check_rows_stochastic("SelfAttnMap", self.data)


@dataclass
class CrossAttnMap:
    """(heads, h, w, 77) attention over a fixed budget of text-token slots."""

    heads: int
    h: int
    w: int
    data: np.ndarray
    tokens: int = TEXT_TOKENS

    def __post_init__(self):
        if self.tokens != TEXT_TOKENS:
            raise ShapeError(f"CrossAttnMap: token axis must be {TEXT_TOKENS}")
        expect = (self.heads, self.h, self.w, TEXT_TOKENS)
        if self.data.shape != expect:
            raise ShapeError(f"CrossAttnMap: data shape {self.data.shape}, expected {expect}")
        _check_rows_stochastic("CrossAttnMap", self.data)


@dataclass
class FeatureMap:
    """(C, h, w) dense activation map."""

    channels: int
    h: int
    w: int
    data: np.ndarray

    def __post_init__(self):
        expect = (self.channels, self.h, self.w)
        if self.data.shape != expect:
            raise ShapeError(f"FeatureMap: data shape {self.data.shape}, expected {expect}")
        if not np.isfinite(self.data).all():
            raise ShapeError("FeatureMap: non-finite values")


@dataclass
class PreimageStage:
    """All members of one resolution stage; scale_index 0 is the finest."""

    scale_index: int
    resolution: tuple[int, int]
    features: list[FeatureMap] = field(default_factory=list)
    self_attn: list[SelfAttnMap] = field(default_factory=list)
    cross_attn: list[CrossAttnMap] = field(default_factory=list)

    def __post_init__(self):
        h, w = self.resolution
        for m in [*self.features, *self.self_attn, *self.cross_attn]:
            if (m.h, m.w) != (h, w):
                raise ShapeError(
                    f"PreimageStage {self.scale_index}: member at {(m.h, m.w)}, "
                    f"stage resolution {(h, w)}")

    def is_empty(self) -> bool:
        return not (self.features or self.self_attn or self.cross_attn)


def pool_self_attention(m: SelfAttnMap) -> Tensor:
    """Average the key axis over an 8x8 region grid: (64 * heads, h, w).

    Output channel ``head * 64 + region_row * 8 + region_col``. Heads are kept
    separate. Requires h and w divisible by 8 so regions tile exactly.
    """
    h, w = m.h, m.w
    if h % REGION_GRID:
        raise ShapeError(f"pool_self_attention: height {h} not divisible by {REGION_GRID}")
    if w % REGION_GRID:
        raise ShapeError(f"pool_self_attention: width {w} not divisible by {REGION_GRID}")
    bh, bw = h // REGION_GRID, w // REGION_GRID
    # key axis h*w -> (8, bh, 8, bw); average each region
    r = m.data.reshape(m.heads, h, w, REGION_GRID, bh, REGION_GRID, bw)
    pooled = r.mean(axis=(4, 6))  # (heads, h, w, 8, 8)
    pooled = pooled.transpose(0, 3, 4, 1, 2).reshape(
        m.heads * REGION_GRID * REGION_GRID, h, w)
    return Tensor(pooled)


def fold_cross_attention(m: CrossAttnMap) -> Tensor:
    """Move the token axis into channels: (77 * heads, h, w), values unchanged.

    Output channel ``head * 77 + token``.
    """
    folded = m.data.transpose(0, 3, 1, 2).reshape(m.heads * TEXT_TOKENS, m.h, m.w)
    return Tensor(folded.copy())


def unfold_cross_attention(t: Tensor | np.ndarray, heads: int) -> CrossAttnMap:
    """Exact inverse of :func:`fold_cross_attention`."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim != 3 or data.shape[0] != heads * TEXT_TOKENS:
        raise ShapeError(
            f"unfold_cross_attention: shape {data.shape} incompatible with {heads} heads")
    h, w = data.shape[1:]
    back = data.reshape(heads, TEXT_TOKENS, h, w).transpose(0, 2, 3, 1)
    return CrossAttnMap(heads=heads, h=h, w=w, data=back.copy())


@dataclass
class FusionParams:
    """Two pointwise projection kernels with one activation between."""

    w1: Tensor
    w2: Tensor

    @property
    def in_channels(self) -> int:
        return self.w1.shape[1]

    @property
    def out_channels(self) -> int:
        return self.w2.shape[0]


def stage_channel_count(stage: PreimageStage) -> int:
    """Channel count of the concatenated stage members after pooling/folding."""
    c = sum(f.channels for f in stage.features)
    c += sum(REGION_GRID * REGION_GRID * m.heads for m in stage.self_attn)
    c += sum(TEXT_TOKENS * m.heads for m in stage.cross_attn)
    return c


def init_fusion_params(in_channels: int, out_channels: int,
                       rng: np.random.Generator, hidden: int | None = None,
                       dtype=np.float64) -> FusionParams:
    hidden = out_channels if hidden is None else hidden
    b1 = np.sqrt(1.0 / in_channels)
    b2 = np.sqrt(1.0 / hidden)
    w1 = rng.uniform(-b1, b1, size=(hidden, in_channels, 1, 1)).astype(dtype)
    w2 = rng.uniform(-b2, b2, size=(out_channels, hidden, 1, 1)).astype(dtype)
    return FusionParams(w1=Tensor(w1), w2=Tensor(w2))


def fuse_stage(stage: PreimageStage, out_channels: int, params: FusionParams,
               *, activation: bool = True) -> Tensor:
    """Concat all members (features, pooled self-attn, folded cross-attn, in
    declaration order), then project: 1x1 conv -> SiLU -> 1x1 conv.

    ``activation=False`` turns the stack linear for identity probing.
    Differentiable w.r.t. the params.
    """
    if stage.is_empty():
        raise ShapeError(f"fuse_stage: stage {stage.scale_index} has no members")
    members = [Tensor(f.data) for f in stage.features]
    members += [pool_self_attention(m) for m in stage.self_attn]
    members += [fold_cross_attention(m) for m in stage.cross_attn]
    dtype = params.w1.data.dtype
    members = [Tensor(m.data.astype(dtype, copy=False)) for m in members]
    stacked = concat_channels(members) if len(members) > 1 else members[0]
    if stacked.shape[0] != params.in_channels:
        raise ShapeError(
            f"fuse_stage: stage has {stacked.shape[0]} channels, params expect "
            f"{params.in_channels}")
    if params.out_channels != out_channels:
        raise ShapeError(
            f"fuse_stage: params produce {params.out_channels} channels, "
            f"requested {out_channels}")
    mid = conv2d_1x1(stacked, params.w1)
    if activation:
        mid = silu(mid)
    return conv2d_1x1(mid, params.w2)


# ---------------------------------------------------------------------------
# procedural pseudo-preimage
# ---------------------------------------------------------------------------

def _avg_pool2(img: np.ndarray) -> np.ndarray:
    c, h, w = img.shape
    return img.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def synth_preimage(image, seed: int, stages: int, *, heads: int = 1,
                   feature_channels: int = 6) -> list[PreimageStage]:
    """Deterministic pseudo-preimage for an image, replacing a real backbone.

    Stage ``s`` sits at 1/2**s of the input resolution. Features are fixed
    random projections of an average-pooled pyramid (plus the pooled image
    itself); self-attention is the row-softmax of an intensity similarity
    kernel (emitted only where the resolution divides by 8); cross-attention
    is a softmax over 77 fixed random token prototypes. Returned list is
    ordered coarsest to finest.
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"synth_preimage: expected a (3, H, W) image, got {img.shape}")
    h, w = img.shape[1:]
    div = 2 ** (stages - 1)
    if h % div or w % div:
        raise ShapeError(
            f"synth_preimage: {h}x{w} not divisible by 2**(stages-1) = {div}")

    rng = np.random.default_rng(seed)
    proto = rng.normal(size=(TEXT_TOKENS, 3))          # token prototypes
    head_gamma = 2.0 + rng.random(heads) * 6.0         # per-head kernel widths
    head_kappa = 1.0 + rng.random(heads) * 3.0

    out: list[PreimageStage] = []
    level = img
    for s in range(stages):
        hs, ws = level.shape[1:]
        proj = rng.normal(size=(feature_channels, 3)) / np.sqrt(3.0)
        feat = np.tanh(np.einsum("fc,chw->fhw", proj, level))
        features = [
            FeatureMap(channels=3, h=hs, w=ws, data=level.copy()),
            FeatureMap(channels=feature_channels, h=hs, w=ws, data=feat),
        ]

        self_maps: list[SelfAttnMap] = []
        if hs % REGION_GRID == 0 and ws % REGION_GRID == 0:
            inten = level.mean(axis=0).reshape(-1)     # (hs*ws,)
            d2 = (inten[:, None] - inten[None, :]) ** 2
            planes = [_softmax_rows(-g * d2) for g in head_gamma]
            data = np.stack(planes).reshape(heads, hs, ws, hs * ws)
            self_maps.append(SelfAttnMap(heads=heads, h=hs, w=ws, data=data))

        pix = level.reshape(3, -1).T                   # (hs*ws, 3)
        cross_planes = []
        for k in head_kappa:
            logits = -k * ((pix[:, None, :] - proto[None, :, :]) ** 2).sum(axis=-1)
            cross_planes.append(_softmax_rows(logits))
        cross = np.stack(cross_planes).reshape(heads, hs, ws, TEXT_TOKENS)
        cross_maps = [CrossAttnMap(heads=heads, h=hs, w=ws, data=cross)]

        out.append(PreimageStage(scale_index=s, resolution=(hs, ws),
                                 features=features, self_attn=self_maps,
                                 cross_attn=cross_maps))
        if s + 1 < stages:
            level = _avg_pool2(level)

    out.reverse()  # coarsest first
    return out
