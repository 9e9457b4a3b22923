"""Procedurally generated scenes for training, evaluation and fixtures.

A scene is a positive depth field made of a planar ramp, a few smooth blobs
and a fine sinusoidal detail component whose wavelength sits near the finest
preimage resolution; the image encodes the depth cues the refiner must decode
(value, gradient, plus a nuisance channel). Everything is seeded and
deterministic.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .metrics import DepthMap
from .tensor import Tensor, resize_bilinear


@dataclass
class Sample:
    image: np.ndarray      # (3, h, w) cues at latent resolution
    depth: np.ndarray      # (1, 2h, 2w) positive ground truth
    seg: np.ndarray        # (C, 2h, 2w) one-hot depth bands
    sample_id: str = ""


def _scene_field(rng: np.random.Generator, h: int, w: int,
                 detail_amp: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ys, xs = ys / max(h - 1, 1), xs / max(w - 1, 1)

    field = rng.uniform(-1.0, 1.0) * xs + rng.uniform(-1.0, 1.0) * ys
    for _ in range(3):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        sigma = rng.uniform(0.08, 0.25)
        amp = rng.uniform(-1.2, 1.2)
        field += amp * np.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma ** 2)))

    # fine structure near the finest stage scale (wavelength ~4 latent pixels)
    fy = rng.uniform(0.20, 0.30) * h
    fx = rng.uniform(0.20, 0.30) * w
    py, px = rng.uniform(0, 2 * np.pi, size=2)
    field += detail_amp * np.sin(2 * np.pi * fy * ys + py) * np.sin(
        2 * np.pi * fx * xs + px)
    return field


def _to_unit(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi - lo < 1e-12:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def make_sample(seed: int, latent: tuple[int, int] = (16, 16), classes: int = 4,
                *, detail_amp: float = 0.8, cue_noise: float = 0.08) -> Sample:
    rng = np.random.default_rng(seed)
    h, w = latent
    field = _scene_field(rng, h, w, detail_amp)
    unit = _to_unit(field)
    depth_latent = 1.5 + 3.0 * unit                    # positive, range [1.5, 4.5]

    gy, gx = np.gradient(depth_latent)
    image = np.stack([unit, _to_unit(gx), _to_unit(gy)])
    # irreducible cue noise: keeps the depth term from being fit to ~zero,
    # which would blow up the adaptive loss balancing during training
    image += cue_noise * rng.normal(size=image.shape)

    depth = resize_bilinear(Tensor(depth_latent[None]), (2 * h, 2 * w)).data

    edges = np.quantile(depth, np.linspace(0.0, 1.0, classes + 1)[1:-1])
    bands = np.digitize(depth[0], edges)
    seg = np.zeros((classes, 2 * h, 2 * w), dtype=np.float64)
    for c in range(classes):
        seg[c][bands == c] = 1.0
    return Sample(image=image, depth=depth, seg=seg, sample_id=f"sample{seed:04d}")


def make_samples(n: int, seed: int, latent: tuple[int, int] = (16, 16),
                 classes: int = 4, *, detail_amp: float = 0.8,
                 cue_noise: float = 0.08) -> list[Sample]:
    return [make_sample(seed * 10_000 + i, latent, classes,
                        detail_amp=detail_amp, cue_noise=cue_noise)
            for i in range(n)]


# ---------------------------------------------------------------------------
# on-disk evaluation fixture
# ---------------------------------------------------------------------------

def _distort_affine(rng: np.random.Generator, gt: np.ndarray) -> np.ndarray:
    """Affine remap plus structured error strong enough to break delta1 on a
    varying share of pixels per image."""
    h, w = gt.shape[1:]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    a = rng.uniform(0.5, 2.0)
    b = rng.uniform(-1.0, 1.0)
    wobble = (rng.uniform(0.3, 1.1) *
              np.sin(2 * np.pi * rng.uniform(1, 3) * ys / h + rng.uniform(0, 6)) *
              np.cos(2 * np.pi * rng.uniform(1, 3) * xs / w + rng.uniform(0, 6)))
    return a * gt + b + a * wobble[None]


def _distort_gamma(rng: np.random.Generator, gt: np.ndarray) -> np.ndarray:
    """Monotone (non-affine) response curve plus noise of widely varying
    strength, so this method wins on some images and loses on others."""
    gamma = rng.uniform(0.5, 0.9)
    noise = rng.normal(scale=rng.uniform(0.01, 0.35), size=gt.shape)
    return np.power(gt, gamma) + noise


def make_eval_fixture(root, *, n: int = 8, seed: int = 7,
                      latent: tuple[int, int] = (16, 16),
                      sparse_holes: bool = True) -> dict[str, str]:
    """Write a complete evaluation fixture under ``root``.

    Produces GT PFMs (half of them with NaN holes to mimic sparse sensors), a
    manifest with two categories and prediction directories for two synthetic
    methods with different error characters. Returns the relevant paths.
    """
    from .io.manifest import Manifest, ManifestEntry, write_manifest
    from .io.pfm import write_pfm

    root = os.fspath(root)
    gt_dir = os.path.join(root, "gt")
    dir_a = os.path.join(root, "pred_a")
    dir_b = os.path.join(root, "pred_b")
    for d in (gt_dir, dir_a, dir_b):
        os.makedirs(d, exist_ok=True)

    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        sample = make_sample(seed * 1000 + i, latent)
        gt = sample.depth
        if sparse_holes and i % 2 == 0:
            holes = rng.random(gt.shape) < 0.2
            gt = np.where(holes, np.nan, gt)
        image_id = f"img{i:03d}"
        write_pfm(gt, os.path.join(gt_dir, f"{image_id}.pfm"))
        write_pfm(_distort_affine(rng, sample.depth),
                  os.path.join(dir_a, f"{image_id}.pfm"))
        write_pfm(_distort_gamma(rng, sample.depth),
                  os.path.join(dir_b, f"{image_id}.pfm"))
        entries.append(ManifestEntry(
            image_id=image_id, gt_path=f"gt/{image_id}.pfm", gt_format="pfm",
            category="indoor" if i < n // 2 else "outdoor"))

    manifest_path = os.path.join(root, "manifest.json")
    write_manifest(Manifest(dataset="synthfix", space="depth", entries=entries,
                            base_dir=root), manifest_path)
    return {"manifest": manifest_path, "gt": gt_dir, "pred_a": dir_a,
            "pred_b": dir_b}


def sample_as_depthmap(sample: Sample) -> DepthMap:
    return DepthMap(values=sample.depth,
                    valid=np.ones_like(sample.depth, dtype=bool), space="depth")
