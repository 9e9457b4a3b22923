"""Container round-trips for preimage stages and refiner parameters, plus
prediction-directory access (one PFM per image id)."""

from __future__ import annotations

import json
import os

import numpy as np

from ..errors import FormatError
from ..metrics import DepthMap
from ..preimage import (CrossAttnMap, FeatureMap, PreimageStage, SelfAttnMap)
from ..refiner import RefinerConfig, RefinerParams
from ..tensor import Tensor
from .container import RasterRecord, read_container, write_container
from .pfm import read_pfm, write_pfm

ROLE_FEATURE = "feature"
ROLE_SELF = "self_attn"
ROLE_CROSS = "cross_attn"
ROLE_SELF_POOLED = "self_attn_pooled"
ROLE_CROSS_FOLDED = "cross_attn_folded"
ROLE_PARAM = "param"


def write_preimage(stages: list[PreimageStage], path) -> None:
    """One record per stage member; the record name encodes stage and slot,
    the role tags the member kind, meta carries the head count."""
    records = []
    for st in stages:
        for i, f in enumerate(st.features):
            records.append(RasterRecord(name=f"s{st.scale_index}/feature{i}",
                                        role=ROLE_FEATURE, data=f.data))
        for i, m in enumerate(st.self_attn):
            records.append(RasterRecord(name=f"s{st.scale_index}/self{i}",
                                        role=ROLE_SELF, data=m.data, meta=m.heads))
        for i, m in enumerate(st.cross_attn):
            records.append(RasterRecord(name=f"s{st.scale_index}/cross{i}",
                                        role=ROLE_CROSS, data=m.data, meta=m.heads))
    write_container(path, records)


def read_preimage(path) -> list[PreimageStage]:
    by_scale: dict[int, dict[str, list]] = {}
    for rec in read_container(path):
        tag, _, _ = rec.name.partition("/")
        if not tag.startswith("s"):
            raise FormatError(f"preimage container: bad record name {rec.name!r}")
        scale = int(tag[1:])
        slot = by_scale.setdefault(scale, {"f": [], "s": [], "c": []})
        if rec.role == ROLE_FEATURE:
            c, h, w = rec.data.shape
            slot["f"].append(FeatureMap(channels=c, h=h, w=w,
                                        data=rec.data.astype(np.float64)))
        elif rec.role == ROLE_SELF:
            _, h, w, _ = rec.data.shape
            slot["s"].append(SelfAttnMap(heads=rec.meta, h=h, w=w,
                                         data=rec.data.astype(np.float64)))
        elif rec.role == ROLE_CROSS:
            _, h, w, _ = rec.data.shape
            slot["c"].append(CrossAttnMap(heads=rec.meta, h=h, w=w,
                                          data=rec.data.astype(np.float64)))
        else:
            raise FormatError(f"preimage container: unknown role {rec.role!r}")
    stages = []
    for scale in sorted(by_scale, reverse=True):  # coarsest first
        slot = by_scale[scale]
        members = slot["f"] + slot["s"] + slot["c"]
        if not members:
            raise FormatError(f"preimage container: stage {scale} is empty")
        res = (members[0].h, members[0].w)
        stages.append(PreimageStage(scale_index=scale, resolution=res,
                                    features=slot["f"], self_attn=slot["s"],
                                    cross_attn=slot["c"]))
    return stages


def write_refiner_params(params: RefinerParams, path, config_path=None) -> None:
    records = [RasterRecord(name=k, role=ROLE_PARAM, data=v)
               for k, v in sorted(params.to_arrays().items())]
    write_container(path, records)
    if config_path is not None:
        cfg = params.config
        doc = {
            "stages": cfg.stages, "base_channels": cfg.base_channels,
            "seg_classes": cfg.seg_classes, "injection_mode": cfg.injection_mode,
            "head_mode": cfg.head_mode, "latent_hw": list(cfg.latent_hw),
            "heads": cfg.heads, "feature_channels": cfg.feature_channels,
            "preimage_seed": cfg.preimage_seed,
        }
        with open(config_path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")


def read_refiner_config(path) -> RefinerConfig:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    doc["latent_hw"] = tuple(doc["latent_hw"])
    return RefinerConfig(**doc)


def read_refiner_params(path, config: RefinerConfig) -> RefinerParams:
    named = {rec.name: Tensor(rec.data.astype(np.float64))
             for rec in read_container(path)}
    try:
        return RefinerParams.from_tensors(config, named)
    except KeyError as exc:
        raise FormatError(f"params container lacks record {exc}") from exc


def prediction_path(directory, image_id: str) -> str:
    return os.path.join(os.fspath(directory), f"{image_id}.pfm")


def load_prediction_dir(manifest, directory, space: str | None = None
                        ) -> dict[str, DepthMap]:
    """Load every available ``<id>.pfm`` for the manifest; absent ids are
    simply not in the result (evaluation reports them all at once)."""
    space = manifest.space if space is None else space
    out: dict[str, DepthMap] = {}
    for entry in manifest.entries:
        path = prediction_path(directory, entry.image_id)
        if os.path.exists(path):
            out[entry.image_id] = read_pfm(path, space=space)
    return out


def save_prediction_dir(predictions: dict[str, DepthMap], directory) -> None:
    os.makedirs(directory, exist_ok=True)
    for image_id in sorted(predictions):
        dm = predictions[image_id]
        values = np.where(dm.valid, dm.values, np.nan)
        write_pfm(values, prediction_path(directory, image_id))


def invert_space(dm: DepthMap) -> DepthMap:
    """Convert depth <-> disparity via 1/x on valid pixels."""
    target = "disparity" if dm.space == "depth" else "depth"
    valid = dm.valid & (dm.values != 0)
    values = np.where(valid, 1.0 / np.where(valid, dm.values, 1.0), 0.0)
    return DepthMap(values=values, valid=valid, space=target)
