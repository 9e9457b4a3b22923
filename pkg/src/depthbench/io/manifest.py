"""Dataset manifests: JSON schema, loading, and ground-truth access."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import jsonschema
from PIL import Image

from ..errors import DataError, SchemaError
from ..metrics import DepthMap

MANIFEST_VERSION = 1

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "dataset", "space", "entries"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": MANIFEST_VERSION},
        "dataset": {"type": "string", "minLength": 1},
        "space": {"enum": ["depth", "disparity"]},
        "depth_cap": {"type": "number", "exclusiveMinimum": 0},
        "entries": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "gt", "format"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "gt": {"type": "string", "minLength": 1},
                    "format": {"enum": ["pfm", "png16"]},
                    "category": {"type": ["string", "null"]},
                    "valid_mask": {"type": ["string", "null"]},
                },
            },
        },
    },
}


@dataclass
class ManifestEntry:
    image_id: str
    gt_path: str
    gt_format: str
    category: str | None = None
    valid_mask: str | None = None


@dataclass
class Manifest:
    dataset: str
    space: str
    entries: list[ManifestEntry]
    depth_cap: float | None = None
    base_dir: str = "."


def _pointer(error: jsonschema.ValidationError) -> str:
    return "/" + "/".join(str(p) for p in error.absolute_path)


def load_manifest(path) -> Manifest:
    """Load and validate a manifest; all declared files must exist."""
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"manifest is not valid JSON: {exc}") from exc

    validator = jsonschema.Draft202012Validator(MANIFEST_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        raise SchemaError(f"manifest schema violation: {first.message}",
                          pointer=_pointer(first))

    seen: set[str] = set()
    for i, entry in enumerate(doc["entries"]):
        if entry["id"] in seen:
            raise SchemaError(f"duplicate image id {entry['id']!r}",
                              pointer=f"/entries/{i}/id")
        seen.add(entry["id"])

    base = os.path.dirname(os.path.abspath(path))
    entries = []
    for i, entry in enumerate(doc["entries"]):
        gt_path = os.path.join(base, entry["gt"])
        if not os.path.exists(gt_path):
            raise SchemaError(f"ground truth file {entry['gt']!r} does not exist",
                              pointer=f"/entries/{i}/gt")
        mask = entry.get("valid_mask")
        if mask is not None and not os.path.exists(os.path.join(base, mask)):
            raise SchemaError(f"valid-mask file {mask!r} does not exist",
                              pointer=f"/entries/{i}/valid_mask")
        entries.append(ManifestEntry(image_id=entry["id"], gt_path=entry["gt"],
                                     gt_format=entry["format"],
                                     category=entry.get("category"),
                                     valid_mask=mask))
    return Manifest(dataset=doc["dataset"], space=doc["space"], entries=entries,
                    depth_cap=doc.get("depth_cap"), base_dir=base)


def write_manifest(manifest: Manifest, path) -> None:
    doc = {
        "version": MANIFEST_VERSION,
        "dataset": manifest.dataset,
        "space": manifest.space,
        "entries": [
            {"id": e.image_id, "gt": e.gt_path, "format": e.gt_format,
             "category": e.category, "valid_mask": e.valid_mask}
            for e in manifest.entries
        ],
    }
    if manifest.depth_cap is not None:
        doc["depth_cap"] = manifest.depth_cap
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_entry_gt(manifest: Manifest, entry: ManifestEntry) -> DepthMap:
    """Read one GT raster, applying the optional valid-mask file and depth cap."""
    from .pfm import read_pfm
    from .png16 import read_depth_png16

    path = os.path.join(manifest.base_dir, entry.gt_path)
    if entry.gt_format == "pfm":
        dm = read_pfm(path, space=manifest.space)
    else:
        dm = read_depth_png16(path, space=manifest.space)

    valid = dm.valid
    if entry.valid_mask is not None:
        img = Image.open(os.path.join(manifest.base_dir, entry.valid_mask))
        extra = np.asarray(img) != 0
        if extra.ndim != 2 or extra.shape != dm.resolution:
            raise DataError(
                f"valid mask for {entry.image_id!r} has shape {extra.shape}, "
                f"GT is {dm.resolution}")
        valid = valid & extra[None]
    if manifest.depth_cap is not None:
        valid = valid & (dm.values <= manifest.depth_cap)
    return DepthMap(values=dm.values, valid=valid, space=manifest.space)
