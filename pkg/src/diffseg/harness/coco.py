"""Read-only ingestion of COCO panoptic annotations (JSON + id-encoded PNGs)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .data import GroundTruth, GTObject, Sample


class IngestionError(ValueError):
    pass


def rgb2id(color: np.ndarray) -> np.ndarray:
    color = color.astype(np.int64)
    return color[..., 0] + 256 * color[..., 1] + 256 * 256 * color[..., 2]


def _read_json(path: Path) -> dict:
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise IngestionError(f"{path}: file not found") from None
    except json.JSONDecodeError as e:
        raise IngestionError(f"{path}: malformed JSON ({e})") from None
    if not isinstance(data, dict):
        raise IngestionError(f"{path}: top level must be an object")
    return data


def _categories(data: dict, path: Path) -> tuple[dict[int, int], list[dict]]:
    cats = data.get("categories")
    if not isinstance(cats, list) or not cats:
        raise IngestionError(f"{path}: missing or empty 'categories'")
    mapping, out = {}, []
    for i, c in enumerate(cats):
        try:
            cid, isthing = int(c["id"]), int(c["isthing"])
        except (KeyError, TypeError, ValueError):
            raise IngestionError(f"{path}: category record {i} needs integer 'id' and 'isthing'") from None
        if isthing not in (0, 1):
            raise IngestionError(f"{path}: category {cid} has isthing={isthing}, expected 0 or 1")
        if cid in mapping:
            raise IngestionError(f"{path}: duplicate category id {cid}")
        mapping[cid] = len(out)
        out.append({"id": len(out), "name": str(c.get("name", cid)), "isthing": isthing, "coco_id": cid})
    return mapping, out


def load_coco_panoptic(json_path, image_root, panoptic_root=None, load_images: bool = True):
    """Parse a COCO panoptic file into ``(samples, categories)``.

    Category ids are remapped to contiguous indices in file order.
    ``panoptic_root`` defaults to the directory named like the JSON file
    without its extension. Crowd segments are skipped.
    """
    json_path = Path(json_path)
    image_root = Path(image_root)
    panoptic_root = Path(panoptic_root) if panoptic_root else json_path.with_suffix("")
    data = _read_json(json_path)
    cat_map, categories = _categories(data, json_path)
    anns = data.get("annotations", [])
    if not isinstance(anns, list):
        raise IngestionError(f"{json_path}: 'annotations' must be a list")
    images = {}
    for rec in data.get("images", []):
        try:
            images[int(rec["id"])] = rec
        except (KeyError, TypeError, ValueError):
            raise IngestionError(f"{json_path}: image record without integer 'id': {rec!r}") from None
    samples = []
    for k, ann in enumerate(anns):
        where = f"{json_path}: annotation {k}"
        try:
            png_name = ann["file_name"]
            segments = ann["segments_info"]
            image_id = int(ann["image_id"])
        except (KeyError, TypeError, ValueError):
            raise IngestionError(f"{where}: needs 'image_id', 'file_name' and 'segments_info'") from None
        png_path = panoptic_root / png_name
        if not png_path.exists():
            raise IngestionError(f"{where}: segment map {png_path} not found")
        ids = rgb2id(np.asarray(Image.open(png_path).convert("RGB")))
        present = set(np.unique(ids).tolist())
        h, w = ids.shape
        objects = []
        for seg in segments:
            try:
                sid, cid = int(seg["id"]), int(seg["category_id"])
            except (KeyError, TypeError, ValueError):
                raise IngestionError(f"{where}: segment record needs integer 'id' and 'category_id'") from None
            if cid not in cat_map:
                raise IngestionError(f"{where}: segment {sid} has unknown category {cid}")
            if sid not in present:
                raise IngestionError(f"{where}: segment id {sid} not present in {png_path.name}")
            if seg.get("iscrowd", 0):
                continue
            cat = cat_map[cid]
            objects.append(GTObject(cat, ids == sid, bool(categories[cat]["isthing"])))
        img = np.zeros((h, w, 3), dtype=np.uint8)
        info = images.get(image_id)
        if load_images:
            if info is None or "file_name" not in info:
                raise IngestionError(f"{where}: no image record for image_id {image_id}")
            img_path = image_root / info["file_name"]
            if not img_path.exists():
                raise IngestionError(f"{where}: image {img_path} not found")
            img = np.asarray(Image.open(img_path).convert("RGB"))
            if img.shape[:2] != (h, w):
                raise IngestionError(f"{where}: image {img.shape[:2]} and segment map {(h, w)} sizes differ")
        samples.append(Sample(img, GroundTruth(objects, h, w), Path(png_name).stem))
    return samples, categories
