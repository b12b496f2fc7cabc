"""JSON-lines serialization of segmentation results."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..sampler import Instance, Segment, SegmentationResult
from .data import DataError, rle_decode, rle_encode


def results_to_record(name: str, results: dict[str, SegmentationResult]) -> dict:
    rec: dict = {"name": name}
    if "panoptic" in results:
        r = results["panoptic"]
        rec["panoptic"] = {
            "size": list(r.label_map.shape),
            "segments": [{"id": s.id, "category": s.category, "is_thing": s.is_thing,
                          "rle": rle_encode(r.label_map == s.id)} for s in r.segments],
        }
    if "instance" in results:
        rec["instances"] = [{"category": i.category, "score": i.score, "rle": rle_encode(i.mask)}
                            for i in results["instance"].instances]
    if "semantic" in results:
        sem = results["semantic"].semantic
        rec["semantic"] = {"size": list(sem.shape),
                           "classes": {str(int(c)): rle_encode(sem == c) for c in np.unique(sem)}}
    return rec


def record_to_results(rec: dict) -> dict[str, SegmentationResult]:
    out = {}
    if "panoptic" in rec:
        p = rec["panoptic"]
        label_map = np.zeros(tuple(p["size"]), dtype=np.int32)
        segs = []
        for s in p["segments"]:
            label_map[rle_decode(s["rle"])] = int(s["id"])
            segs.append(Segment(int(s["id"]), int(s["category"]), bool(s["is_thing"])))
        out["panoptic"] = SegmentationResult("panoptic", label_map=label_map, segments=segs)
    if "instances" in rec:
        out["instance"] = SegmentationResult("instance", instances=[
            Instance(rle_decode(i["rle"]), int(i["category"]), float(i["score"])) for i in rec["instances"]])
    if "semantic" in rec:
        s = rec["semantic"]
        sem = np.zeros(tuple(s["size"]), dtype=np.int32)
        for c, rle in s["classes"].items():
            sem[rle_decode(rle)] = int(c)
        out["semantic"] = SegmentationResult("semantic", semantic=sem)
    return out


def write_predictions(path, names, per_task: dict[str, list]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for i, name in enumerate(names):
            rec = results_to_record(name, {task: res[i] for task, res in per_task.items()})
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_predictions(path) -> tuple[list[str], dict[str, list]]:
    names, per_task = [], {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                res = record_to_results(rec)
            except (json.JSONDecodeError, KeyError, DataError) as e:
                raise DataError(f"{path}:{line_no}: {e}") from None
            names.append(rec["name"])
            for task, r in res.items():
                per_task.setdefault(task, []).append(r)
    return names, per_task
