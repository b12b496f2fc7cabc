import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image
from scipy import stats

from diffseg.harness.coco import IngestionError, load_coco_panoptic
from diffseg.harness.config import Config, ConfigError, dump_config, from_dict, load_config
from diffseg.harness.data import (
    SHAPES, DataError, GroundTruth, GTObject, Sample, augment, downsample_mask, gen_shapes, load_dataset,
    make_target, rle_decode, rle_encode, save_dataset,
)
from diffseg.harness.io import read_predictions, write_predictions
from diffseg.harness.train import (
    CHECKPOINT_MAGIC, CheckpointError, load_model, noisy_batch, read_checkpoint, schedule_for, segment_all,
    train, train_step,
)
from diffseg.harness.visualize import diffusion_panels, lag1_autocorrelation, overlay, render_mask, strip, visualize
from diffseg.model import SegModel
from diffseg.sampler import Prediction

TINY = dict(num_masks=12, num_layers=2, dim=16, heads=2, backbone_widths=[4, 4, 6, 6, 8, 8], batch_size=2,
            iterations=6, checkpoint_every=3, log_every=2, lr=5e-4)


# ---- config ----

def test_config_defaults_are_published_values():
    c = Config()
    assert c.num_masks == 100
    assert c.num_layers == 9
    assert c.dim == 256
    assert c.T == 1000
    assert c.scale == 0.1
    assert c.encoding == "binary"
    assert c.steps == 1
    assert c.loss_weights == [2.0, 5.0, 5.0]
    assert c.optimizer == "adamw" and c.lr == 1e-4 and c.weight_decay == 0.05


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("dim: 64\nnum_layers: 3\nthing_classes: [0, 2]\n")
    cfg = load_config(path, ["lr=0.001", "flip=false", "lr_drops=0.5,0.8"])
    assert (cfg.dim, cfg.num_layers, cfg.thing_classes) == (64, 3, [0, 2])
    assert cfg.lr == 0.001 and cfg.flip is False and cfg.lr_drops == [0.5, 0.8]
    dump_config(cfg, tmp_path / "out.yaml")
    assert load_config(tmp_path / "out.yaml") == cfg


@pytest.mark.parametrize("bad", [
    {"nonsense": 1},
    {"dim": "abc"},
    {"dim": 30, "heads": 8},
    {"encoding": "gray"},
    {"image_size": 50},
    {"thing_classes": [7]},
    {"lr_drops": [0.9, 0.5]},
    {"steps": 0},
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


def test_config_must_be_flat(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("optim:\n  lr: 1\n")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(None, ["novalue"])


# ---- synthetic data ----

def test_gen_shapes_deterministic(tmp_path):
    a = gen_shapes(6, seed=3)
    b = gen_shapes(6, seed=3)
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    assert not np.array_equal(gen_shapes(1, seed=4)[0].image, a[0].image)


def test_gen_shapes_contract():
    for s in gen_shapes(60, seed=0):
        assert s.image.shape == (64, 64, 3) and s.image.dtype == np.uint8
        things = [o for o in s.gt.objects if o.is_thing]
        stuff = [o for o in s.gt.objects if not o.is_thing]
        assert 1 <= len(things) <= 6 and len(stuff) == 1
        assert all(o.category in (0, 1, 2) for o in things) and stuff[0].category in (3, 4)
        cover = np.zeros((64, 64), dtype=int)
        for o in s.gt.objects:
            assert o.mask.shape == (64, 64) and o.mask.any()
            cover += o.mask
        assert cover.max() == 1  # panoptic masks are disjoint
        void = 1 - cover.mean()
        assert 0.02 <= void <= 0.10


def test_gen_shapes_class_balance():
    counts = np.zeros(len(SHAPES))
    for s in gen_shapes(1000, seed=11):
        for o in s.gt.objects:
            if o.is_thing:
                counts[o.category] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_dataset_roundtrip(tmp_path):
    samples = gen_shapes(3, seed=1)
    save_dataset(samples, tmp_path)
    back = load_dataset(tmp_path)
    for a, b in zip(samples, back):
        assert a.name == b.name
        np.testing.assert_array_equal(a.image, b.image)
        for oa, ob in zip(a.gt.objects, b.gt.objects):
            assert (oa.category, oa.is_thing) == (ob.category, ob.is_thing)
            np.testing.assert_array_equal(oa.mask, ob.mask)


def test_dataset_errors(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    save_dataset(gen_shapes(1), tmp_path)
    with open(tmp_path / "annotations.jsonl", "a") as fh:
        fh.write("{broken\n")
    with pytest.raises(DataError, match=":2:"):
        load_dataset(tmp_path)


def test_rle_bit_exact_examples():
    m = np.array([[0, 0, 1], [1, 1, 0]], dtype=bool)
    assert rle_encode(m) == {"size": [2, 3], "counts": [2, 3, 1]}
    assert rle_encode(np.array([[1, 1], [0, 1]], dtype=bool))["counts"] == [0, 2, 1, 1]
    assert rle_encode(np.zeros((2, 2), dtype=bool))["counts"] == [4]
    assert rle_encode(np.ones((2, 2), dtype=bool))["counts"] == [0, 4]
    with pytest.raises(DataError):
        rle_decode({"size": [2, 2], "counts": [1, 2]})


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 32 - 1), st.floats(0, 1))
def test_rle_roundtrip(h, w, seed, p):
    m = np.random.default_rng(seed).random((h, w)) < p
    rle = rle_encode(m)
    assert sum(rle["counts"]) == h * w
    assert all(c > 0 for c in rle["counts"][1:])
    np.testing.assert_array_equal(rle_decode(json.loads(json.dumps(rle))), m)


def test_downsample_mask():
    m = np.zeros((8, 8), dtype=bool)
    m[:4, :2] = True  # half of each left cell
    np.testing.assert_array_equal(downsample_mask(m), [[True, False], [False, False]])
    tiny = np.zeros((8, 8), dtype=bool)
    tiny[5, 6] = True
    np.testing.assert_array_equal(downsample_mask(tiny), [[False, False], [False, True]])


def test_augment_keeps_geometry():
    rng = np.random.default_rng(0)
    for s in gen_shapes(10, seed=2):
        out = augment(s, rng, flip=True, jitter=0.25)
        assert out.image.shape == s.image.shape
        cover = sum(o.mask.astype(int) for o in out.gt.objects)
        assert cover.max() <= 1
        assert all(o.mask.sum() >= 16 for o in out.gt.objects)


def test_make_target_shapes():
    s = gen_shapes(1)[0]
    tgt = make_target(s.gt)
    assert tuple(tgt.masks.shape) == (len(s.gt.objects), 16, 16)
    assert tgt.labels.tolist() == [o.category for o in s.gt.objects]
    empty = make_target(GroundTruth([], 64, 64))
    assert len(empty) == 0 and tuple(empty.masks.shape) == (0, 16, 16)


# ---- COCO panoptic ----

def _coco_fixture(tmp_path, segments=None, annotations=None):
    ids = np.zeros((4, 6), dtype=np.int64)
    ids[:2, :3] = 7
    ids[2:, :] = 300  # 300 = (44, 1, 0) in the id encoding
    rgb = np.stack([ids % 256, ids // 256 % 256, ids // 65536], -1).astype(np.uint8)
    (tmp_path / "panoptic").mkdir()
    Image.fromarray(rgb).save(tmp_path / "panoptic" / "000001.png")
    (tmp_path / "images").mkdir()
    Image.fromarray(np.full((4, 6, 3), 90, dtype=np.uint8)).save(tmp_path / "images" / "000001.jpg")
    segs = segments if segments is not None else [
        {"id": 7, "category_id": 18, "iscrowd": 0},
        {"id": 300, "category_id": 184, "iscrowd": 0},
    ]
    data = {
        "images": [{"id": 1, "file_name": "000001.jpg", "height": 4, "width": 6}],
        "annotations": annotations if annotations is not None else
        [{"image_id": 1, "file_name": "000001.png", "segments_info": segs}],
        "categories": [{"id": 18, "name": "dog", "isthing": 1}, {"id": 184, "name": "grass", "isthing": 0}],
    }
    path = tmp_path / "panoptic.json"
    path.write_text(json.dumps(data))
    return path


def test_coco_minimal_fixture(tmp_path):
    path = _coco_fixture(tmp_path)
    samples, cats = load_coco_panoptic(path, tmp_path / "images", tmp_path / "panoptic")
    assert [c["name"] for c in cats] == ["dog", "grass"] and [c["isthing"] for c in cats] == [1, 0]
    assert len(samples) == 1
    gt = samples[0].gt
    assert (gt.height, gt.width) == (4, 6) and len(gt.objects) == 2
    dog, grass = gt.objects
    assert (dog.category, dog.is_thing, int(dog.mask.sum())) == (0, True, 6)
    assert (grass.category, grass.is_thing, int(grass.mask.sum())) == (1, False, 12)
    assert dog.mask[:2, :3].all()
    assert samples[0].image.shape == (4, 6, 3)


def test_coco_empty_annotations(tmp_path):
    path = _coco_fixture(tmp_path, annotations=[])
    samples, _ = load_coco_panoptic(path, tmp_path / "images", tmp_path / "panoptic")
    assert samples == []


def test_coco_missing_segment_id(tmp_path):
    path = _coco_fixture(tmp_path, segments=[{"id": 999, "category_id": 18}])
    with pytest.raises(IngestionError, match="999"):
        load_coco_panoptic(path, tmp_path / "images", tmp_path / "panoptic")


def test_coco_malformed(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(IngestionError, match="bad.json"):
        load_coco_panoptic(bad, tmp_path)
    with pytest.raises(IngestionError, match="not found"):
        load_coco_panoptic(tmp_path / "missing.json", tmp_path)
    path = _coco_fixture(tmp_path, segments=[{"id": 7, "category_id": 5}])
    with pytest.raises(IngestionError, match="annotation 0"):
        load_coco_panoptic(path, tmp_path / "images", tmp_path / "panoptic")


# ---- training ----

def _tiny_cfg(**kw):
    return from_dict({**TINY, **kw})


def test_first_loss_finite_positive():
    cfg = _tiny_cfg()
    torch.manual_seed(0)
    model = SegModel.from_config(cfg)
    rng = np.random.default_rng(0)
    loss = train_step(model, noisy_batch(gen_shapes(2), cfg, schedule_for(cfg), rng), cfg)
    assert np.isfinite(loss.total.item()) and loss.total.item() > 0
    assert len(loss.per_layer) == cfg.num_layers


def test_noisy_batch_contract():
    cfg = _tiny_cfg()
    images, targets, noisy, ts = noisy_batch(gen_shapes(3), cfg, schedule_for(cfg), np.random.default_rng(0))
    assert tuple(images.shape) == (3, 3, 64, 64)
    assert tuple(noisy.shape) == (3, 12, 16, 16)
    assert noisy.abs().max() <= cfg.scale
    assert ((ts >= 1) & (ts <= cfg.T)).all()
    assert len(targets) == 3


def test_resume_is_bit_exact(tmp_path):
    samples = gen_shapes(5, seed=9)
    cfg = _tiny_cfg()
    full_losses, part_losses = [], []
    full = train(cfg, samples, out_dir=tmp_path / "full", callback=lambda i, l: full_losses.append(l.total.item()))
    train(cfg, samples, out_dir=tmp_path / "part", stop_at=3,
          callback=lambda i, l: part_losses.append(l.total.item()))
    resumed = train(cfg, samples, out_dir=tmp_path / "part", resume=tmp_path / "part" / "checkpoint_000003.pt",
                    callback=lambda i, l: part_losses.append(l.total.item()))
    assert part_losses == full_losses and len(full_losses) == 6
    a, b = read_checkpoint(full), read_checkpoint(resumed)
    assert a["state"] == b["state"]
    for k in a["model"]:
        assert torch.equal(a["model"][k], b["model"][k]), k


def test_resume_rejects_other_config(tmp_path):
    samples = gen_shapes(2)
    path = train(_tiny_cfg(iterations=1), samples, out_dir=tmp_path)
    with pytest.raises(CheckpointError):
        train(_tiny_cfg(iterations=2), samples, out_dir=tmp_path, resume=path)


def test_checkpoint_versioning(tmp_path):
    samples = gen_shapes(2)
    path = train(_tiny_cfg(iterations=1), samples, out_dir=tmp_path)
    model, cfg = load_model(path)
    assert cfg == _tiny_cfg(iterations=1)
    blob = torch.load(path, weights_only=True)
    blob["header"]["version"] = 99
    torch.save(blob, tmp_path / "v99.pt")
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(tmp_path / "v99.pt")
    blob["header"] = {"magic": "other", "version": 1}
    torch.save(blob, tmp_path / "other.pt")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "other.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "junk.pt")
    assert CHECKPOINT_MAGIC in json.dumps(read_checkpoint(path)["header"])


def test_invalid_config_aborts_before_compute(tmp_path):
    cfg = _tiny_cfg()
    cfg.dim = 15
    with pytest.raises(ConfigError):
        train(cfg, gen_shapes(1), out_dir=tmp_path)
    assert not any(tmp_path.iterdir())


# ---- prediction files ----

def test_prediction_file_roundtrip(tmp_path):
    cfg = _tiny_cfg()
    rng = np.random.default_rng(0)
    preds = [Prediction(torch.from_numpy(rng.normal(size=(12, 16, 16)) * 4),
                        torch.from_numpy(rng.normal(size=(12, 6)) * 4)) for _ in range(2)]
    results = segment_all(preds, cfg.replace(object_threshold=0.3))
    write_predictions(tmp_path / "p.jsonl", ["a", "b"], results)
    names, back = read_predictions(tmp_path / "p.jsonl")
    assert names == ["a", "b"]
    for i in range(2):
        np.testing.assert_array_equal(back["panoptic"][i].label_map, results["panoptic"][i].label_map)
        assert back["panoptic"][i].segments == results["panoptic"][i].segments
        np.testing.assert_array_equal(back["semantic"][i].semantic, results["semantic"][i].semantic)
        for x, y in zip(back["instance"][i].instances, results["instance"][i].instances):
            assert x.category == y.category and x.score == y.score and np.array_equal(x.mask, y.mask)


# ---- visualization ----

def test_diffusion_strip_endpoints():
    sched = schedule_for(Config())
    mask = np.zeros((64, 64), dtype=bool)
    mask[16:48, 20:44] = True
    ts, panels = diffusion_panels(mask, sched, np.random.default_rng(0))
    assert ts == [0, 250, 500, 750, 1000]
    np.testing.assert_array_equal(panels[0], render_mask(np.where(mask, 0.1, -0.1), 0.1))
    assert lag1_autocorrelation(panels[0]) > 0.9
    assert abs(lag1_autocorrelation(panels[-1])) < 0.1
    s = strip(panels)
    assert s.shape == (64, 5 * 64 + 4 * 2)
    np.testing.assert_array_equal(s[:, :64], panels[0])


def test_overlay_and_files(tmp_path):
    s = gen_shapes(1)[0]
    res = s.gt.panoptic()
    out = overlay(s.image, res)
    assert out.shape == s.image.shape and out.dtype == np.uint8
    path = visualize(s.image, res, "overlay", tmp_path / "o.png")
    assert Image.open(path).size == (64, 64)
    path = visualize(s.image, s.gt.objects[0].mask, "diffusion", tmp_path / "d.png", schedule_for(Config()))
    assert Image.open(path).size == (5 * 64 + 8, 64)
    with pytest.raises(ValueError):
        visualize(s.image, res, "bogus", tmp_path / "x.png")
