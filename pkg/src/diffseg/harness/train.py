"""Training loop, checkpoint container and evaluation drivers."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..criterion import assign, batch_loss, match_cost
from ..decoder import Prediction, run_decoder
from ..mask_codec import corrupt, encode, pad_masks
from ..metrics import mask_ap, mean_iou, panoptic_quality
from ..model import SegModel
from ..sampler import POSTPROCESS, SegMeta, infer
from ..schedule import Schedule, make_schedule
from .config import Config, from_dict
from .data import Sample, augment, image_tensor, load_dataset, make_target

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "diffseg-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainState:
    iteration: int = 0
    epoch_perm: list[int] = field(default_factory=list)
    epoch_pos: int = 0
    losses: list[float] = field(default_factory=list)


def schedule_for(cfg: Config) -> Schedule:
    return make_schedule(cfg.T, cfg.schedule, cfg.scale)


def meta_for(cfg: Config) -> SegMeta:
    return SegMeta((cfg.image_size, cfg.image_size), cfg.num_classes, tuple(cfg.thing_classes),
                   cfg.object_threshold, cfg.overlap_threshold, cfg.topk)


def make_optimizer(model: SegModel, cfg: Config):
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    milestones = sorted({max(1, int(round(f * cfg.iterations))) for f in cfg.lr_drops})
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones, gamma=cfg.lr_drop_factor)
    return opt, sched


def noisy_batch(samples: list[Sample], cfg: Config, sched: Schedule, rng: np.random.Generator):
    """Images, targets, corrupted padded masks and per-image timesteps for one batch."""
    images, targets, noisy, ts = [], [], [], []
    size = (cfg.mask_size, cfg.mask_size)
    for s in samples:
        tgt = make_target(s.gt)
        t = int(rng.integers(1, sched.T + 1))
        padded = pad_masks(list(tgt.masks), cfg.num_masks, rng, size=size)
        m = corrupt(encode(padded, cfg.scale, cfg.encoding, rng), t, sched, rng)
        images.append(image_tensor(s.image))
        targets.append(tgt)
        noisy.append(m.data)
        ts.append(t)
    return torch.stack(images), targets, torch.stack(noisy), torch.tensor(ts)


def train_step(model: SegModel, batch, cfg: Config, opt=None):
    images, targets, noisy, ts = batch
    pyr = model.pixel(images)
    preds = run_decoder(pyr, noisy, ts, model.decoder, cfg.scale)
    loss = batch_loss(preds, targets, tuple(cfg.loss_weights))
    if opt is not None:
        opt.zero_grad(set_to_none=True)
        loss.total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
    return loss


def save_checkpoint(path, model, opt, lr_sched, cfg: Config, state: TrainState, rng: np.random.Generator) -> None:
    blob = {
        "header": {"magic": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION},
        "config": cfg.to_dict(),
        "model": model.state_dict(),
        "optimizer": opt.state_dict() if opt is not None else None,
        "lr_schedule": lr_sched.state_dict() if lr_sched is not None else None,
        "rng": json.dumps(rng.bit_generator.state),
        "torch_rng": torch.get_rng_state(),
        "state": {"iteration": state.iteration, "epoch_perm": list(state.epoch_perm),
                  "epoch_pos": state.epoch_pos, "losses": list(state.losses)},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"{path}: not a checkpoint container ({e})") from None
    header = blob.get("header") if isinstance(blob, dict) else None
    if not header or header.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: missing checkpoint header")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} != supported {CHECKPOINT_VERSION}")
    return blob


def load_model(path) -> tuple[SegModel, Config]:
    blob = read_checkpoint(path)
    cfg = from_dict(blob["config"])
    model = SegModel.from_config(cfg)
    model.load_state_dict(blob["model"])
    model.eval()
    return model, cfg


def _next_indices(state: TrainState, n: int, batch: int, rng: np.random.Generator) -> list[int]:
    out = []
    while len(out) < batch:
        if state.epoch_pos >= len(state.epoch_perm):
            state.epoch_perm = rng.permutation(n).tolist()
            state.epoch_pos = 0
        take = min(batch - len(out), len(state.epoch_perm) - state.epoch_pos)
        out += state.epoch_perm[state.epoch_pos:state.epoch_pos + take]
        state.epoch_pos += take
    return out


def train(cfg: Config, samples: list[Sample] | None = None, resume=None, out_dir=None,
          stop_at: int | None = None, callback=None) -> Path:
    """Train for ``cfg.iterations`` steps and return the final checkpoint path.

    ``resume`` continues bit-exactly from a checkpoint; ``stop_at`` ends the
    run early (after writing a checkpoint) without changing the schedule.
    """
    cfg.validate()
    out_dir = Path(out_dir or cfg.out_dir)
    if samples is None:
        samples = load_dataset(cfg.data_dir)
    if not samples:
        raise ValueError("training set is empty")
    torch.manual_seed(cfg.seed)
    model = SegModel.from_config(cfg)
    opt, lr_sched = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    state = TrainState()
    if resume is not None:
        blob = read_checkpoint(resume)
        if blob["config"] != cfg.to_dict():
            raise CheckpointError(f"{resume}: checkpoint config differs from the requested config")
        model.load_state_dict(blob["model"])
        opt.load_state_dict(blob["optimizer"])
        lr_sched.load_state_dict(blob["lr_schedule"])
        rng.bit_generator.state = json.loads(blob["rng"])
        torch.set_rng_state(blob["torch_rng"])
        state = TrainState(**blob["state"])
    sched = schedule_for(cfg)
    model.train()
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    t0 = time.time()
    path = out_dir / "checkpoint.pt"
    while state.iteration < end:
        idx = _next_indices(state, len(samples), cfg.batch_size, rng)
        batch = [augment(samples[i], rng, cfg.flip, cfg.scale_jitter) for i in idx]
        loss = train_step(model, noisy_batch(batch, cfg, sched, rng), cfg, opt)
        lr_sched.step()
        state.iteration += 1
        value = float(loss.total.detach())
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss at iteration {state.iteration}")
        state.losses.append(value)
        if callback is not None:
            callback(state.iteration, loss)
        if state.iteration % cfg.log_every == 0:
            recent = np.mean(state.losses[-cfg.log_every:])
            log.info("iter %d loss %.4f (%.1fs)", state.iteration, recent, time.time() - t0)
        if state.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_{state.iteration:06d}.pt", model, opt, lr_sched, cfg, state, rng)
    save_checkpoint(path, model, opt, lr_sched, cfg, state, rng)
    return path


# ---------------------------------------------------------------- evaluation

def predict_samples(model: SegModel, cfg: Config, samples: list[Sample], steps: int | None = None,
                    num_masks: int | None = None, seed: int = 0, batch_size: int = 16) -> list[Prediction]:
    """Final-layer predictions for every sample; image ``i`` uses noise seeded by ``(seed, i)``."""
    steps = cfg.steps if steps is None else steps
    num_masks = cfg.num_masks if num_masks is None else num_masks
    sched = schedule_for(cfg)
    model.eval()
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = torch.stack([image_tensor(s.image) for s in chunk])
        rngs = [np.random.default_rng([seed, start + i]) for i in range(len(chunk))]
        _, final = infer(images, model, steps, rngs, sched, num_masks, cfg.init_noise)
        out += [Prediction(final.mask_logits[i], final.class_logits[i]) for i in range(len(chunk))]
    return out


def evaluate(model: SegModel, cfg: Config, samples: list[Sample], steps: int | None = None,
             num_masks: int | None = None, seed: int = 0) -> dict:
    preds = predict_samples(model, cfg, samples, steps, num_masks, seed)
    return evaluate_predictions(preds, samples, cfg)


def segment_all(preds: list[Prediction], cfg: Config) -> dict[str, list]:
    meta = meta_for(cfg)
    return {task: [fn(p, meta) for p in preds] for task, fn in POSTPROCESS.items()}


def evaluate_predictions(preds: list[Prediction], samples: list[Sample], cfg: Config) -> dict:
    results = segment_all(preds, cfg)
    return metrics_report(results, [s.gt for s in samples], cfg)


def metrics_report(results: dict[str, list], gts, cfg: Config) -> dict:
    report = {}
    if "panoptic" in results:
        pq = panoptic_quality(results["panoptic"], [g.panoptic() for g in gts], cfg.thing_classes)
        report.update(pq=pq.pq, pq_thing=pq.pq_thing, pq_stuff=pq.pq_stuff)
    if "instance" in results:
        ap = mask_ap(results["instance"], [g.instances() for g in gts], classes=list(cfg.thing_classes))
        report.update(ap.to_dict())
    if "semantic" in results:
        report["miou"] = mean_iou(results["semantic"], [g.semantic_map() for g in gts], cfg.num_classes)
    return report


def matched_mask_iou(model: SegModel, cfg: Config, samples: list[Sample], steps: int = 1, seed: int = 0) -> float:
    """Mean IoU between each ground-truth mask and its Hungarian-matched prediction, at mask resolution."""
    preds = predict_samples(model, cfg, samples, steps=steps, seed=seed)
    ious = []
    for p, s in zip(preds, samples):
        tgt = make_target(s.gt)
        if len(tgt) == 0:
            continue
        m = assign(match_cost(p, tgt, tuple(cfg.loss_weights)).numpy())
        for i, j in m.pairs:
            pm = p.mask_logits[i] > 0
            gm = tgt.masks[j] > 0.5
            ious.append(float((pm & gm).sum()) / float((pm | gm).sum()))
    return float(np.mean(ious))
