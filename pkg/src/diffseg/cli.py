"""Command line entry point: ``diffseg <command> [--config FILE] [key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .harness.config import ConfigError, load_config, parse_overrides
from .harness.data import gen_shapes, load_dataset, save_dataset
from .harness.io import read_predictions, write_predictions
from .harness.train import (
    evaluate, load_model, metrics_report, predict_samples, schedule_for, segment_all, train,
)
from .harness.visualize import visualize
from .metrics import format_table

log = logging.getLogger("diffseg")

INFERENCE_KEYS = {"steps", "num_masks", "init_noise", "object_threshold", "overlap_threshold", "topk"}


def _cfg(args):
    return load_config(args.config, args.overrides)


def cmd_gen_data(args):
    cfg = _cfg(args)
    samples = gen_shapes(args.n, cfg.image_size, args.seed if args.seed is not None else cfg.seed)
    save_dataset(samples, args.out)
    return {"images": len(samples), "out": str(args.out)}


def cmd_train(args):
    cfg = _cfg(args)
    path = train(cfg, resume=args.resume)
    return {"checkpoint": str(path)}


def _model_and_cfg(args):
    model, cfg = load_model(args.checkpoint)
    over = parse_overrides(args.overrides)
    bad = set(over) - INFERENCE_KEYS
    if bad:
        raise ConfigError(f"only inference keys may be overridden for a trained model: {', '.join(sorted(bad))}")
    if over:
        cfg = cfg.replace(**over)
    return model, cfg


def cmd_infer(args):
    model, cfg = _model_and_cfg(args)
    samples = load_dataset(args.data)
    preds = predict_samples(model, cfg, samples, seed=args.seed)
    write_predictions(args.out, [s.name for s in samples], segment_all(preds, cfg))
    return {"images": len(samples), "predictions": str(args.out)}


def cmd_eval(args):
    cfg = _cfg(args)
    samples = load_dataset(args.data)
    names, per_task = read_predictions(args.predictions)
    by_name = {s.name: s for s in samples}
    missing = [n for n in names if n not in by_name]
    if missing or len(names) != len(samples):
        raise ValueError(f"prediction and ground-truth image sets differ (missing: {missing[:5]})")
    report = metrics_report(per_task, [by_name[n].gt for n in names], cfg)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    print(format_table(report))
    return report


def cmd_visualize(args):
    cfg = _cfg(args)
    samples = load_dataset(args.data)
    s = samples[args.index]
    if args.mode == "overlay":
        if not args.predictions:
            raise ValueError("overlay mode needs --predictions")
        names, per_task = read_predictions(args.predictions)
        result = per_task[cfg.task][names.index(s.name)]
        path = visualize(s.image, result, "overlay", args.out)
    else:
        things = [o for o in s.gt.objects if o.is_thing] or s.gt.objects
        path = visualize(s.image, things[0].mask, "diffusion", args.out, schedule_for(cfg),
                         np.random.default_rng(cfg.seed), cfg.encoding)
    return {"image": str(path)}


def _parse_sweep(items):
    sweep = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"sweep {item!r} is not key=v1,v2,...")
        k, v = item.split("=", 1)
        sweep[k] = [x for x in v.split(",") if x]
    return sweep


def cmd_ablate(args):
    """Evaluate inference-time settings on one checkpoint; retrain for everything else."""
    sweep = _parse_sweep(args.sweep)
    val = load_dataset(args.data)
    rows = []
    for key, values in sweep.items():
        for value in values:
            if key in INFERENCE_KEYS:
                if not args.checkpoint:
                    raise ValueError(f"sweeping {key} needs --checkpoint")
                model, cfg = load_model(args.checkpoint)
                cfg = cfg.replace(**{key: value})
            else:
                cfg = load_config(args.config, {**parse_overrides(args.overrides), key: value,
                                                "out_dir": str(Path(args.out_dir) / f"{key}_{value}")})
                model, cfg = load_model(train(cfg))
            report = evaluate(model, cfg, val, seed=args.seed)
            rows.append({"key": key, "value": value, **report})
            log.info("%s=%s %s", key, value, report)
    header = f"{'setting':<22}{'AP':>8}{'AP50':>8}{'AP75':>8}{'PQ':>8}{'mIoU':>8}"
    print(header)
    for r in rows:
        print(f"{r['key'] + '=' + r['value']:<22}" + "".join(f"{100 * r[k]:>8.2f}" for k in ("ap", "ap50", "ap75", "pq", "miou")))
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2))
    return {"rows": len(rows)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="flat key/value config file")
        sp.add_argument("overrides", nargs="*", help="key=value overrides")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a synthetic shapes dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int)

    sp = add("train", cmd_train, "train a model")
    sp.add_argument("--resume")

    sp = add("infer", cmd_infer, "run inference and write predictions")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("eval", cmd_eval, "score predictions against ground truth")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out")

    sp = add("visualize", cmd_visualize, "render an overlay or a diffusion strip")
    sp.add_argument("--data", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--mode", choices=("overlay", "diffusion"), default="overlay")
    sp.add_argument("--predictions")
    sp.add_argument("--out", required=True)

    sp = add("ablate", cmd_ablate, "sweep settings and tabulate metrics")
    sp.add_argument("--sweep", action="append", required=True, help="key=v1,v2,...")
    sp.add_argument("--data", required=True, help="validation dataset")
    sp.add_argument("--checkpoint")
    sp.add_argument("--out-dir", default="runs/ablate")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = args.func(args)
    except ConfigError as e:
        print(json.dumps({"error": "config", "message": str(e)}), file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, IndexError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    if args.command != "eval":
        print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
