"""Command-line entry point: ``python -m scalessl <subcommand>``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import evalkit, harness, synth, train
from .core import ExperimentConfig, load_config, validate_config
from .errors import ScaleSSLError

log = logging.getLogger("scalessl")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else validate_config(ExperimentConfig())
    if args.seed is not None:
        cfg = validate_config(dataclasses.replace(cfg, seed=args.seed))
    return cfg


def _records(path):
    data = harness.ingest_dataset(path)
    log.info("loaded %d records from %s (L=%d)", len(data), path, data.base_L)
    return data


def cmd_synth(args) -> int:
    spec = synth.SynthSpec.default(args.kind, count=args.count, seed=args.seed or 0,
                                   image_size=(args.size, args.size))
    path = synth.write_dataset(synth.generate(spec), args.out, spec)
    print(f"wrote {spec.count} {spec.kind} records to {path.parent}")
    return 0


def cmd_ingest_check(args) -> int:
    data = _records(args.data)
    counts = {s: len(data.split(s)) for s in ("pretrain", "train", "val", "test")}
    sizes = {}
    for d in (2, 4, 8):
        try:
            sizes[f"L/{d}"] = harness.resolve_patch_size(data, d, args.stride_product)
        except ScaleSSLError as exc:
            sizes[f"L/{d}"] = str(exc)
    print(json.dumps({"records": len(data), "base_L": data.base_L, "splits": counts,
                      "stats": data.stats, "patch_sizes": sizes}, indent=2))
    return 0


def cmd_pretrain(args) -> int:
    data = _records(args.data)
    cfg, size = harness.resolve_run_config(_config(args), data)
    res = train.pretrain(data.split("pretrain", "train"), cfg, args.out, resume_from=args.resume)
    print(f"pretrained {res.step} steps at view size {size}; checkpoint {res.checkpoint}")
    return 0


def cmd_finetune(args) -> int:
    data = _records(args.data)
    cfg, size = harness.resolve_run_config(_config(args), data)
    labeled = train.select_labeled_subset(data.split("train"), cfg.label_fraction, cfg.seed)
    res = train.finetune_segmentation(args.encoder, labeled, cfg, size, data.split("val"), args.out)
    print(f"fine-tuned on {len(labeled)} images; best val Dice {res.best_val_dice:.4f}; "
          f"checkpoint {res.checkpoint}")
    return 0


def cmd_evaluate(args) -> int:
    data = _records(args.data)
    net, manifest = train.load_segmentation_net(args.seg)
    cfg = validate_config(harness.config_from_dict(manifest["config"]))
    rows, agg = train.evaluate_net(net, data.split(args.split), manifest["patch_size"], cfg,
                                   dataset=args.dataset, method=cfg.ssl_method,
                                   sampling=cfg.sampling, patch_divisor=harness.divisor_label(cfg))
    evalkit.write_eval_rows(rows, args.out)
    print(f"{args.split}: Dice {agg['dice']:.4f}  HD {agg['hd']:.2f}  (n={agg['n']})")
    return 0


def cmd_sweep(args) -> int:
    spec = harness.SweepSpec.from_dict(json.loads(Path(args.config).read_text()))
    if args.out:
        spec = dataclasses.replace(spec, output_dir=args.out)
    if args.seed is not None:
        spec.axes["seed"] = [args.seed]
    runs = harness.run_sweep(spec, _records(args.data))
    done = sum(r.status == "done" for r in runs)
    print(f"{done}/{len(runs)} cells done in {spec.output_dir}")
    return 0 if done == len(runs) else 1


def cmd_report(args) -> int:
    runs = list(harness.load_runs(args.sweep).values())
    paths = harness.emit_report(runs, args.out or args.sweep, average_methods=args.average_methods)
    print(Path(paths["markdown"]).read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scalessl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, *, config=True, data=True):
        sp = sub.add_parser(name)
        sp.set_defaults(fn=fn)
        if config:
            sp.add_argument("--config", help="JSON experiment config")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory or manifest")
        sp.add_argument("--seed", type=int)
        return sp

    sp = add("synth", cmd_synth, config=False, data=False)
    sp.add_argument("--kind", choices=synth.KINDS, required=True)
    sp.add_argument("--count", type=int, default=500)
    sp.add_argument("--size", type=int, default=96)
    sp.add_argument("--out", required=True)

    sp = add("ingest-check", cmd_ingest_check, config=False)
    sp.add_argument("--stride-product", type=int, default=4)

    sp = add("pretrain", cmd_pretrain)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="checkpoint directory to resume from")

    sp = add("finetune", cmd_finetune)
    sp.add_argument("--encoder", help="pretrained checkpoint (omit for supervised)")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, config=False)
    sp.add_argument("--seg", required=True, help="fine-tuned checkpoint directory")
    sp.add_argument("--split", default="test")
    sp.add_argument("--dataset", default="dataset")
    sp.add_argument("--out", required=True, help=".csv or .json")

    sp = add("sweep", cmd_sweep, config=False)
    sp.add_argument("--config", required=True, help="JSON sweep spec")
    sp.add_argument("--out")

    sp = add("report", cmd_report, config=False, data=False)
    sp.add_argument("--sweep", required=True)
    sp.add_argument("--out")
    sp.add_argument("--average-methods", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ScaleSSLError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
