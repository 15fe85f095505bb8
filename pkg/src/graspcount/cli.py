"""``graspcount`` command line: generate | train | evaluate | report.

Every command accepts ``--config`` (a JSON ``ExperimentConfig``); explicit
flags override file values. Each output directory receives the resolved
config and seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch

from .config import ExperimentConfig
from .dataset import CompositeStore, DatasetManifest
from .metrics import evaluate, evaluate_max_over_views, load_report, render_report
from .models import ContrastiveModel, load_checkpoint, save_checkpoint
from .synthgen import SHAPES, ClassDistribution, generate_dataset
from .trainer import STAGES, train_classifier, train_encoder, train_transformer_baseline

logger = logging.getLogger("graspcount")

STAGE_DEFAULT_LOSS = {"contrastive": "supcon", "classifier": "cross_entropy", "transformer-baseline": "error_sensitive"}
CHECKPOINT_NAMES = {
    "contrastive": "encoder.safetensors",
    "classifier": "classifier.safetensors",
    "transformer-baseline": "transformer.safetensors",
}


class CommandError(RuntimeError):
    pass


def _weights(text: str):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _override(section, **values):
    """Copy of a pydantic section with the non-None values applied (and re-validated)."""
    data = section.model_dump()
    given = {k: v for k, v in values.items() if v is not None}
    data.update(given)
    out = type(section).model_validate(data)
    # keep track of what was set explicitly, in the file or on the command line
    out.__pydantic_fields_set__ = set(section.model_fields_set) | set(given)
    return out


def _provenance(cfg: ExperimentConfig, seed: int, command: str, outdir: Path, name: str = "config.json") -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "seed": seed, "config": cfg.model_dump(mode="json")}
    with open(outdir / name, "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")


def _manifest_path(data: str) -> Path:
    p = Path(data)
    return p / "manifest.jsonl" if p.is_dir() else p


def _load_manifest(cfg: ExperimentConfig, data: Optional[str]) -> DatasetManifest:
    data = data or cfg.paths.data
    if data is None:
        raise CommandError("no dataset given: pass --data or set paths.data")
    path = _manifest_path(data)
    if not path.exists():
        raise CommandError(f"manifest not found: {path}")
    return DatasetManifest.from_jsonl(path, num_classes=cfg.head.num_classes)


def _outdir(cfg: ExperimentConfig, out: Optional[str]) -> Path:
    out = out or cfg.paths.out
    if out is None:
        raise CommandError("no output directory given: pass --out or set paths.out")
    return Path(out)


def cmd_generate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    cfg.generate = _override(
        cfg.generate,
        shape=args.shape,
        n_samples=args.n,
        image_size=args.image_size,
        occlusion_level=args.occlusion,
        weights=args.weights,
        split_ratio=args.split_ratio,
    )
    if args.out:
        cfg.paths = _override(cfg.paths, data=args.out)
    seed = cfg.resolved_seed(args.seed)
    cfg.seed = seed
    g = cfg.generate
    if g.shape not in SHAPES:
        raise CommandError(f"unknown shape {g.shape!r}; expected one of {SHAPES}")
    out = Path(args.out or cfg.paths.data or "")
    if not str(out):
        raise CommandError("no output directory given: pass --out or set paths.data")
    manifest = generate_dataset(
        g.shape,
        g.n_samples,
        ClassDistribution(tuple(g.weights)),
        seed,
        out,
        image_size=g.image_size,
        occlusion_level=g.occlusion_level,
        split_ratio=g.split_ratio,
    )
    _provenance(cfg, seed, "generate", out)
    print(json.dumps({"samples": len(manifest), "class_counts": manifest.class_counts(), "out": str(out)}))
    return 0


def _train_section(cfg: ExperimentConfig, args):
    return _override(
        cfg.train,
        loss=args.loss,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        patience=args.patience,
        single_view=True if args.single_view else None,
        rotation_mode=True if args.rotation_mode else None,
        fine_tune=True if args.fine_tune else None,
        augment=False if args.no_augment else None,
    )


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    cfg.train = _train_section(cfg, args)
    if "loss" not in cfg.train.model_fields_set:
        cfg.train = _override(cfg.train, loss=STAGE_DEFAULT_LOSS[args.stage])
    seed = cfg.resolved_seed(args.seed)
    cfg.seed = seed
    out = _outdir(cfg, args.out)
    manifest = _load_manifest(cfg, args.data)
    train_cfg = cfg.train_config(args.stage, seed)
    loss_cfg = cfg.loss_config()
    store = CompositeStore()

    if args.stage == "classifier":
        ckpt = Path(args.encoder) if args.encoder else out / CHECKPOINT_NAMES["contrastive"]
        if not ckpt.exists():
            raise CommandError(f"stage 2 needs a stage-1 checkpoint; not found: {ckpt} (run --stage contrastive first)")
        model, header = load_checkpoint(ckpt)
        if header["kind"] != "encoder" or not isinstance(model, ContrastiveModel):
            raise CommandError(f"{ckpt} is not a stage-1 encoder checkpoint")
        model, log = train_classifier(model, manifest, cfg.head_config(), train_cfg, loss_cfg, store)
        kind = "classifier"
    elif args.stage == "contrastive":
        model, log = train_encoder(manifest, cfg.encoder_config(), cfg.head_config(), train_cfg, loss_cfg, store)
        kind = "encoder"
    else:
        model, log = train_transformer_baseline(manifest, cfg.transformer_config(), train_cfg, loss_cfg, store)
        kind = "transformer"

    out.mkdir(parents=True, exist_ok=True)
    path = out / CHECKPOINT_NAMES[args.stage]
    save_checkpoint(model, path, kind, extra={"seed": seed, "config_hash": log.config_hash, "best_epoch": log.best_epoch})
    log.write_jsonl(out / f"train_log_{args.stage}.jsonl")
    _provenance(cfg, seed, f"train --stage {args.stage}", out, f"config_{args.stage}.json")
    print(json.dumps({"checkpoint": str(path), "epochs": len(log.epochs), "best_epoch": log.best_epoch}))
    return 0


def cmd_evaluate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    seed = cfg.resolved_seed(args.seed)
    cfg.seed = seed
    out = _outdir(cfg, args.out)
    manifest = _load_manifest(cfg, args.data)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CommandError(f"checkpoint not found: {ckpt}")
    model, header = load_checkpoint(ckpt)
    if header["kind"] == "encoder":
        raise CommandError(f"{ckpt} holds a stage-1 encoder only; train the classifier first")
    torch.manual_seed(seed)
    if any(e.split is not None for e in manifest.entries):
        test = manifest.subset(args.split)
    else:
        test = manifest
    if len(test) == 0:
        raise CommandError(f"no entries in split {args.split!r}")
    store = CompositeStore()
    if args.ablation == "max-over-views":
        report = evaluate_max_over_views(model, test, store)
    else:
        report = evaluate(model, test, store)
    paths = render_report(report, out)
    _provenance(cfg, seed, "evaluate", out)
    print(json.dumps({"overall_accuracy": report.overall_accuracy, "rmse": report.rmse, **{k: str(v) for k, v in paths.items()}}))
    return 0


def cmd_report(args) -> int:
    src = Path(args.metrics)
    if src.is_dir():
        src = src / "metrics.json"
    if not src.exists():
        raise CommandError(f"metrics file not found: {src}")
    report = load_report(src)
    out = Path(args.out) if args.out else src.parent
    render_report(report, out)
    print((out / "report.txt").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graspcount", description="Object counting from multi-view grasp images.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON experiment config; flags override its values")
        if seed:
            sp.add_argument("--seed", type=int, help=f"seed (falls back to the config, then $GRASPCOUNT_SEED, then 0)")

    g = sub.add_parser("generate", help="render a synthetic dataset")
    common(g)
    g.add_argument("--shape", choices=SHAPES)
    g.add_argument("--n", type=int, help="number of samples")
    g.add_argument("--out", help="dataset directory")
    g.add_argument("--image-size", type=int)
    g.add_argument("--occlusion", type=float, help="finger occlusion level in [0, 1]")
    g.add_argument("--weights", type=_weights, help="class probabilities, e.g. 0.2,0.2,0.2,0.2,0.2")
    g.add_argument("--split-ratio", type=float)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one stage")
    common(t)
    t.add_argument("--stage", choices=STAGES, required=True)
    t.add_argument("--data", help="dataset directory or manifest.jsonl")
    t.add_argument("--out", help="run directory for checkpoints and logs")
    t.add_argument("--loss", choices=sorted(set(STAGE_DEFAULT_LOSS.values()) | {"fourier_supcon"}))
    t.add_argument("--encoder", help="stage-1 checkpoint (default: <out>/encoder.safetensors)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--single-view", action="store_true", help="train on one random view per sample")
    t.add_argument("--rotation-mode", action="store_true", help="rotate the contrastive anchor class per step")
    t.add_argument("--fine-tune", action="store_true", help="stage 2: also train the encoder")
    t.add_argument("--no-augment", action="store_true", help="disable random per-view flips")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory or manifest.jsonl")
    e.add_argument("--out", help="directory for metrics.json, confusion.png, report.txt")
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--ablation", choices=("max-over-views",), help="aggregate single-view predictions by their max")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="re-render confusion.png and report.txt from metrics.json")
    r.add_argument("--metrics", required=True, help="metrics.json or the directory holding it")
    r.add_argument("--out", help="output directory (default: next to metrics.json)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (CommandError, ValueError, OSError) as exc:
        print(f"graspcount {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
