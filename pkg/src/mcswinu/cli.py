"""Command-line pipeline: phantom -> pretrain -> finetune -> predict -> evaluate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import GlobalConfig, load_config, parse_config
from .errors import (
    CheckpointError, ConfigError, CorruptionError, FormatError, GenerationError, NumericError, ValidationError,
)
from .metrics import evaluate
from .model import load_checkpoint, save_checkpoint
from .pretrain import pretrain
from .train import finetune
from .uncertainty import export_uncertainty, mc_predict, vote
from .volumes import LabelMap, Volume, generate_phantom, read_volume, split_dataset, write_volume

log = logging.getLogger("mcswinu")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"


class DataError(Exception):
    """Missing or inconsistent input files."""


# --------------------------------------------------------------------------- #
# Config handling
# --------------------------------------------------------------------------- #

def _apply_override(raw: dict, item: str) -> None:
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} must look like section.key=JSON")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value  # bare strings such as --set train.init=random
    node = raw
    *parents, leaf = key.split(".")
    for part in parents:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: {part} is not a section")
    node[leaf] = parsed


def resolve_config(path, overrides=()) -> GlobalConfig:
    """Load the JSON config (or defaults) and apply ``--set`` overrides; flags win over the file."""
    if not overrides:
        return load_config(path)
    if path is None:
        raw = {}
    else:
        load_config(path)  # surfaces unreadable or invalid files as ConfigError
        raw = json.loads(Path(path).read_text())
    for item in overrides:
        _apply_override(raw, item)
    return parse_config(raw)


# --------------------------------------------------------------------------- #
# Data directories
# --------------------------------------------------------------------------- #

def case_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def read_manifest(data_dir) -> dict:
    data_dir = Path(data_dir)
    path = data_dir / MANIFEST
    if not data_dir.is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    if not path.is_file():
        raise DataError(f"{path} is missing; run the phantom command first")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc


def load_cases(data_dir, ids, labeled=True):
    data_dir = Path(data_dir)
    cases = []
    for case_id in ids:
        vol = read_volume(data_dir / f"{case_id}_image.mvol")
        if not isinstance(vol, Volume):
            raise DataError(f"{case_id}_image.mvol does not hold intensities")
        if labeled:
            lab = read_volume(data_dir / f"{case_id}_label.mvol")
            if not isinstance(lab, LabelMap):
                raise DataError(f"{case_id}_label.mvol does not hold labels")
            cases.append((vol, lab))
        else:
            cases.append(vol)
    return cases


def _progress(message: str) -> None:
    log.info(message)


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #

def cmd_phantom(args, cfg: GlobalConfig) -> int:
    out = Path(args.out)
    count = cfg.data.count if args.count is None else args.count
    if count < 1:
        raise ConfigError("--count must be >= 1")
    out.mkdir(parents=True, exist_ok=True)
    ids = [f"case_{i:03d}" for i in range(count)]
    cases = []
    for i, case_id in enumerate(ids):
        seed = case_seed(cfg.data.seed, i)
        vol, lab = generate_phantom(cfg.data.phantom, seed)
        write_volume(out / f"{case_id}_image.mvol", vol)
        write_volume(out / f"{case_id}_label.mvol", lab)
        cases.append({"id": case_id, "seed": seed, "counts": lab.counts().tolist()})
    train, val, test = split_dataset(ids, cfg.data.split, cfg.data.seed)
    membership = {**{k: "train" for k in train}, **{k: "val" for k in val}, **{k: "test" for k in test}}
    for case in cases:
        case["split"] = membership[case["id"]]
    manifest = {
        "seed": cfg.data.seed,
        "spacing_mm": list(cfg.data.phantom.spacing_mm),
        "cases": cases,
        "split": {"train": train, "val": val, "test": test},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {count} phantoms to {out} (train {len(train)}, val {len(val)}, test {len(test)})")
    return EXIT_OK


def cmd_pretrain(args, cfg: GlobalConfig) -> int:
    manifest = read_manifest(args.data)
    ids = [c["id"] for c in manifest["cases"]]
    volumes = load_cases(args.data, ids, labeled=False)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        result = pretrain(volumes, cfg.model, cfg.pretrain, progress=_progress)
    except NumericError as exc:
        if exc.state is not None:
            save_checkpoint(exc.state, out.with_suffix(".partial.ckpt"), {"aborted": str(exc)})
        raise
    save_checkpoint(result.model, out, {"pretrain_volumes": len(volumes)})
    loss_csv = out.with_name(out.stem + "_loss.csv")
    result.to_csv(loss_csv)
    first, last = result.history[0]["total"], result.history[-1]["total"]
    print(f"pretrained on {len(volumes)} volumes: L_total {first:.4f} -> {last:.4f}; wrote {out} and {loss_csv}")
    return EXIT_OK


def cmd_finetune(args, cfg: GlobalConfig) -> int:
    manifest = read_manifest(args.data)
    init = args.init if args.init is not None else cfg.train.init
    if init != "random" and not Path(init).is_file():
        raise DataError(f"--init checkpoint {init} does not exist")
    train_cfg = dataclasses.replace(cfg.train, init=init)
    split = manifest["split"]
    train_cases = load_cases(args.data, split["train"])
    if not train_cases:
        raise DataError("the manifest has no training cases")
    if split["val"]:
        val_cases = load_cases(args.data, split["val"])
    else:
        log.warning("no validation cases in the manifest; validating on the training cases")
        val_cases = train_cases
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model, history = finetune(train_cases, val_cases, cfg.model, train_cfg, cfg.augment, progress=_progress)
    save_checkpoint(model, out, {"train_cases": split["train"], "val_cases": split["val"] or split["train"]})
    log_csv = out.with_name(out.stem + "_log.csv")
    history.to_csv(log_csv)
    print(f"best val Dice {history.best_dice:.4f} at iteration {history.best_iteration}; wrote {out} and {log_csv}")
    return EXIT_OK


def _prediction_inputs(path: Path) -> list[tuple[str, Path]]:
    if path.is_file():
        stem = path.name[:-len(".mvol")] if path.name.endswith(".mvol") else path.stem
        return [(stem[:-len("_image")] if stem.endswith("_image") else stem, path)]
    if path.is_dir():
        found = sorted(path.glob("*_image.mvol"))
        manifest = path / MANIFEST
        if manifest.is_file():
            test = set(json.loads(manifest.read_text())["split"]["test"])
            if test:
                found = [p for p in found if p.name[:-len("_image.mvol")] in test]
        if not found:
            raise DataError(f"no *_image.mvol files in {path}")
        return [(p.name[:-len("_image.mvol")], p) for p in found]
    raise DataError(f"input {path} does not exist")


def cmd_predict(args, cfg: GlobalConfig) -> int:
    samples = cfg.mc.samples if args.mc_samples is None else args.mc_samples
    if args.threshold is not None:
        threshold = args.threshold
    else:
        threshold = min(cfg.mc.threshold, samples)
    if samples < 1 or not 1 <= threshold <= samples:
        raise ConfigError(f"need --mc-samples >= 1 and 1 <= --threshold <= {samples}")
    if not Path(args.ckpt).is_file():
        raise DataError(f"checkpoint {args.ckpt} does not exist")
    model = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for case_id, path in _prediction_inputs(Path(args.input)):
        vol = read_volume(path)
        if not isinstance(vol, Volume):
            raise DataError(f"{path} does not hold intensities")
        stack = mc_predict(model, vol, samples, cfg.mc.seed, overlap=cfg.mc.overlap)
        umap = vote(stack, threshold)
        export_uncertainty(umap, out / case_id)
        frac = float(umap.uncertain.mean())
        print(f"{case_id}: T={samples} k={threshold} uncertain fraction {frac:.4f}")
    return EXIT_OK


def _label_files(directory: Path, prefer_consensus: bool) -> dict[str, Path]:
    if not directory.is_dir():
        raise DataError(f"directory {directory} does not exist")
    found = {}
    suffixes = ("_consensus.mvol", "_label.mvol") if prefer_consensus else ("_label.mvol",)
    for suffix in reversed(suffixes):
        for p in sorted(directory.glob("*" + suffix)):
            found[p.name[:-len(suffix)]] = p
    return found


def cmd_evaluate(args, cfg: GlobalConfig) -> int:
    preds = _label_files(Path(args.pred), prefer_consensus=True)
    gts = _label_files(Path(args.gt), prefer_consensus=False)
    if not preds:
        raise DataError(f"no predictions (*_consensus.mvol or *_label.mvol) in {args.pred}")
    errors, pred_maps, gt_maps = [], {}, {}
    spacing = cfg.eval.spacing_mm
    for case_id, path in preds.items():
        if case_id not in gts:
            errors.append(f"{case_id}: no ground truth in {args.gt}")
            continue
        p, g = read_volume(path), read_volume(gts[case_id])
        if not isinstance(p, LabelMap) or not isinstance(g, LabelMap):
            errors.append(f"{case_id}: both files must hold label maps")
        elif p.shape != g.shape:
            errors.append(f"{case_id}: prediction shape {p.shape} != ground truth shape {g.shape}")
        elif spacing is None and p.spacing_mm != g.spacing_mm:
            errors.append(f"{case_id}: spacing {p.spacing_mm} != {g.spacing_mm}")
        else:
            pred_maps[case_id], gt_maps[case_id] = p, g
    if errors:
        for line in errors:
            print(line, file=sys.stderr)
        raise DataError(f"{len(errors)} case(s) could not be evaluated")
    report = evaluate(pred_maps, gt_maps, spacing)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    print(report.table())
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Entry point
# --------------------------------------------------------------------------- #

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcswinu", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.iterations=200 (repeatable)")

    p = sub.add_parser("phantom", help="generate synthetic thoracic phantoms")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, help="number of phantoms (default data.count)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("pretrain", help="self-supervised encoder pre-training")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised segmentation training")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="'random' or a pre-training checkpoint (default train.init)")
    p.add_argument("--out", required=True, help="best checkpoint path")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="Monte Carlo dropout prediction with uncertainty maps")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="a *_image.mvol file or a phantom directory")
    p.add_argument("--out", required=True)
    p.add_argument("--mc-samples", type=int, help="number of dropout passes (default mc.samples = 10)")
    p.add_argument("--threshold", type=int, help="minimum agreeing passes (default mc.threshold = 5)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="per-class Dice and HD95 report")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="CSV report path")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.config, args.set)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, ValidationError, FormatError, CorruptionError, CheckpointError, GenerationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
