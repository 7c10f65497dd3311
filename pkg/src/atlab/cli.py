"""Command-line entry point: ``atlab train | eval | landscape``.

A run is described by one JSON document holding every ``TrainConfig`` field
plus a ``dataset`` selector and an ``output_dir``. Missing keys take the
defaults below; unknown keys are an error. ``--override a.b=value`` edits the
document before validation (values are parsed as JSON, then as a fraction
such as ``8/255``, then kept as strings).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from fractions import Fraction
from pathlib import Path

from . import __version__
from .attacks import AttackConfig, eval_attack
from .data import Dataset, blob_splits, dumps, load_idx, write_metrics_csv, write_metrics_json
from .diagnostics import landscape_probe, natural_accuracy, robust_accuracy
from .models import load_checkpoint, save_checkpoint
from .objectives import ConsistencyKind, RampupConfig
from .trainer import TrainConfig, train

log = logging.getLogger("atlab")


class ConfigError(ValueError):
    pass


BLOBS_DEFAULTS = {"kind": "blobs", "n_train_per_class": 200, "n_test_per_class": 200, "d": 20, "classes": 5,
                  "spread": 0.5, "seed": None}
IDX_DEFAULTS = {"kind": "idx", "train_images": None, "train_labels": None, "test_images": None,
                "test_labels": None, "train_limit": 1000, "test_limit": 1000}


def default_run_config() -> dict:
    cfg = asdict(TrainConfig())
    cfg["consistency"] = ConsistencyKind.MSE.value
    cfg["eval_attack"] = None  # null: PGD-10 at the training epsilon
    cfg["dataset"] = dict(BLOBS_DEFAULTS)
    cfg["output_dir"] = "runs/default"
    return cfg


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    try:
        if "/" in text:
            return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        pass
    return text


def apply_override(doc: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, value = item.split("=", 1)
    *parents, leaf = key.strip().split(".")
    node = doc
    for p in parents:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node = node[p]
    node[leaf] = parse_value(value)


def _merge(defaults: dict, given: dict, where: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        path = f"{where}{k}"
        if k not in defaults:
            raise ConfigError(f"unknown key {path!r}")
        if isinstance(defaults[k], dict) and k != "dataset":
            if not isinstance(v, dict):
                raise ConfigError(f"{path!r} must be an object")
            out[k] = _merge(defaults[k], v, path + ".")
        else:
            out[k] = v
    return out


def resolve_dataset_doc(given: dict) -> dict:
    kind = given.get("kind", "blobs")
    base = {"blobs": BLOBS_DEFAULTS, "idx": IDX_DEFAULTS}.get(kind)
    if base is None:
        raise ConfigError(f"dataset.kind must be 'blobs' or 'idx', got {kind!r}")
    return _merge(base, given, "dataset.")


def resolve_run_config(doc: dict, overrides=()) -> dict:
    """Defaults <- document <- overrides, with unknown keys rejected."""
    merged = _merge(default_run_config(), doc)
    for item in overrides:
        apply_override(merged, item)
    merged = _merge(default_run_config(), merged)  # catches unknown override keys
    merged["dataset"] = resolve_dataset_doc(merged["dataset"] or {})
    return merged


def build_train_config(doc: dict) -> TrainConfig:
    fields = {k: v for k, v in doc.items() if k not in ("dataset", "output_dir")}
    try:
        fields["attack"] = AttackConfig(**fields["attack"])
        fields["rampup"] = RampupConfig(**fields["rampup"])
        if fields["eval_attack"] is not None:
            fields["eval_attack"] = AttackConfig(**fields["eval_attack"])
        fields["consistency"] = ConsistencyKind(fields["consistency"])
        return TrainConfig(**fields)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def build_datasets(ds: dict, run_seed: int = 0) -> tuple[Dataset, Dataset]:
    if ds["kind"] == "blobs":
        seed = run_seed if ds["seed"] is None else ds["seed"]
        return blob_splits(ds["n_train_per_class"], ds["n_test_per_class"], ds["d"], ds["classes"],
                           ds["spread"], seed)
    missing = [k for k in ("train_images", "train_labels", "test_images", "test_labels") if not ds[k]]
    if missing:
        raise ConfigError(f"dataset: idx needs {', '.join(missing)}")
    return (load_idx(ds["train_images"], ds["train_labels"], ds["train_limit"], "idx", "train"),
            load_idx(ds["test_images"], ds["test_labels"], ds["test_limit"], "idx", "test"))


def load_json(path_or_text: str) -> dict:
    text = path_or_text if path_or_text.lstrip().startswith("{") else Path(path_or_text).read_text()
    doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def echo_config(doc: dict) -> dict:
    # output_dir is where the echo lives, not part of what produced it
    return {k: v for k, v in doc.items() if k != "output_dir"}


# -- subcommands ----------------------------------------------------------------
def cmd_train(args) -> int:
    doc = load_json(args.config) if args.config else {}
    run = resolve_run_config(doc, args.override or [])
    if args.output_dir:
        run["output_dir"] = args.output_dir
    cfg = build_train_config(run)
    train_set, test_set = build_datasets(run["dataset"], cfg.seed)
    out = Path(run["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dumps(echo_config(run), digits=None) + "\n")

    result = train(cfg, train_set, test_set)
    last = result.history[-1]
    write_metrics_csv(result.history, out / "metrics.csv")
    write_metrics_json({
        "config": echo_config(run),
        "best_epoch": result.best_epoch,
        "history": [r.to_dict() for r in result.history],
    }, out / "metrics.json")
    save_checkpoint(result.model, out / "last.json")
    save_checkpoint(result.best, out / "best.json")
    if cfg.is_mt:
        save_checkpoint(result.student, out / "student.json")
    print(f"{cfg.method} {last.natural_acc_test:.4f} {last.robust_acc_test:.4f} {last.robust_gap:.4f}")
    return 0


def _dataset_for_eval(args) -> tuple[Dataset, int]:
    doc = load_json(args.dataset)
    seed = args.seed
    if "dataset" in doc:  # a run config: take its dataset and seed
        run = resolve_run_config(doc)
        ds, seed = run["dataset"], run["seed"] if args.seed is None else args.seed
    else:
        ds = resolve_dataset_doc(doc)
    seed = 0 if seed is None else seed
    train_set, test_set = build_datasets(ds, seed)
    return (test_set if args.split == "test" else train_set), seed


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    dataset, seed = _dataset_for_eval(args)
    attack_cfg, loss = eval_attack(args.attack, args.epsilon)
    nat = natural_accuracy(params, dataset)
    rob = robust_accuracy(params, dataset, attack_cfg, loss, seed=seed)
    report = {"checkpoint": Path(args.checkpoint).name,
              "checkpoint_sha256": hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest(), "attack": args.attack, "epsilon": attack_cfg.epsilon,
              "steps": attack_cfg.steps, "split": args.split, "seed": seed, "n": len(dataset),
              "natural_acc": nat, "robust_acc": rob}
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(
        f"{Path(args.checkpoint).stem}_eval_{args.attack}.json")
    write_metrics_json(report, out)
    print(f"natural {nat:.4f} robust {rob:.4f}")
    return 0


def cmd_landscape(args) -> int:
    params = load_checkpoint(args.checkpoint)
    dataset, _ = _dataset_for_eval(args)
    attack_cfg, _ = eval_attack("pgd10", args.epsilon)
    grid = None if args.alpha_grid is None else [float(a) for a in args.alpha_grid.split(",")]
    series = landscape_probe(params, dataset, grid, attack_cfg, seed=args.direction_seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(
        f"{Path(args.checkpoint).stem}_landscape_{args.direction_seed}.csv")
    series.write_csv(out)
    print(f"spread {series.spread:.6f} loss@0 {series.at(0.0):.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="atlab", description="Adversarial-training lab (PGD-AT, TRADES, mean teacher).")
    ap.add_argument("--version", action="version", version=f"atlab {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model and write metrics and checkpoints")
    t.add_argument("--config", help="run config JSON file (or inline JSON); defaults if omitted")
    t.add_argument("--override", action="append", metavar="KEY=VALUE", help="dotted-path override, repeatable")
    t.add_argument("--output-dir", help="overrides output_dir from the config")
    t.set_defaults(func=cmd_train)

    def common(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True, help="dataset JSON or a run config JSON (file or inline)")
        p.add_argument("--split", choices=("train", "test"), default="test")
        p.add_argument("--epsilon", type=parse_fraction, default=8 / 255)
        p.add_argument("--seed", type=int, default=None, help="eval seed (default: the run config's seed, else 0)")
        p.add_argument("--out")

    e = sub.add_parser("eval", help="natural and robust accuracy of a checkpoint")
    common(e)
    e.add_argument("--attack", choices=("pgd10", "pgd100", "cw100", "none"), default="pgd10")
    e.set_defaults(func=cmd_eval)

    ls = sub.add_parser("landscape", help="adversarial weight-loss landscape along a random direction")
    common(ls)
    ls.add_argument("--direction-seed", type=int, default=0)
    ls.add_argument("--alpha-grid", help="comma-separated magnitudes; must include 0 (default -1..1 step 0.1)")
    ls.set_defaults(func=cmd_landscape)
    return ap


def parse_fraction(text: str) -> float:
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError) as e:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from e


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
