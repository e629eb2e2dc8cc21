"""Command-line entry point: train, eval, predict, benzene-scan, check.

Configuration is a flat `key = value` text file with [model], [train] and
[data] sections; command-line flags override file values. One top-level
seed drives parameter init, splits and shuffling, and is recorded in every
output file. Exit codes: 0 success, 1 property/validation failure,
2 usage or IO error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .checks import run_property_suite
from .dataio import (
    DEFAULT_MU_INDEX,
    SplitSpec,
    XyzParseError,
    config_hash,
    load_dataset,
    parse_any_xyz,
    write_metrics,
    write_predictions,
)
from .model import CheckpointError, ModelConfig, forward, load_checkpoint, save_checkpoint
from .molgraph import DegenerateGraphError, generate_acene
from .train import TrainConfig, TrainingDivergedError, evaluate, train, write_history

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DataConfig:
    mu_index: int = DEFAULT_MU_INDEX
    exclude: str | None = None
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    counts: tuple[int, int, int] | None = None
    subset: int | None = None


@dataclass
class RunConfig:
    """Merged model + train + data configuration with documented defaults."""

    model: ModelConfig
    train: TrainConfig
    data: DataConfig

    def as_dict(self) -> dict:
        return {"model": asdict(self.model), "train": asdict(self.train), "data": asdict(self.data)}


_SECTION_DEFAULTS = {"model": ModelConfig(), "train": TrainConfig(), "data": DataConfig()}


def _coerce(section: str, key: str, raw: str):
    defaults = _SECTION_DEFAULTS[section]
    if not hasattr(defaults, key):
        raise ValueError(f"unknown config key [{section}] {key}")
    if key == "exclude":
        return raw
    if key == "counts":
        return tuple(int(x) for x in raw.split())
    if key == "fractions":
        return tuple(float(x) for x in raw.split())
    if key == "subset":
        return int(raw)
    current = getattr(defaults, key)
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    return type(current)(raw)


def load_run_config(path=None) -> RunConfig:
    """Defaults, optionally overlaid with a config file; unknown keys rejected."""
    sections = {"model": {}, "train": {}, "data": {}}
    if path is not None:
        cp = configparser.ConfigParser()
        read = cp.read(path)
        if not read:
            raise FileNotFoundError(f"config file {path} not found")
        for section in cp.sections():
            if section not in sections:
                raise ValueError(f"unknown config section [{section}]")
            for key, raw in cp.items(section):
                sections[section][key] = _coerce(section, key, raw)
    return RunConfig(
        model=ModelConfig(**sections["model"]),
        train=TrainConfig(**sections["train"]),
        data=DataConfig(**sections["data"]),
    )


def _apply_overrides(rc: RunConfig, args) -> RunConfig:
    model, trainc, data = rc.model, rc.train, rc.data
    if getattr(args, "seed", None) is not None:
        trainc = replace(trainc, seed=args.seed)
    if getattr(args, "variant", None) is not None:
        model = replace(model, embed_variant=args.variant)
    if getattr(args, "activation", None) is not None:
        model = replace(model, activation=args.activation)
    if getattr(args, "epochs", None) is not None:
        trainc = replace(trainc, epochs=args.epochs)
    if getattr(args, "subset", None) is not None:
        data = replace(data, subset=args.subset)
    return RunConfig(model, trainc, data)


def _load_split_sets(rc: RunConfig, data_dir):
    spec = SplitSpec(counts=rc.data.counts, fractions=rc.data.fractions, seed=rc.train.seed)
    molecules, split = load_dataset(
        data_dir, spec, mu_index=rc.data.mu_index, exclude_path=rc.data.exclude
    )
    train_set = [molecules[i] for i in split.train_idx]
    val_set = [molecules[i] for i in split.val_idx]
    test_set = [molecules[i] for i in split.test_idx]
    if rc.data.subset is not None:
        n = rc.data.subset
        train_set = train_set[:n]
        val_set = val_set[: max(1, n // 4)]
    return train_set, val_set, test_set, split


def cmd_train(args) -> int:
    rc = _apply_overrides(load_run_config(args.config), args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set, val_set, _, split = _load_split_sets(rc, args.data_dir)
    log.info("training on %d molecules, validating on %d", len(train_set), len(val_set))
    result = train(rc.model, rc.train, train_set, val_set)
    result.restore_best()

    seed = rc.train.seed
    meta = {
        "seed": seed,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "data_checksum": split.manifest["checksum"],
        "run_config": rc.as_dict(),
    }
    save_checkpoint(out_dir / "checkpoint.json", result.params, meta=meta)
    write_history(out_dir / "history.csv", result.history, seed=seed)
    metrics = evaluate(result.params, val_set)
    metrics.update({"config_hash": config_hash(rc.as_dict()), "seed": seed, "split": "val"})
    write_metrics(out_dir / "metrics.json", metrics)
    print(json.dumps({"out_dir": str(out_dir), **metrics}))
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    rc = _apply_overrides(load_run_config(args.config), args)
    molecules, _ = load_dataset(args.data_dir, SplitSpec(seed=rc.train.seed),
                                mu_index=rc.data.mu_index, exclude_path=rc.data.exclude)
    metrics = evaluate(params, molecules)
    metrics["config_hash"] = config_hash(asdict(params.cfg))
    print(json.dumps(metrics))
    if args.out is not None:
        write_metrics(args.out, metrics)
    if args.predictions is not None:
        preds = [forward(m, params.cfg, params) for m in molecules]
        labels = [m.dipole_label for m in molecules]
        ids = [m.id or f"mol_{i}" for i, m in enumerate(molecules)]
        write_predictions(args.predictions, ids, labels, preds, seed=params.seed)
    return 0


def cmd_predict(args) -> int:
    params = load_checkpoint(args.checkpoint)
    mol = parse_any_xyz(Path(args.xyz).read_text())
    mu = forward(mol, params.cfg, params)
    print(json.dumps({
        "id": mol.id,
        "mu": [float(v) for v in mu],
        "norm": float(np.linalg.norm(mu)),
        "label_debye": mol.dipole_label,
    }))
    return 0


def cmd_benzene_scan(args) -> int:
    if args.n_max < 1:
        raise ValueError(f"--n-max must be >= 1, got {args.n_max}")
    params = load_checkpoint(args.checkpoint)
    rows = []
    for n in range(1, args.n_max + 1):
        mu = forward(generate_acene(n), params.cfg, params)
        rows.append((n, float(np.linalg.norm(mu))))
    lines = [f"# seed={params.seed}", "n_rings,pred_norm"]
    lines += [f"{n},{norm!r}" for n, norm in rows]
    text = "\n".join(lines) + "\n"
    if args.out is not None:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_check(args) -> int:
    results = run_property_suite(variant=args.variant, seed=args.seed or 0, quick=args.quick)
    failed = 0
    for r in results:
        print(r.line())
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} properties passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dipolegnn",
                                description="Dipole moment GNN: training, evaluation, property checks")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", default=None, help="key = value config file")
        sp.add_argument("--seed", type=int, default=None, help="top-level seed")

    sp = sub.add_parser("train", help="train a model and write checkpoint/history/metrics")
    common(sp)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--variant", choices=("paper_literal", "strict_equivariant", "nonsym_edge", "node_charge"))
    sp.add_argument("--activation", choices=("silu", "mish", "shifted_softplus", "bent_identity"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--subset", type=int, help="train on the first N molecules of the shuffled split")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="MAE/RMSE of a checkpoint over a dataset directory")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--out", default=None, help="also write metrics JSON here")
    sp.add_argument("--predictions", default=None, help="also write per-molecule prediction CSV")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="predict the dipole of one XYZ file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("xyz")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("benzene-scan", help="predicted dipole norm for acenes of 1..N rings")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--n-max", type=int, required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_benzene_scan)

    sp = sub.add_parser("check", help="run the randomized property suites")
    common(sp, config=False)
    sp.add_argument("--variant", default="strict_equivariant",
                    choices=("paper_literal", "strict_equivariant", "nonsym_edge", "node_charge"))
    sp.add_argument("--quick", action="store_true", help="smaller sample counts")
    sp.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, OSError, ValueError, KeyError, XyzParseError,
            CheckpointError, DegenerateGraphError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
