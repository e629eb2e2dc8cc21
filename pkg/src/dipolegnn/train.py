"""Optimization loop: AdamW, reduce-on-plateau scheduling, batching, ablations.

Mini-batches are disjoint-union graphs, so per-molecule semantics are
preserved exactly (edges never span molecules). Gradients follow an
explicit zero-then-accumulate discipline per step. With fixed seeds two
runs produce bit-identical histories.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape
from .featurize import MoleculeBundle, bundle_molecule, merge_bundles
from .model import (
    ModelConfig,
    ModelParams,
    forward_bundle,
    mae_metric,
    rmse_norm_loss,
    rmse_norm_loss_node,
)
from .molgraph import Molecule

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "SchedulerState",
    "TrainingDivergedError",
    "adamw_step",
    "plateau_step",
    "TrainResult",
    "train",
    "evaluate",
    "run_ablation",
    "write_history",
]

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    lr: float = 1e-3
    weight_decay: float = 1e-5
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    plateau_threshold: float = 1e-6
    min_lr: float = 1e-6
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for name in ("lr", "weight_decay", "plateau_factor", "min_lr", "batch_size"):
            if getattr(self, name) < 0 or (name in ("lr", "min_lr", "batch_size") and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Parameter]) -> "OptimizerState":
        return cls(m=[np.zeros_like(p.value) for p in params],
                   v=[np.zeros_like(p.value) for p in params])


def adamw_step(
    params: list[Parameter],
    grads: list[np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.value.shape:
            raise ad.ShapeMismatchError("adamw_step", p.value.shape, g.shape)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * p.value
        p.value -= lr * update


@dataclass
class SchedulerState:
    lr: float
    patience: int
    factor: float = 0.5
    min_lr: float = 1e-6
    threshold: float = 1e-6
    best: float = np.inf
    stale: int = 0


def plateau_step(val_loss: float, state: SchedulerState) -> SchedulerState:
    """Halve the learning rate after `patience` epochs without improvement."""
    if val_loss < state.best - state.threshold:
        state.best = val_loss
        state.stale = 0
        return state
    state.stale += 1
    if state.stale >= state.patience:
        state.lr = max(state.lr * state.factor, state.min_lr)
        state.stale = 0
    return state


@dataclass
class TrainResult:
    params: ModelParams
    best_values: dict[str, np.ndarray]
    best_epoch: int
    best_val_loss: float
    history: list[dict] = field(default_factory=list)

    def restore_best(self) -> ModelParams:
        self.params.load_values(self.best_values)
        return self.params


def _bundles_for(molecules: list[Molecule], cfg: ModelConfig) -> list[MoleculeBundle]:
    ds, as_ = cfg.dist_spec(), cfg.angle_spec()
    return [bundle_molecule(m, cfg.cutoff, ds, as_) for m in molecules]


def _epoch_norms(bundles: list[MoleculeBundle], params: ModelParams, chunk: int = 128) -> np.ndarray:
    """Prediction norms over a bundle list, evaluated in forward-only chunks."""
    out = []
    for at in range(0, len(bundles), chunk):
        merged = merge_bundles(bundles[at : at + chunk])
        mu = forward_bundle(Tape(), merged, params)
        out.append(np.sqrt(np.sum(mu.data * mu.data, axis=1)))
    return np.concatenate(out) if out else np.zeros(0)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_mols: list[Molecule],
    val_mols: list[Molecule],
    params: ModelParams | None = None,
) -> TrainResult:
    """Full optimization run; retains the best-validation parameter values."""
    if not train_mols or not val_mols:
        raise ValueError("train and validation sets must be non-empty")
    if params is None:
        params = ModelParams(model_cfg, seed=train_cfg.seed)
    plist = params.all_parameters()
    opt = OptimizerState.for_params(plist)
    sched = SchedulerState(
        lr=train_cfg.lr,
        patience=train_cfg.plateau_patience,
        factor=train_cfg.plateau_factor,
        min_lr=train_cfg.min_lr,
        threshold=train_cfg.plateau_threshold,
    )
    train_bundles = _bundles_for(train_mols, model_cfg)
    val_bundles = _bundles_for(val_mols, model_cfg)
    train_labels = np.array([m.dipole_label for m in train_mols], dtype=np.float64)
    val_labels = np.array([m.dipole_label for m in val_mols], dtype=np.float64)
    if not (np.all(np.isfinite(train_labels)) and np.all(np.isfinite(val_labels))):
        raise ValueError("every molecule needs a finite dipole label for training")

    rng = np.random.default_rng(train_cfg.seed)
    result = TrainResult(params=params, best_values=params.copy_values(),
                         best_epoch=0, best_val_loss=np.inf)
    n = len(train_bundles)
    for epoch in range(1, train_cfg.epochs + 1):
        lr_in_effect = sched.lr
        perm = rng.permutation(n)
        sq_sum = 0.0
        for at in range(0, n, train_cfg.batch_size):
            idx = perm[at : at + train_cfg.batch_size]
            merged = merge_bundles([train_bundles[i] for i in idx])
            tape = Tape()
            mu = forward_bundle(tape, merged, params)
            loss = rmse_norm_loss_node(tape, train_labels[idx], mu)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            params.zero_grads()
            ad.backward(loss)
            adamw_step(plist, [p.grad for p in plist], opt, lr_in_effect, train_cfg.weight_decay)
            sq_sum += loss_val * loss_val * idx.size
        train_loss = float(np.sqrt(sq_sum / n))

        val_norms = _epoch_norms(val_bundles, params)
        val_loss = float(np.sqrt(np.mean((val_labels - val_norms) ** 2)))
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            result.best_values = params.copy_values()
        result.history.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr_in_effect}
        )
        plateau_step(val_loss, sched)
        if epoch == 1 or epoch % 20 == 0:
            log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, val_loss, lr_in_effect)
    return result


def evaluate(params: ModelParams, molecules: list[Molecule]) -> dict:
    """MAE and RMSE of prediction norms against dipole labels, no gradients."""
    if not molecules:
        raise ValueError("nothing to evaluate")
    bundles = _bundles_for(molecules, params.cfg)
    norms = _epoch_norms(bundles, params)
    labels = np.array([m.dipole_label for m in molecules], dtype=np.float64)
    return {
        "mae": float(np.mean(np.abs(labels - norms))),
        "rmse": float(np.sqrt(np.mean((labels - norms) ** 2))),
        "n": len(molecules),
    }


ABLATION_VARIANTS = ("strict_equivariant", "node_charge", "nonsym_edge")


def run_ablation(
    base_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_mols: list[Molecule],
    val_mols: list[Molecule],
    variants=ABLATION_VARIANTS,
    seeds=(0, 1, 2),
) -> dict:
    """Train each embedding variant under identical budgets and seeds.

    Returns per-variant validation MAEs (one per seed), their mean and
    spread, and the variants ordered best-first by mean MAE.
    """
    from dataclasses import replace

    report: dict = {"seeds": list(seeds), "variants": {}}
    for variant in variants:
        cfg = replace(base_cfg, embed_variant=variant)
        maes = []
        for seed in seeds:
            tcfg = replace(train_cfg, seed=seed)
            result = train(cfg, tcfg, train_mols, val_mols)
            result.restore_best()
            maes.append(evaluate(result.params, val_mols)["mae"])
            log.info("ablation %s seed %d: val MAE %.4f", variant, seed, maes[-1])
        arr = np.array(maes)
        report["variants"][variant] = {
            "maes": maes,
            "mean": float(arr.mean()),
            "spread": float(arr.max() - arr.min()),
        }
    report["ordering"] = sorted(report["variants"], key=lambda v: report["variants"][v]["mean"])
    return report


def write_history(path, history: list[dict], seed: int | None = None) -> None:
    """History CSV `epoch,train_loss,val_loss,lr` with round-trip float text."""
    with open(path, "w") as fh:
        if seed is not None:
            fh.write(f"# seed={seed}\n")
        fh.write("epoch,train_loss,val_loss,lr\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['train_loss']!r},{row['val_loss']!r},{row['lr']!r}\n")
