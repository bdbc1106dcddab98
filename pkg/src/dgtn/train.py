"""Deterministic training loop, evaluation metrics, AdamW optimizer, and the
coupling ablation experiment.

`train` is fully reproducible per seed: data splits, batch order, dropout
masks and the optimizer trajectory all derive from TrainConfig.seed. The
epoch log can be streamed as TSV with columns
``epoch  train_mse  val_rmse  val_pearson  beta_per_layer  gamma_per_layer``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import IO, Mapping

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from . import model as M
from .errors import EmptyDataset, InvalidConfig, ShapeMismatch
from .protein_io import MutationRecord, Structure, SyntheticSpec, synthesize_dataset

__all__ = [
    "TrainConfig",
    "Metrics",
    "EpochStats",
    "TrainResult",
    "AdamState",
    "clip_gradients",
    "optimizer_step",
    "train",
    "evaluate",
    "metrics_from",
    "ablation_experiment",
    "AblationReport",
]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 15
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.15
    min_improvement: float = 1e-4
    group_by_structure: bool = True
    eval_every: int = 1

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.max_epochs, self.clip_norm, self.eps) <= 0:
            raise InvalidConfig("lr, batch_size, max_epochs, clip_norm, eps must be positive")
        if self.weight_decay < 0 or self.patience < 0:
            raise InvalidConfig("weight_decay and patience must be nonnegative")
        if self.patience > self.max_epochs:
            raise InvalidConfig("patience must not exceed max_epochs")
        if not 0.0 < self.val_fraction < 1.0:
            raise InvalidConfig("val_fraction must lie in (0, 1)")
        if self.eval_every < 1:
            raise InvalidConfig("eval_every must be >= 1")


@dataclass
class Metrics:
    pearson: float
    spearman: float
    rmse: float
    mae: float
    n: int
    degenerate: bool = False

    def line(self) -> str:
        return (
            f"n={self.n}\tpearson={self.pearson:.4f}\tspearman={self.spearman:.4f}"
            f"\trmse={self.rmse:.4f}\tmae={self.mae:.4f}"
        )


@dataclass
class EpochStats:
    epoch: int
    train_mse: float
    val_rmse: float
    val_pearson: float
    betas: list[float]
    gammas: list[float]

    def tsv(self) -> str:
        beta = ",".join(f"{b:.4f}" for b in self.betas) or "-"
        gamma = ",".join(f"{g:.4f}" for g in self.gammas) or "-"
        return (
            f"{self.epoch}\t{self.train_mse:.6f}\t{self.val_rmse:.6f}"
            f"\t{self.val_pearson:.4f}\t{beta}\t{gamma}"
        )


@dataclass
class TrainResult:
    params: M.ModelParams
    cfg: M.ModelConfig
    log: list[EpochStats]
    best_epoch: int
    best_val_rmse: float


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def clip_gradients(grads: Mapping[str, np.ndarray], clip_norm: float) -> tuple[dict, float]:
    """Scale gradients so their global L2 norm does not exceed clip_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= clip_norm or total == 0.0:
        return dict(grads), total
    scale = clip_norm / total
    return {k: g * scale for k, g in grads.items()}, total


def optimizer_step(
    params: M.ModelParams,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[M.ModelParams, AdamState]:
    """One AdamW update with decoupled, lr-scaled weight decay.

    Gradients are globally clipped before the moment update. Decay applies to
    the same weight matrices the L2 penalty covers (biases, gains, logits and
    embeddings are not decayed).
    """
    if set(grads) != set(params.tensors):
        raise ShapeMismatch("gradient registry does not match parameter registry")
    grads, _ = clip_gradients(grads, cfg.clip_norm)
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name in sorted(params.tensors):
        g = grads[name]
        theta = params.tensors[name]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"gradient shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay and M.is_penalized(name, theta):
            theta -= cfg.lr * cfg.weight_decay * theta
        theta -= cfg.lr * update
    return params, state


def metrics_from(preds: np.ndarray, targets: np.ndarray) -> Metrics:
    """Pearson/Spearman/RMSE/MAE; constant inputs flag the correlation as
    degenerate and report 0."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.size == 0:
        raise EmptyDataset("metrics need at least one sample")
    err = preds - targets
    rmse = float(np.sqrt(np.mean(err**2)))
    mae = float(np.mean(np.abs(err)))
    degenerate = bool(np.std(preds) == 0.0 or np.std(targets) == 0.0)
    if degenerate:
        return Metrics(0.0, 0.0, rmse, mae, preds.size, True)
    pearson = float(np.corrcoef(preds, targets)[0, 1])
    spearman = float(np.corrcoef(rankdata(preds), rankdata(targets))[0, 1])
    return Metrics(pearson, spearman, rmse, mae, preds.size, False)


def _require_targets(records: list[MutationRecord]):
    if not records:
        raise EmptyDataset("no records")
    if any(r.ddg is None for r in records):
        raise EmptyDataset("records without ddg targets cannot be used here")


def _reference_rates(
    structures: Mapping[str, Structure],
    sid: str,
    params: M.ModelParams,
    cfg: M.ModelConfig,
    caches: dict,
) -> tuple[list[float], list[float]]:
    """Per-layer diffusion rates evaluated on one reference structure."""
    if cfg.n_couple == 0:
        return [], []
    tape = ad.Tape()
    p = M._TapeParams(tape, params)
    if sid not in caches:
        caches[sid] = M.build_cache(structures[sid], cfg)
    _, _, state = M._encode_nodes(p, caches[sid], cfg, collect_state=True)
    return state.betas, state.gammas


def train(
    records: list[MutationRecord],
    structures: Mapping[str, Structure],
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    stream: IO | None = None,
) -> TrainResult:
    """Train with early stopping on validation RMSE; returns best-val params.

    The dataset is split 85/15 train/val by seed. With `group_by_structure`
    each epoch shuffles structures and the records within them, so batches
    stay contiguous per structure and every structure is encoded once per
    step. Validation runs every `eval_every` epochs; at each validation the
    run stops once `patience` epochs have passed without the RMSE improving
    by at least `min_improvement`.
    """
    _require_targets(records)
    rng = np.random.default_rng(train_cfg.seed)
    dropout_rng = np.random.default_rng(train_cfg.seed + 1)

    order = rng.permutation(len(records))
    n_val = max(1, int(round(train_cfg.val_fraction * len(records)))) if len(records) > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise EmptyDataset("no training records after the validation split")
    train_records = [records[i] for i in train_idx]
    val_records = [records[i] for i in val_idx]

    params = M.init_params(model_cfg)
    state = AdamState()
    caches: dict[str, M.StructureCache] = {}

    best_params = params.copy()
    best_rmse = np.inf
    best_epoch = 0
    last_improve_epoch = 0
    log: list[EpochStats] = []
    ref_sid = min(r.structure_id for r in records)

    if stream is not None:
        stream.write("epoch\ttrain_mse\tval_rmse\tval_pearson\tbeta_per_layer\tgamma_per_layer\n")

    by_sid: dict[str, list[int]] = {}
    for i, r in enumerate(train_records):
        by_sid.setdefault(r.structure_id, []).append(i)
    sids = sorted(by_sid)

    for epoch in range(1, train_cfg.max_epochs + 1):
        if train_cfg.group_by_structure:
            perm = np.concatenate(
                [rng.permutation(by_sid[sids[k]]) for k in rng.permutation(len(sids))]
            ).astype(int)
        else:
            perm = rng.permutation(len(train_records))
        batch_losses = []
        for start in range(0, len(perm), train_cfg.batch_size):
            chunk = [train_records[i] for i in perm[start : start + train_cfg.batch_size]]
            chunk.sort(key=lambda r: r.structure_id)
            loss_val, grads = M.gradients(
                chunk, structures, params, model_cfg, caches, training=True, rng=dropout_rng
            )
            params, state = optimizer_step(params, grads, state, train_cfg)
            batch_losses.append(loss_val)

        do_eval = epoch % train_cfg.eval_every == 0 or epoch == train_cfg.max_epochs
        if do_eval:
            if val_records:
                val_preds = M.predict_batch(val_records, structures, params, model_cfg, caches)
                val_targets = np.array([r.ddg for r in val_records])
                vm = metrics_from(val_preds, val_targets)
            else:
                vm = Metrics(0.0, 0.0, 0.0, 0.0, 0, True)
            betas, gammas = _reference_rates(structures, ref_sid, params, model_cfg, caches)
            stats = EpochStats(epoch, float(np.mean(batch_losses)), vm.rmse, vm.pearson, betas, gammas)
            log.append(stats)
            if stream is not None:
                stream.write(stats.tsv() + "\n")
            if vm.rmse < best_rmse - train_cfg.min_improvement:
                best_rmse = vm.rmse
                best_epoch = epoch
                best_params = params.copy()
                last_improve_epoch = epoch
            if epoch - last_improve_epoch >= train_cfg.patience:
                break

    return TrainResult(best_params, model_cfg, log, best_epoch, float(best_rmse))


def evaluate(
    records: list[MutationRecord],
    structures: Mapping[str, Structure],
    params: M.ModelParams,
    cfg: M.ModelConfig,
    caches: dict | None = None,
) -> Metrics:
    """Inference-mode metrics over a labeled dataset."""
    _require_targets(records)
    preds = M.predict_batch(records, structures, params, cfg, caches)
    return metrics_from(preds, np.array([r.ddg for r in records]))


@dataclass
class AblationRow:
    seed: int
    mse_on: float
    mse_off: float

    @property
    def diffusion_wins(self) -> bool:
        return self.mse_on < self.mse_off


@dataclass
class AblationReport:
    rows: list[AblationRow]
    wins: int
    n_seeds: int

    def tsv(self) -> str:
        lines = ["seed\tmse_on\tmse_off\twinner"]
        for r in self.rows:
            lines.append(
                f"{r.seed}\t{r.mse_on:.6f}\t{r.mse_off:.6f}"
                f"\t{'diffusion' if r.diffusion_wins else 'no-diffusion'}"
            )
        lines.append(f"wins\t{self.wins}/{self.n_seeds}")
        return "\n".join(lines)


def ablation_experiment(
    spec: SyntheticSpec,
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    n_seeds: int = 5,
    test_fraction: float = 0.2,
    stream: IO | None = None,
) -> AblationReport:
    """Train matched models with diffusion on vs off across seeds.

    One dataset is synthesized from `spec` and split train/test once; per
    seed both arms start from identical initial tensors (only the diffusion
    switch differs) and are compared on held-out test MSE.
    """
    if spec.coupling_weight < 0:
        raise InvalidConfig("coupling_weight must be nonnegative")
    structures, records = synthesize_dataset(spec)
    order = np.random.default_rng(spec.seed + 1).permutation(len(records))
    n_test = max(1, int(round(test_fraction * len(records))))
    test_records = [records[i] for i in order[:n_test]]
    fit_records = [records[i] for i in order[n_test:]]

    rows = []
    for seed in range(n_seeds):
        mses = {}
        for enabled in (True, False):
            cfg_arm = replace(
                model_cfg,
                seed=seed,
                diffusion=replace(model_cfg.diffusion, enabled=enabled),
            )
            result = train(fit_records, structures, cfg_arm, replace(train_cfg, seed=seed))
            metrics = evaluate(test_records, structures, result.params, cfg_arm)
            mses[enabled] = metrics.rmse**2
        rows.append(AblationRow(seed, mses[True], mses[False]))
        if stream is not None:
            stream.write(f"{seed}\t{mses[True]:.6f}\t{mses[False]:.6f}\n")
            stream.flush()
    report = AblationReport(rows, sum(r.diffusion_wins for r in rows), n_seeds)
    return report
