"""Optimization loop, cross-validation and the ablation runner.

Training processes one artery per forward pass (lengths vary), accumulates
gradients over a fixed number of arteries, then takes one AdamW step under a
triangular cyclic learning rate.  Cross-validation stratifies arteries into
folds by their disease label; every quantity that could leak information
(normalization statistics, the PPG classification threshold) is derived from
the training split only, and a probe verifies this on every fold.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import metrics as met
from ._alloc import tune_allocator
from .curves import (
    ArteryRecord,
    DropProfile,
    Grid,
    PullbackCurve,
    avg_pool_drops,
    drops_to_ffr,
    truncate_curve,
)
from .losses import AblationFlags, HistogramConfig, LossWeights, total_loss_node
from .network import (
    NetworkConfig,
    build_inputs,
    forward_nodes,
    init_params,
    params_from_arrays,
    params_to_arrays,
    prepare_records,
    supervision_end_index,
)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, artery_id: str, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, artery {artery_id}")
        self.epoch = epoch
        self.artery_id = artery_id


@dataclass(frozen=True)
class LRSchedule:
    max_lr: float = 5e-4
    min_lr: float = 1e-5
    period_epochs: int = 40

    def __post_init__(self):
        if not (0 < self.min_lr <= self.max_lr) or self.period_epochs <= 0:
            raise ValueError("invalid learning-rate schedule")


def lr_at(epoch: float, schedule: LRSchedule = LRSchedule()) -> float:
    """Triangular wave starting at the maximum: max -> min over half a
    period, back to max at the full period."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    half = schedule.period_epochs / 2.0
    phase = epoch % schedule.period_epochs
    frac = phase / half if phase <= half else (schedule.period_epochs - phase) / half
    return schedule.max_lr - (schedule.max_lr - schedule.min_lr) * frac


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, state: AdamWState, lr: float) -> None:
    """Bias-corrected moment update with decoupled weight decay."""
    if not state.m:
        state.m = {name: np.zeros_like(p.values) for name, p in params.items()}
        state.v = {name: np.zeros_like(p.values) for name, p in params.items()}
    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    for name, p in params.items():
        g = p.grad
        if g.shape != p.values.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.values
        p.values -= lr * update


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    accumulation: int = 8
    accumulation_mode: str = "sum"      # sum | mean
    seed: int = 0
    fold_count: int = 8
    weight_decay: float = 0.01
    schedule: LRSchedule = field(default_factory=LRSchedule)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    histogram: HistogramConfig = field(default_factory=HistogramConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.accumulation < 1 or self.epochs < 1 or self.fold_count < 2:
            raise ValueError("invalid training configuration")
        if self.accumulation_mode not in ("sum", "mean"):
            raise ValueError("accumulation_mode must be sum or mean")


# ---------------------------------------------------------------------------
# supervision targets
# ---------------------------------------------------------------------------

def supervision_target(rec: ArteryRecord, pool_kernel: int) -> tuple[np.ndarray, np.ndarray]:
    """(reference drops, mask) on the pooled grid, both shaped (1, m).

    Pooled windows are rescaled by the kernel (window sums), so the cumulative
    sum of the target reproduces the reference curve at the window ends; the
    network's mean-pooled output learns the same scale.  Both prediction and
    reference are zeroed beyond the measured extent.
    """
    if rec.ref_drops is None:
        raise ValueError(f"artery {rec.id} has no reference pullback")
    pooled = avg_pool_drops(rec.ref_drops, pool_kernel).drops * pool_kernel
    m = pooled.shape[0]
    end2 = supervision_end_index(rec, pool_kernel)
    mask = np.ones(m)
    mask[end2 + 1 :] = 0.0
    return (pooled * mask)[None, :], mask[None, :]


def reference_curve_2mm(rec: ArteryRecord, pool_kernel: int) -> PullbackCurve | None:
    """Reference pullback on the supervision grid, truncated to the measured
    extent (the common grid for all evaluation metrics)."""
    if rec.ref_drops is None:
        return None
    end2 = supervision_end_index(rec, pool_kernel)
    if end2 < 1:
        return None
    target, _ = supervision_target(rec, pool_kernel)
    grid = Grid(rec.grid.spacing_mm * pool_kernel, target.shape[1])
    return truncate_curve(drops_to_ffr(DropProfile(grid, target[0])), end2)


def prediction_curve_2mm(
    rec_prepared: ArteryRecord, params: dict, net_cfg: NetworkConfig
) -> PullbackCurve | None:
    end2 = supervision_end_index(rec_prepared, net_cfg.pool_kernel)
    if end2 < 1:
        return None
    nodes = forward_nodes(build_inputs(rec_prepared, net_cfg), params, net_cfg, train=False)
    pooled = nodes["pooled"].values[0]
    drops = pooled.copy()
    drops[end2 + 1 :] = 0.0
    grid = Grid(rec_prepared.grid.spacing_mm * net_cfg.pool_kernel, drops.shape[0])
    return truncate_curve(drops_to_ffr(DropProfile(grid, drops)), end2)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(
    records: list[ArteryRecord],
    cfg: TrainConfig,
    net_cfg: NetworkConfig,
    stats: dict | None = None,
    log_every: int = 0,
) -> dict:
    """Train one network; returns params, normalization stats and the log.

    Deterministic given (records, cfg, net_cfg): parameter init, shuffling
    and dropout all derive from cfg.seed.
    """
    tune_allocator()
    trainable = [r for r in records if r.ref_drops is not None]
    if not trainable:
        raise ValueError("no arteries with reference pullbacks to train on")
    prepared, stats = prepare_records(trainable, stats)

    init_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0,)))
    run_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
    params = init_params(net_cfg, init_rng)
    state = AdamWState(weight_decay=cfg.weight_decay)

    cache = []
    for rec in prepared:
        target, mask = supervision_target(rec, net_cfg.pool_kernel)
        cache.append(
            {
                "id": rec.id,
                "inputs": build_inputs(rec, net_cfg),
                "target": ad.constant(target),
                "mask": mask,
            }
        )

    for p in params.values():
        p.zero_grad()
    log = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.schedule)
        order = run_rng.permutation(len(cache))
        sums: dict[str, float] = {}
        pending = 0
        for idx in order:
            entry = cache[idx]
            nodes = forward_nodes(entry["inputs"], params, net_cfg, train=True, rng=run_rng)
            masked = ad.mul_const(nodes["pooled"], entry["mask"])
            loss, parts = total_loss_node(
                masked, entry["target"], cfg.loss_weights, cfg.histogram, cfg.flags
            )
            if not np.isfinite(parts["total"]):
                raise TrainingDiverged(epoch, entry["id"], parts["total"])
            ad.backward(loss)
            pending += 1
            for key, val in parts.items():
                sums[key] = sums.get(key, 0.0) + val
            if pending == cfg.accumulation:
                _apply_step(params, state, lr, pending, cfg.accumulation_mode)
                pending = 0
        if pending:
            _apply_step(params, state, lr, pending, cfg.accumulation_mode)
        entry = {"epoch": epoch, "lr": lr}
        entry.update({k: v / len(cache) for k, v in sums.items()})
        log.append(entry)
        if log_every and (epoch % log_every == 0 or epoch == cfg.epochs - 1):
            parts = " ".join(f"{k}={v:.4f}" for k, v in entry.items() if k not in ("epoch", "lr"))
            print(f"epoch {epoch:3d} lr={lr:.2e} {parts}", flush=True)
    return {"params": params, "stats": stats, "log": log}


def _apply_step(params, state, lr, count, mode):
    if mode == "mean" and count > 1:
        for p in params.values():
            p.grad /= count
    adamw_step(params, state, lr)
    for p in params.values():
        p.zero_grad()


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

def build_folds(records: list[ArteryRecord], n_folds: int, seed: int) -> list[list[str]]:
    """Stratified fold assignment: within each label group (focal, diffuse,
    unlabeled) arteries are shuffled and dealt round-robin, keeping per-fold
    label counts within one of each other."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(9000,)))
    groups: dict[str, list[str]] = {}
    for rec in records:
        groups.setdefault(rec.label or "unlabeled", []).append(rec.id)
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    offset = 0
    for label in sorted(groups):
        ids = sorted(groups[label])
        rng.shuffle(ids)
        for i, rec_id in enumerate(ids):
            folds[(offset + i) % n_folds].append(rec_id)
        offset += len(ids)
    return [sorted(f) for f in folds]


def leakage_probe(
    train_records: list[ArteryRecord], holdout_records: list[ArteryRecord], stats: dict
) -> None:
    """Two leakage checks per fold.

    Provenance: the stats in use must equal ones recomputed from the training
    split alone (catches stats accidentally derived from the holdout or the
    full dataset).  Shift survival: a constant shift injected into holdout
    latents must come out of normalization undiminished, proving the pipeline
    applies the given stats instead of re-fitting on its input.
    """
    _, recomputed = prepare_records(train_records)
    if not (
        np.allclose(stats["mean"], recomputed["mean"], atol=1e-12)
        and np.allclose(stats["std"], recomputed["std"], atol=1e-12)
    ):
        raise RuntimeError("normalization leakage: stats do not match the training split")

    shift = 3.0
    shifted = []
    for rec in holdout_records[: min(4, len(holdout_records))]:
        cs = rec.characteristics
        shifted.append(replace(rec, characteristics=replace_latent(cs, cs.latent + shift)))
    base, _ = prepare_records(holdout_records[: len(shifted)], stats)
    moved, _ = prepare_records(shifted, stats)
    std = np.asarray(stats["std"][1:])
    for rec_b, rec_m in zip(base, moved):
        delta = rec_m.characteristics.latent - rec_b.characteristics.latent
        expect = shift / std[:, None]
        if not np.allclose(delta, expect, atol=1e-9):
            raise RuntimeError("normalization leakage: holdout shift did not survive")


def replace_latent(cs, latent):
    from .curves import CharacteristicSet

    return CharacteristicSet(
        grid=cs.grid,
        lumen_area=cs.lumen_area,
        bifurcation=cs.bifurcation,
        side_branch=cs.side_branch,
        latent=latent,
    )


def training_ppg_threshold(
    train_records: list[ArteryRecord], net_cfg: NetworkConfig, ppg_cfg: met.PPGConfig
) -> float:
    """Median PPG of the training-split reference pullbacks."""
    values = []
    for rec in train_records:
        curve = reference_curve_2mm(rec, net_cfg.pool_kernel)
        if curve is None:
            continue
        ppg = met.ppg_index(curve, ppg_cfg)
        if ppg is not None:
            values.append(ppg)
    if not values:
        raise ValueError("no reference PPG values in the training split")
    return float(np.median(values))


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

def _run_fold(args):
    records, fold_ids, cfg, net_cfg, ppg_cfg, fold_index = args
    tune_allocator()
    holdout_set = set(fold_ids)
    train_recs = [r for r in records if r.id not in holdout_set and r.ref_drops is not None]
    holdout = [r for r in records if r.id in holdout_set]
    fold_cfg = replace(cfg, seed=int(np.random.SeedSequence(
        entropy=cfg.seed, spawn_key=(100 + fold_index,)).generate_state(1)[0]))
    result = train(train_recs, fold_cfg, net_cfg)
    stats = result["stats"]
    leakage_probe(train_recs, holdout, stats)
    threshold = training_ppg_threshold(train_recs, net_cfg, ppg_cfg)

    prepared_holdout, _ = prepare_records(holdout, stats)
    rows, pairs, skipped = [], [], []
    for raw, prep in zip(holdout, prepared_holdout):
        ref_curve = reference_curve_2mm(raw, net_cfg.pool_kernel)
        if ref_curve is None:
            skipped.append(raw.id)
            continue
        pred_curve = prediction_curve_2mm(prep, result["params"], net_cfg)
        rows.append(met.artery_row(raw.id, pred_curve, ref_curve, ppg_cfg))
        pairs.append((raw.id, pred_curve, ref_curve))
    met.apply_threshold(rows, threshold)
    checkpoint = {
        "fold": fold_index,
        "params": params_to_arrays(result["params"]),
        "stats": stats,
        "ppg_threshold": threshold,
        "log": result["log"],
    }
    return {"rows": rows, "pairs": pairs, "skipped": skipped, "checkpoint": checkpoint}


def run_cross_validation(
    records: list[ArteryRecord],
    cfg: TrainConfig,
    net_cfg: NetworkConfig,
    ppg_cfg: met.PPGConfig = met.PPGConfig(),
    n_workers: int = 1,
    folds: list[list[str]] | None = None,
    progress: bool = False,
) -> dict:
    """Train one model per fold; every artery is evaluated exactly once, by
    the model that never saw it.  Returns pooled report plus per-fold
    checkpoints."""
    if folds is None:
        folds = build_folds(records, cfg.fold_count, cfg.seed)
    tasks = [(records, fold, cfg, net_cfg, ppg_cfg, i) for i, fold in enumerate(folds)]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = []
        for t in tasks:
            results.append(_run_fold(t))
            if progress:
                print(f"fold {t[5]} done", flush=True)

    rows, pairs, skipped, checkpoints, thresholds = [], [], [], [], []
    for res in results:
        rows.extend(res["rows"])
        pairs.extend(res["pairs"])
        skipped.extend(res["skipped"])
        checkpoints.append(res["checkpoint"])
        thresholds.append(res["checkpoint"]["ppg_threshold"])
    evaluated_ids = [r["id"] for r in rows]
    if len(set(evaluated_ids)) != len(evaluated_ids):
        raise RuntimeError("an artery was evaluated more than once across folds")
    aggregates = met.aggregate_rows(rows, pairs)
    aggregates["ppg_thresholds_per_fold"] = thresholds
    aggregates["n_skipped"] = len(skipped)
    return {
        "per_artery": sorted(rows, key=lambda r: r["id"]),
        "aggregates": aggregates,
        "folds": folds,
        "checkpoints": checkpoints,
        "skipped": skipped,
    }


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_CONFIGS: dict[str, dict] = {
    "proposed": {"flags": AblationFlags(True, False, True), "latent_mode": "standard"},
    "mae_instead_of_emd": {"flags": AblationFlags(False, True, True), "latent_mode": "standard"},
    "only_emd": {"flags": AblationFlags(True, False, False), "latent_mode": "standard"},
    "only_mae": {"flags": AblationFlags(False, True, False), "latent_mode": "standard"},
    "only_hist": {"flags": AblationFlags(False, False, True), "latent_mode": "standard"},
    "no_latent_features": {"flags": AblationFlags(True, False, True), "latent_mode": "none"},
    "all_latent_features": {"flags": AblationFlags(True, False, True), "latent_mode": "all"},
}


def run_ablation(
    records: list[ArteryRecord],
    cfg: TrainConfig,
    net_cfg: NetworkConfig,
    ppg_cfg: met.PPGConfig = met.PPGConfig(),
    configurations: list[str] | None = None,
    n_workers: int = 1,
    progress: bool = False,
) -> dict:
    """Full cross-validation per named configuration, sharing folds and the
    training seed, reporting classification quality per configuration."""
    names = configurations or list(ABLATION_CONFIGS)
    unknown = [n for n in names if n not in ABLATION_CONFIGS]
    if unknown:
        raise ValueError(f"unknown ablation configurations: {unknown}")
    folds = build_folds(records, cfg.fold_count, cfg.seed)
    table = {}
    for name in names:
        spec_cfg = ABLATION_CONFIGS[name]
        run_cfg = replace(cfg, flags=spec_cfg["flags"])
        run_net = replace(net_cfg, latent_mode=spec_cfg["latent_mode"])
        result = run_cross_validation(
            records, run_cfg, run_net, ppg_cfg, n_workers=n_workers, folds=folds
        )
        agg = result["aggregates"]
        table[name] = {
            "accuracy": agg.get("accuracy"),
            "sensitivity": agg.get("sensitivity"),
            "specificity": agg.get("specificity"),
            "aupc_mad": agg.get("aupc_mad"),
            "n_classified": agg.get("n_classified"),
        }
        if progress:
            print(f"[ablation] {name}: {table[name]}", flush=True)
    return {"table": table, "folds": folds}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "ffr-pullback-checkpoint-v1"


def save_checkpoint(path, params: dict, net_cfg: NetworkConfig, stats: dict, extra: dict | None = None) -> None:
    header = {"format": CHECKPOINT_FORMAT, "network": net_cfg.to_dict(), "normalization": stats}
    if extra:
        header.update(extra)
    payload = {"header": header, "params": params_to_arrays(params)}
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict, NetworkConfig, dict, dict]:
    with open(path) as fh:
        payload = json.load(fh)
    header = payload["header"]
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {path}")
    net_cfg = NetworkConfig.from_dict(header["network"])
    params = params_from_arrays(payload["params"])
    return params, net_cfg, header["normalization"], header
