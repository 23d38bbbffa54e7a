"""Staged SGD training: OVA warm-up, then the full objective.

Stage one trains the baseline (contrastive + classifier) together with the
one-vs-all heads so the soft known/novel weights mean something before they
gate anything. Afterwards the alignment and discovery terms switch on (each
has its own start epoch, defaulting to the warm-up boundary) and batches are
selected by the freshly estimated known-like fraction of the unlabeled pool.

All randomness flows from the config seed through named streams; a fixed
seed reproduces runs bit-for-bit on one platform. Metrics land in one CSV
row per epoch plus a deterministic JSON summary. Wall-clock time is reported
on stdout, never inside the summary, so identical runs write identical bytes.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evaluation, losses
from . import model as M
from .autodiff import Tensor, backward
from .errors import ConfigError, ContractError, NonFiniteError, TrainingAborted
from .losses import FusedBatch, LossWeights, build_batch
from .seeding import derive_rng, restore_rng, rng_state
from .worlds import STRONG, WEAK, AugmentConfig, GcdSplit, TruthHandle, augment_batch

METRIC_COLUMNS = [
    "epoch",
    "lr",
    "loss_total",
    "loss_rep_unsup",
    "loss_rep_sup",
    "loss_classifier",
    "loss_ova",
    "loss_align",
    "loss_discover",
    "id_fraction",
    "acc_all",
    "acc_old",
    "acc_new",
]

_PART_TO_COLUMN = {
    "total": "loss_total",
    "rep_unsup": "loss_rep_unsup",
    "rep_sup": "loss_rep_sup",
    "classifier": "loss_classifier",
    "ova": "loss_ova",
    "align": "loss_align",
    "discover": "loss_discover",
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    labeled_per_batch: int = 32
    unlabeled_candidates: int = 4  # drawn per anchor; the known-like top slice is kept
    lr0: float = 0.1
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs_ova: int = 10
    align_start_epoch: int | None = None  # None: right after warm-up
    discover_start_epoch: int | None = None
    id_fraction_warmup: float = 0.5  # batch mix before the OVA heads are trustworthy
    freeze_ova_after_warmup: bool = False
    ova_loss_weight: float = 1.0
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only
    seed: int = 0
    rpc_enabled: bool = True  # False: fusion/align/discovery paths are never built
    loss: LossWeights = field(default_factory=LossWeights)
    model: M.ModelConfig = field(default_factory=M.ModelConfig)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr0 > self.lr_min >= 0:
            raise ConfigError(f"need lr0 > lr_min >= 0, got {self.lr0} / {self.lr_min}")
        if self.epochs and self.warmup_epochs_ova >= self.epochs:
            raise ConfigError("warmup_epochs_ova must be smaller than epochs")
        if self.labeled_per_batch < 1 or self.unlabeled_candidates < 1:
            raise ConfigError("batch sizes must be positive")
        self.loss.validate()

    @property
    def align_gate(self) -> int:
        return self.warmup_epochs_ova if self.align_start_epoch is None else self.align_start_epoch

    @property
    def discover_gate(self) -> int:
        return self.warmup_epochs_ova if self.discover_start_epoch is None else self.discover_start_epoch


@dataclass
class TrainState:
    params: M.ModelParams
    momentum: dict[str, np.ndarray]
    rng: np.random.Generator
    epoch: int = 0  # completed epochs
    global_step: int = 0
    id_fraction: float = 0.0
    proto_means: np.ndarray | None = None  # running labeled-feature means per known class


@dataclass
class RunResult:
    params: M.ModelParams
    rows: list[dict]
    summary: dict
    checkpoint_path: Path | None = None


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    """Half-cosine decay from lr0 at step 0 to lr_min at total_steps."""
    if step < 0:
        raise ConfigError("step must be nonnegative")
    if step >= total_steps:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * step / total_steps))


def estimate_id_fraction(params: M.ModelParams, unlabeled_x: np.ndarray) -> float:
    """Share of the unlabeled pool the OVA heads score as known (> 0.5)."""
    if len(unlabeled_x) == 0:
        raise ContractError("unlabeled pool is empty")
    scores = M.score_batch(params, unlabeled_x, tau=1.0)
    return float(np.mean(scores.known_weight > 0.5))


def init_state(cfg: TrainConfig, split: GcdSplit) -> TrainState:
    params = M.init_params(
        cfg.model,
        input_dim=split.dim,
        num_classes=split.num_classes_total,
        num_known=split.num_known,
        rng=derive_rng(cfg.seed, "init"),
    )
    momentum = {name: np.zeros_like(t.data) for name, t in params.named()}
    return TrainState(params=params, momentum=momentum, rng=derive_rng(cfg.seed, "train"))


def _sgd_step(state: TrainState, cfg: TrainConfig, lr: float, skip_ova: bool) -> None:
    for name, p in state.params.named():
        if p.grad is None:
            continue
        if skip_ova and name.startswith("ova"):
            p.grad = None
            continue
        g = p.grad + cfg.weight_decay * p.data
        buf = state.momentum[name]
        buf *= cfg.momentum
        buf += g
        p.data = p.data - lr * buf
        p.grad = None


def _update_proto_means(state: TrainState, cfg: TrainConfig, split: GcdSplit) -> None:
    feats = M.encode(state.params, ad.constant(split.labeled_x)).data
    means = np.stack(
        [feats[split.labeled_y == c].mean(axis=0) for c in range(split.num_known)]
    )
    if state.proto_means is None:
        state.proto_means = means
    else:
        d = cfg.model.proto_ema_decay
        state.proto_means = d * state.proto_means + (1.0 - d) * means


def _step_losses(
    state: TrainState,
    batch: FusedBatch,
    cfg: TrainConfig,
    align_active: bool,
    discover_active: bool,
) -> tuple[Tensor, dict[str, float]]:
    """Forward pass for one batch; returns the total loss and component log."""
    params = state.params
    w = cfg.loss
    lab_rows = batch.labeled_rows
    unl_rows = batch.unlabeled_rows
    labels_lab = batch.labels[lab_rows]

    h_weak = M.encode(params, Tensor(batch.weak))
    h_strong = M.encode(params, Tensor(batch.strong))
    z_weak = M.project(params, h_weak)
    z_strong = M.project(params, h_strong)

    # Strong view predicts; weak view is the target side.
    z_hat = ad.l2_normalize_rows(z_strong)
    z_tilde = ad.l2_normalize_rows(z_weak)
    rep_unsup = losses.unsup_contrastive(z_hat, z_tilde, w.tau_unsup)

    rep_sup = None
    if lab_rows.size >= 2:
        try:
            rep_sup = losses.sup_contrastive(
                ad.gather_rows(z_hat, lab_rows),
                ad.gather_rows(z_tilde, lab_rows),
                labels_lab,
                w.tau_sup,
            )
        except ContractError:
            rep_sup = None  # no anchor had a same-class partner this step

    p_hat = M.soft_label(params, h_strong, w.tau_sup)
    p_tilde = M.soft_label(params, h_weak, w.tau_sup)
    cls = losses.classifier_losses(
        p_hat, p_tilde, batch.labels, w.sup_weight, w.entropy_weight, params.num_known
    )

    align = None
    if align_active and batch.partners_per_anchor > 0:
        fusion = losses.fusion_matrix(batch.known_weight, w.fusion_alpha)
        deltas = losses.behavior_deltas(
            z_weak,
            z_strong,
            losses.apply_fusion(z_weak, fusion),
            losses.apply_fusion(z_strong, fusion),
            batch.labeled_mask,
        )
        try:
            align = losses.align_loss(
                ad.gather_rows(deltas, lab_rows),
                ad.gather_rows(deltas, unl_rows),
                batch.known_weight[unl_rows],
                batch.anchors,
                batch.partners_per_anchor,
            )
        except ContractError:
            align = None  # all partner weights were zero this step

    discover = None
    if discover_active and unl_rows.size >= 2:
        feats_u = M.encode(params, Tensor(batch.x[unl_rows]))
        if cfg.model.prototype_source == "ema_means" and state.proto_means is not None:
            protos = ad.constant(state.proto_means)
        else:
            protos = ad.gather_rows(params.prototypes, np.arange(params.num_known))
        discover = losses.discovery_loss(
            feats_u, protos, 1.0 - batch.known_weight[unl_rows], w.discover_tau
        )

    total, parts = losses.total_loss(rep_unsup, rep_sup, cls, align, discover, w)

    if cfg.ova_loss_weight > 0 and not (cfg.freeze_ova_after_warmup and state.epoch >= cfg.warmup_epochs_ova):
        ova = M.ova_bce_loss(params, batch.weak[lab_rows], labels_lab)
        parts["ova"] = ova.item()
        total = ad.add(total, ad.mul(ova, cfg.ova_loss_weight))
        parts["total"] = total.item()
    return total, parts


def train_epoch(
    state: TrainState,
    split: GcdSplit,
    aug_cfg: AugmentConfig,
    cfg: TrainConfig,
    total_steps: int,
) -> dict[str, float]:
    """One pass over the labeled pool; returns mean per-component losses."""
    epoch = state.epoch
    in_warmup = epoch < cfg.warmup_epochs_ova
    rpc = cfg.rpc_enabled
    align_active = rpc and not in_warmup and epoch >= cfg.align_gate and cfg.loss.align_weight > 0
    discover_active = (
        rpc and not in_warmup and epoch >= cfg.discover_gate and cfg.loss.discover_weight > 0
    )

    if cfg.loss.id_fraction is not None:
        state.id_fraction = cfg.loss.id_fraction
    elif in_warmup:
        state.id_fraction = cfg.id_fraction_warmup
    else:
        state.id_fraction = estimate_id_fraction(state.params, split.unlabeled_x)

    if in_warmup:
        pool_weights = np.full(split.num_unlabeled, 0.5)
    else:
        pool_weights = M.score_batch(state.params, split.unlabeled_x, cfg.loss.tau_sup).known_weight

    if cfg.model.prototype_source == "ema_means":
        _update_proto_means(state, cfg, split)

    steps = max(1, split.num_labeled // cfg.labeled_per_batch)
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    lr = cfg.lr0
    for _ in range(steps):
        lr = cosine_lr(state.global_step, max(total_steps - 1, 1), cfg.lr0, cfg.lr_min)
        batch = build_batch(
            split.labeled_x,
            split.labeled_y,
            split.unlabeled_x,
            pool_weights,
            cfg.labeled_per_batch,
            cfg.unlabeled_candidates,
            state.id_fraction,
            state.rng,
        )
        batch.weak = augment_batch(batch.x, WEAK, aug_cfg, state.rng)
        batch.strong = augment_batch(batch.x, STRONG, aug_cfg, state.rng)

        total, parts = _step_losses(state, batch, cfg, align_active, discover_active)
        backward(total)
        _sgd_step(state, cfg, lr, skip_ova=cfg.freeze_ova_after_warmup and not in_warmup)
        state.global_step += 1
        for key, value in parts.items():
            sums[key] = sums.get(key, 0.0) + value
            counts[key] = counts.get(key, 0) + 1

    metrics = {key: sums[key] / counts[key] for key in sums}
    metrics["lr"] = lr
    metrics["id_fraction"] = state.id_fraction
    return metrics


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(rows: list[dict], path: Path) -> None:
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(_format_cell(row.get(col)) for col in METRIC_COLUMNS))
    path.write_text("\n".join(lines) + "\n")


def _epoch_row(epoch: int, metrics: dict[str, float], acc) -> dict:
    row: dict = {"epoch": epoch, "lr": metrics.get("lr"), "id_fraction": metrics.get("id_fraction")}
    for part, column in _PART_TO_COLUMN.items():
        row[column] = metrics.get(part)
    if acc is not None:
        row["acc_all"] = acc.all_acc
        row["acc_old"] = acc.old_acc
        row["acc_new"] = acc.new_acc
    return row


def _save_checkpoint(state: TrainState, path: Path) -> None:
    extras = {f"mom.{name}": buf for name, buf in state.momentum.items()}
    if state.proto_means is not None:
        extras["proto_means"] = state.proto_means
    M.save_params(path, state.params, extras)
    meta = {
        "epoch": state.epoch,
        "global_step": state.global_step,
        "id_fraction": state.id_fraction,
        "rng": rng_state(state.rng),
    }
    Path(str(path) + ".state.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_checkpoint(path: str | Path) -> TrainState:
    params, extras = M.load_params(path)
    momentum = {k[len("mom.") :]: v for k, v in extras.items() if k.startswith("mom.")}
    if not momentum:
        momentum = {name: np.zeros_like(t.data) for name, t in params.named()}
    meta = json.loads(Path(str(path) + ".state.json").read_text())
    return TrainState(
        params=params,
        momentum=momentum,
        rng=restore_rng(meta["rng"]),
        epoch=meta["epoch"],
        global_step=meta["global_step"],
        id_fraction=meta["id_fraction"],
        proto_means=extras.get("proto_means"),
    )


def run_training(
    cfg: TrainConfig,
    aug_cfg: AugmentConfig,
    split: GcdSplit,
    truth: TruthHandle | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    config_echo: dict | None = None,
) -> RunResult:
    """Run all epochs; optionally evaluate per epoch and persist artifacts.

    ``truth`` is only ever used to report accuracy; the update path cannot
    see it. With ``resume`` pointing at a checkpoint, training continues
    after the checkpointed epoch and reproduces the uninterrupted run.
    """
    cfg.validate()
    aug_cfg.validate()
    if cfg.labeled_per_batch > split.num_labeled:
        raise ConfigError(
            f"labeled_per_batch={cfg.labeled_per_batch} exceeds labeled pool ({split.num_labeled})"
        )
    if cfg.unlabeled_candidates > split.num_unlabeled:
        raise ConfigError(
            f"unlabeled_candidates={cfg.unlabeled_candidates} exceeds unlabeled pool "
            f"({split.num_unlabeled})"
        )

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    state = load_checkpoint(resume) if resume is not None else init_state(cfg, split)
    steps_per_epoch = max(1, split.num_labeled // cfg.labeled_per_batch)
    total_steps = cfg.epochs * steps_per_epoch

    started = time.perf_counter()
    rows: list[dict] = []
    snapshot: dict[str, np.ndarray] = {}

    def checkpoint(path: Path) -> None:
        _save_checkpoint(state, path)

    final_ckpt: Path | None = None
    try:
        while state.epoch < cfg.epochs:
            snapshot = {name: t.data.copy() for name, t in state.params.named()}
            metrics = train_epoch(state, split, aug_cfg, cfg, total_steps)
            state.epoch += 1
            acc = (
                evaluation.evaluate_params(state.params, split.unlabeled_x, truth)
                if truth is not None
                else None
            )
            rows.append(_epoch_row(state.epoch, metrics, acc))
            if out_path is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                checkpoint(out_path / f"checkpoint_ep{state.epoch}.ckpt")
    except NonFiniteError as err:
        ckpt = None
        if out_path is not None:
            ckpt = out_path / "checkpoint_abort.ckpt"
            if not all(np.all(np.isfinite(t.data)) for _, t in state.params.named()):
                for name, t in state.params.named():
                    t.data = snapshot[name]
            checkpoint(ckpt)
            write_metrics_csv(rows, out_path / "metrics.csv")
        raise TrainingAborted(f"training aborted: {err}", checkpoint_path=ckpt) from err

    elapsed = time.perf_counter() - started
    summary = _build_summary(cfg, aug_cfg, split, rows, config_echo)
    if out_path is not None:
        final_ckpt = out_path / "checkpoint_final.ckpt"
        checkpoint(final_ckpt)
        write_metrics_csv(rows, out_path / "metrics.csv")
        (out_path / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"training finished in {elapsed:.1f}s ({cfg.epochs} epochs)")
    return RunResult(params=state.params, rows=rows, summary=summary, checkpoint_path=final_ckpt)


def _build_summary(
    cfg: TrainConfig,
    aug_cfg: AugmentConfig,
    split: GcdSplit,
    rows: list[dict],
    config_echo: dict | None,
) -> dict:
    echo = config_echo if config_echo is not None else {
        "train": asdict(cfg),
        "augment": asdict(aug_cfg),
    }
    summary: dict = {
        "config": echo,
        "data": {
            "num_labeled": split.num_labeled,
            "num_unlabeled": split.num_unlabeled,
            "num_classes_total": split.num_classes_total,
            "num_known": split.num_known,
            "dim": split.dim,
        },
        "epochs_run": len(rows),
    }
    if rows:
        summary["final"] = {k: rows[-1].get(k) for k in METRIC_COLUMNS if rows[-1].get(k) is not None}
        scored = [r for r in rows if r.get("acc_all") is not None]
        if scored:
            best = max(scored, key=lambda r: r["acc_all"])
            summary["best"] = {
                "epoch": best["epoch"],
                "acc_all": best["acc_all"],
                "acc_old": best.get("acc_old"),
                "acc_new": best.get("acc_new"),
            }
    return summary


def baseline_config(cfg: TrainConfig) -> TrainConfig:
    """The same run with every RPC-specific component compiled out."""
    return replace(
        cfg,
        rpc_enabled=False,
        loss=cfg.loss.with_overrides(align_weight=0.0, discover_weight=0.0, fusion_alpha=0.0),
    )
