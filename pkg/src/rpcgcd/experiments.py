"""Ablation and hyperparameter-sweep harnesses over synthetic worlds.

These run full trainings and collect final All/Old/New accuracies; they
report, they do not judge. Directional claims about the results live in the
acceptance tests.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .losses import LossWeights
from .training import TrainConfig, run_training
from .worlds import AugmentConfig, WorldConfig, generate_world

SWEEPABLE = ("align_weight", "discover_weight", "fusion_alpha")


@dataclass(frozen=True)
class AblationSpec:
    """A named variant with a subset of {fusion, align, discover} disabled."""

    name: str
    disabled: tuple[str, ...] = ()

    def apply(self, weights: LossWeights) -> LossWeights:
        out = weights
        for component in self.disabled:
            if component == "fusion":
                out = out.with_overrides(fusion_alpha=0.0)
            elif component == "align":
                out = out.with_overrides(align_weight=0.0)
            elif component == "discover":
                out = out.with_overrides(discover_weight=0.0)
            else:
                raise ConfigError(f"unknown ablation component {component!r}")
        return out


TABLE_SPECS = [
    AblationSpec("full", ()),
    AblationSpec("w/o Embedding Fusion", ("fusion",)),
    AblationSpec("w/o L_align", ("align",)),
    AblationSpec("w/o L_discover", ("discover",)),
]


@dataclass
class VariantResult:
    name: str
    per_seed: list[tuple]  # (all, old, new) per seed; None entries on failure
    error: str | None = None

    def _column(self, idx: int) -> np.ndarray:
        vals = [t[idx] for t in self.per_seed if t is not None and t[idx] is not None]
        return np.asarray(vals, dtype=np.float64)

    def mean(self, idx: int) -> float | None:
        col = self._column(idx)
        return float(col.mean()) if col.size else None

    def spread(self, idx: int) -> float | None:
        col = self._column(idx)
        return float(col.std()) if col.size else None


def _run_one(
    world_cfg: WorldConfig,
    aug_cfg: AugmentConfig,
    train_cfg: TrainConfig,
    seed: int,
) -> tuple:
    wcfg = replace(world_cfg, seed=seed)
    tcfg = replace(train_cfg, seed=seed)
    split, truth = generate_world(wcfg)
    result = run_training(tcfg, aug_cfg, split, truth=truth)
    final = result.rows[-1]
    return (final.get("acc_all"), final.get("acc_old"), final.get("acc_new"))


def run_ablation(
    world_cfg: WorldConfig,
    aug_cfg: AugmentConfig,
    train_cfg: TrainConfig,
    specs: list[AblationSpec] | None = None,
    seeds: tuple[int, ...] = (0, 1, 2),
    out_dir: str | Path | None = None,
) -> list[VariantResult]:
    """Train every variant on every seed's world; aggregate accuracies."""
    specs = TABLE_SPECS if specs is None else specs
    results: list[VariantResult] = []
    for spec in specs:
        variant_cfg = replace(train_cfg, loss=spec.apply(train_cfg.loss))
        per_seed: list[tuple] = []
        error = None
        for seed in seeds:
            try:
                per_seed.append(_run_one(world_cfg, aug_cfg, variant_cfg, seed))
            except Exception as exc:  # record and keep the table intact
                per_seed.append(None)
                error = f"seed {seed}: {exc}"
        results.append(VariantResult(name=spec.name, per_seed=per_seed, error=error))
    if out_dir is not None:
        write_ablation_outputs(results, Path(out_dir))
    return results


def run_sweep(
    param: str,
    grid: list[float],
    world_cfg: WorldConfig,
    aug_cfg: AugmentConfig,
    train_cfg: TrainConfig,
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> list[tuple]:
    """One run per grid value of ``param``; rows (value, all, old, new)."""
    if param not in SWEEPABLE:
        raise ConfigError(f"sweep parameter must be one of {SWEEPABLE}, got {param!r}")
    if not grid:
        raise ConfigError("sweep grid is empty")
    rows = []
    for value in grid:
        cfg = replace(train_cfg, loss=train_cfg.loss.with_overrides(**{param: value}))
        rows.append((value, *_run_one(world_cfg, aug_cfg, cfg, seed)))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"sweep_{param}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([param, "acc_all", "acc_old", "acc_new"])
            writer.writerows(rows)
    return rows


def ablation_table_text(results: list[VariantResult]) -> str:
    header = f"{'variant':<24} {'All':>14} {'Old':>14} {'New':>14}"
    lines = [header, "-" * len(header)]
    for res in results:
        cells = []
        for idx in range(3):
            mean, spread = res.mean(idx), res.spread(idx)
            cells.append("failed" if mean is None else f"{mean:.3f}±{spread:.3f}")
        lines.append(f"{res.name:<24} {cells[0]:>14} {cells[1]:>14} {cells[2]:>14}")
        if res.error:
            lines.append(f"    ! {res.error}")
    return "\n".join(lines)


def write_ablation_outputs(results: list[VariantResult], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["variant", "seed", "acc_all", "acc_old", "acc_new", "mean_all", "mean_old", "mean_new"]
        )
        for res in results:
            for seed_idx, vals in enumerate(res.per_seed):
                row = [res.name, seed_idx]
                row += list(vals) if vals is not None else [None, None, None]
                row += [res.mean(0), res.mean(1), res.mean(2)]
                writer.writerow(row)
    (out_dir / "ablation.txt").write_text(ablation_table_text(results) + "\n")
