"""Synthetic Gaussian-mixture worlds with a labeled/unlabeled GCD split.

A world places class centers on a sphere scaled so pairwise center distance
sits at ``class_separation`` (in units of the within-class standard
deviation), then splits samples the standard way: a fraction of each known
class is labeled, everything else (including all novel classes) lands in the
unlabeled pool. Ground-truth labels for the unlabeled pool live behind a
separate :class:`TruthHandle` so training code cannot read them by accident.

Augmentations are feature-space stand-ins for image transforms: additive
noise for the weak view; multiplicative jitter, stronger noise and random
coordinate dropping for the strong view. One sampled transform instance can
be shared by a whole batch, which keeps per-sample augmentation deltas
comparable across the batch.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .seeding import derive_rng

WEAK = "weak"
STRONG = "strong"

DATASET_MAGIC = "RPCGCD1"
TRUTH_MAGIC = "RPCGCD1T"
TRUTH_SUFFIX = ".truth"


@dataclass(frozen=True)
class WorldConfig:
    num_classes_total: int
    num_known: int
    dim_input: int
    samples_per_class: int
    class_separation: float
    labeled_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.num_known < self.num_classes_total:
            raise ConfigError(
                f"need 1 <= num_known < num_classes_total, got "
                f"{self.num_known} / {self.num_classes_total}"
            )
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        if self.dim_input < 1 or self.samples_per_class < 1:
            raise ConfigError("dim_input and samples_per_class must be positive")
        if self.class_separation < 0:
            raise ConfigError(f"class_separation must be nonnegative, got {self.class_separation}")
        if int(self.labeled_fraction * self.samples_per_class) < 1:
            raise ConfigError(
                "labeled_fraction * samples_per_class < 1: no labeled samples per class"
            )


@dataclass(frozen=True)
class AugmentConfig:
    sigma_weak: float = 0.1
    sigma_strong: float = 0.5
    drop_prob_strong: float = 0.1
    scale_jitter_strong: float = 0.2

    def validate(self) -> None:
        if not self.sigma_weak < self.sigma_strong:
            raise ConfigError(
                f"sigma_weak must be < sigma_strong, got {self.sigma_weak} vs {self.sigma_strong}"
            )
        if not 0.0 <= self.drop_prob_strong <= 0.5:
            raise ConfigError(f"drop_prob_strong must be in [0, 0.5], got {self.drop_prob_strong}")
        if self.scale_jitter_strong < 0 or self.scale_jitter_strong > 1:
            raise ConfigError("scale_jitter_strong must be in [0, 1]")


@dataclass
class GcdSplit:
    """Training view of a world: labels only on the labeled part."""

    labeled_x: np.ndarray  # (n_l, d)
    labeled_y: np.ndarray  # (n_l,) ints in [0, num_known)
    unlabeled_x: np.ndarray  # (n_u, d)
    num_classes_total: int
    num_known: int
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.labeled_x.shape[1]

    @property
    def num_labeled(self) -> int:
        return self.labeled_x.shape[0]

    @property
    def num_unlabeled(self) -> int:
        return self.unlabeled_x.shape[0]


@dataclass
class TruthHandle:
    """Hidden ground truth for the unlabeled pool; evaluation only."""

    labels: np.ndarray  # (n_u,) ints in [0, num_classes_total)
    num_known: int

    @property
    def known_mask(self) -> np.ndarray:
        return self.labels < self.num_known


def class_centers(cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    """Centers on a sphere with pairwise distance concentrated at the target.

    When the class count fits the ambient dimension the directions are
    orthonormalized, which makes every pairwise distance exactly
    ``class_separation``; otherwise random unit directions give distances
    concentrating near it.
    """
    raw = rng.standard_normal((cfg.num_classes_total, cfg.dim_input))
    if cfg.num_classes_total <= cfg.dim_input:
        q, _ = np.linalg.qr(raw.T)
        directions = q[:, : cfg.num_classes_total].T
    else:
        directions = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return directions * (cfg.class_separation / np.sqrt(2.0))


def generate_world(cfg: WorldConfig) -> tuple[GcdSplit, TruthHandle]:
    """Draw a world; a pure function of the config (seed included)."""
    cfg.validate()
    rng = derive_rng(cfg.seed, "world")
    centers = class_centers(cfg, rng)

    per_class = [
        centers[c] + rng.standard_normal((cfg.samples_per_class, cfg.dim_input))
        for c in range(cfg.num_classes_total)
    ]
    n_lab = int(cfg.labeled_fraction * cfg.samples_per_class)

    labeled_x, labeled_y, unlabeled_x, truth = [], [], [], []
    for c, samples in enumerate(per_class):
        if c < cfg.num_known:
            labeled_x.append(samples[:n_lab])
            labeled_y.append(np.full(n_lab, c, dtype=np.int64))
            rest = samples[n_lab:]
        else:
            rest = samples
        unlabeled_x.append(rest)
        truth.append(np.full(len(rest), c, dtype=np.int64))

    unlabeled = np.concatenate(unlabeled_x)
    truth_arr = np.concatenate(truth)
    order = rng.permutation(len(unlabeled))

    split = GcdSplit(
        labeled_x=np.concatenate(labeled_x),
        labeled_y=np.concatenate(labeled_y),
        unlabeled_x=unlabeled[order],
        num_classes_total=cfg.num_classes_total,
        num_known=cfg.num_known,
        seed=cfg.seed,
    )
    return split, TruthHandle(labels=truth_arr[order], num_known=cfg.num_known)


# ---------------------------------------------------------------------------
# Augmentations


@dataclass(frozen=True)
class AugmentParams:
    """One sampled transform instance, applicable to a vector or a batch."""

    shift: np.ndarray
    scale: np.ndarray | None = None
    drop: np.ndarray | None = None

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = np.asarray(x, dtype=np.float64)
        if self.scale is not None:
            out = out * self.scale
        out = out + self.shift
        if self.drop is not None:
            out = out * self.drop
        return out


def sample_augment_params(kind: str, dim: int, cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    cfg.validate()
    if kind == WEAK:
        return AugmentParams(shift=rng.normal(0.0, cfg.sigma_weak, dim) if cfg.sigma_weak > 0 else np.zeros(dim))
    if kind == STRONG:
        j = cfg.scale_jitter_strong
        scale = rng.uniform(1.0 - j, 1.0 + j, dim)
        shift = rng.normal(0.0, cfg.sigma_strong, dim)
        drop = (rng.random(dim) >= cfg.drop_prob_strong).astype(np.float64)
        return AugmentParams(shift=shift, scale=scale, drop=drop)
    raise ConfigError(f"unknown augmentation kind {kind!r}")


def augment(x: np.ndarray, kind: str, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One stochastic view of a single vector."""
    x = np.asarray(x, dtype=np.float64)
    return sample_augment_params(kind, x.shape[-1], cfg, rng).apply(x)


def augment_batch(x: np.ndarray, kind: str, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One transform instance applied identically to every row of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    return sample_augment_params(kind, x.shape[1], cfg, rng).apply(x)


# ---------------------------------------------------------------------------
# Persistence

# Header: key=value lines terminated by a blank line, then one CSV row per
# sample: split flag (L/U), class id (-1 for unlabeled), coordinates. Floats
# are written with repr so a round-trip is bit-exact. Hidden labels go to a
# sibling file with suffix .truth.


def _fmt_row(flag: str, label: int, vec: np.ndarray) -> str:
    return ",".join([flag, str(int(label))] + [repr(float(v)) for v in vec])


def save_dataset(split: GcdSplit, path: str | os.PathLike, truth: TruthHandle | None = None) -> None:
    path = Path(path)
    lines = [
        f"magic={DATASET_MAGIC}",
        f"dim={split.dim}",
        f"num_classes_total={split.num_classes_total}",
        f"num_known={split.num_known}",
        f"num_labeled={split.num_labeled}",
        f"num_unlabeled={split.num_unlabeled}",
        f"seed={split.seed}",
        "",
    ]
    for y, x in zip(split.labeled_y, split.labeled_x):
        lines.append(_fmt_row("L", y, x))
    for x in split.unlabeled_x:
        lines.append(_fmt_row("U", -1, x))
    path.write_text("\n".join(lines) + "\n")

    if truth is not None:
        tlines = [
            f"magic={TRUTH_MAGIC}",
            f"num_unlabeled={len(truth.labels)}",
            f"num_known={truth.num_known}",
            "",
        ]
        tlines += [str(int(v)) for v in truth.labels]
        Path(str(path) + TRUTH_SUFFIX).write_text("\n".join(tlines) + "\n")


class _LineReader:
    """Iterates decoded lines while tracking line numbers and byte offsets."""

    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.path = path
        self.pos = 0
        self.lineno = 0

    def next_line(self) -> str | None:
        if self.pos >= len(self.raw):
            return None
        end = self.raw.find(b"\n", self.pos)
        if end == -1:
            end = len(self.raw)
        line = self.raw[self.pos : end].decode("utf-8", errors="replace")
        self.pos = end + 1
        self.lineno += 1
        return line

    def fail(self, message: str) -> DataFormatError:
        return DataFormatError(f"{self.path}: {message} (line {self.lineno}, byte {self.pos})")


def _read_header(reader: _LineReader, magic: str) -> dict[str, str]:
    header: dict[str, str] = {}
    first = True
    while True:
        line = reader.next_line()
        if line is None:
            raise reader.fail("truncated header: missing blank terminator line")
        if line == "":
            break
        if "=" not in line:
            raise reader.fail(f"malformed header line {line!r}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
        if first:
            if key.strip() != "magic" or value.strip() != magic:
                raise reader.fail(f"bad magic: expected {magic!r}, got {line!r}")
            first = False
    return header


def _header_int(header: dict[str, str], key: str, reader: _LineReader) -> int:
    try:
        return int(header[key])
    except KeyError:
        raise reader.fail(f"header missing key {key!r}") from None
    except ValueError:
        raise reader.fail(f"header key {key!r} is not an integer") from None


def load_dataset(path: str | os.PathLike) -> GcdSplit:
    path = Path(path)
    reader = _LineReader(path.read_bytes(), path)
    header = _read_header(reader, DATASET_MAGIC)
    dim = _header_int(header, "dim", reader)
    n_lab = _header_int(header, "num_labeled", reader)
    n_unl = _header_int(header, "num_unlabeled", reader)

    labeled_x = np.empty((n_lab, dim))
    labeled_y = np.empty(n_lab, dtype=np.int64)
    unlabeled_x = np.empty((n_unl, dim))
    seen_lab = seen_unl = 0
    for _ in range(n_lab + n_unl):
        line = reader.next_line()
        if line is None or line == "":
            raise reader.fail(f"truncated data: expected {n_lab + n_unl} rows, got {seen_lab + seen_unl}")
        parts = line.split(",")
        if len(parts) != dim + 2:
            raise reader.fail(f"row has {len(parts)} fields, expected {dim + 2}")
        flag, label = parts[0], parts[1]
        try:
            vec = np.array([float(v) for v in parts[2:]])
            label_val = int(label)
        except ValueError:
            raise reader.fail("row contains a non-numeric field") from None
        if flag == "L":
            if seen_unl:
                raise reader.fail("labeled row after unlabeled rows")
            labeled_x[seen_lab] = vec
            labeled_y[seen_lab] = label_val
            seen_lab += 1
        elif flag == "U":
            if label_val != -1:
                raise reader.fail("unlabeled row must carry class -1")
            unlabeled_x[seen_unl] = vec
            seen_unl += 1
        else:
            raise reader.fail(f"unknown split flag {flag!r}")
    if seen_lab != n_lab:
        raise reader.fail(f"expected {n_lab} labeled rows, found {seen_lab}")

    return GcdSplit(
        labeled_x=labeled_x,
        labeled_y=labeled_y,
        unlabeled_x=unlabeled_x,
        num_classes_total=_header_int(header, "num_classes_total", reader),
        num_known=_header_int(header, "num_known", reader),
        seed=_header_int(header, "seed", reader),
    )


def load_truth(path: str | os.PathLike) -> TruthHandle:
    """Read the hidden labels sibling of a dataset file."""
    tpath = Path(str(path) + TRUTH_SUFFIX)
    reader = _LineReader(tpath.read_bytes(), tpath)
    header = _read_header(reader, TRUTH_MAGIC)
    count = _header_int(header, "num_unlabeled", reader)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        line = reader.next_line()
        if line is None:
            raise reader.fail(f"truncated truth file: expected {count} labels, got {i}")
        try:
            labels[i] = int(line)
        except ValueError:
            raise reader.fail(f"non-integer label {line!r}") from None
    return TruthHandle(labels=labels, num_known=_header_int(header, "num_known", reader))
