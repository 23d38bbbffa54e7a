"""Every objective term plus the paired-batch constructor and embedding fusion.

Conventions shared by the trainer:

* The strong view is the prediction view; the weak view provides targets.
  Target distributions are gradient-detached, so self-distillation cannot
  collapse by dragging the target toward the prediction.
* Known/novel soft weights are always treated as constants inside losses
  (no gradient flows into the OVA heads through a weighting term); letting
  them float would let the model zero out losses by declaring everything
  novel.
* Batches follow the anchored pattern: each labeled sample is followed by
  its selected unlabeled partners, so row ``i * (1 + partners)`` is labeled.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NonFiniteError, ShapeError

_LOG_FLOOR = 1e-300
_NEG_INF_FILL = -1e30


@dataclass(frozen=True)
class LossWeights:
    """Objective weights and temperatures; defaults follow the method's recipe."""

    sup_weight: float = 0.35  # balance between unsupervised and supervised terms
    entropy_weight: float = 1.0  # mean-prediction entropy regularizer
    align_weight: float = 0.5  # behavioral alignment term
    discover_weight: float = 0.3  # relational discovery term
    fusion_alpha: float = 0.3  # embedding fusion strength
    tau_sup: float = 0.1
    tau_unsup: float = 0.07
    # Similarity-kernel temperature for the discovery term. None reuses
    # tau_unsup, matching the written formula; that makes the pair kernel
    # reach exp(1/0.07) ~ 1.6e6 on collapsed same-class features, which SGD
    # at these learning rates cannot survive on desk-scale worlds. The
    # shipped presets therefore pin a softer kernel.
    tau_discover: float | None = 0.4
    id_fraction: float | None = None  # fixed override for the estimated ID share

    @property
    def discover_tau(self) -> float:
        return self.tau_unsup if self.tau_discover is None else self.tau_discover

    def validate(self) -> None:
        if not 0.0 <= self.sup_weight <= 1.0:
            raise ConfigError(f"sup_weight must be in [0, 1], got {self.sup_weight}")
        if not 0.0 <= self.fusion_alpha <= 1.0:
            raise ConfigError(f"fusion_alpha must be in [0, 1], got {self.fusion_alpha}")
        if self.tau_sup <= 0 or self.tau_unsup <= 0:
            raise ConfigError("temperatures must be positive")
        if self.tau_discover is not None and self.tau_discover <= 0:
            raise ConfigError("tau_discover must be positive when set")
        for name in ("entropy_weight", "align_weight", "discover_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.id_fraction is not None and not 0.0 <= self.id_fraction <= 1.0:
            raise ConfigError(f"id_fraction must be in [0, 1], got {self.id_fraction}")

    def with_overrides(self, **kwargs) -> "LossWeights":
        return replace(self, **kwargs)


# ---------------------------------------------------------------------------
# Contrastive representation losses


def unsup_contrastive(z_hat: Tensor, z_tilde: Tensor, tau: float) -> Tensor:
    """Cross-view InfoNCE over the whole batch.

    Anchor i matches its own other view against every row of the first view;
    the denominator includes the positive itself. Rows must be L2-normalized.
    """
    if z_hat.shape != z_tilde.shape or z_hat.ndim != 2:
        raise ShapeError(f"views must be equal-shaped matrices, got {z_hat.shape} vs {z_tilde.shape}")
    if z_hat.shape[0] < 2:
        raise ContractError("contrastive loss needs a batch of at least 2")
    sims = ad.mul(ad.matmul(z_hat, ad.transpose(z_tilde)), 1.0 / tau)  # [j, i] = <hat_j, tilde_i>/tau
    pos = ad.mul(ad.tsum(ad.mul(z_hat, z_tilde), axis=1), 1.0 / tau)
    return ad.tmean(ad.sub(ad.logsumexp(sims, axis=0), pos))


def sup_contrastive(z_hat: Tensor, z_tilde: Tensor, labels: np.ndarray, tau: float) -> Tensor:
    """Supervised contrastive loss over labeled rows.

    Positives are same-label rows (self excluded); the denominator runs over
    all other rows of the second view. Anchors without positives are skipped;
    if no anchor has one, that is a caller error.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = z_hat.shape[0]
    if z_hat.shape != z_tilde.shape or labels.shape != (n,):
        raise ShapeError("views and labels disagree on the batch size")
    if n < 2:
        raise ContractError("supervised contrastive loss needs at least 2 rows")

    pos_mask = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(pos_mask, 0.0)
    counts = pos_mask.sum(axis=1)
    valid = np.flatnonzero(counts > 0)
    if valid.size == 0:
        raise ContractError("no anchor has a same-class partner")

    sims = ad.mul(ad.matmul(z_hat, ad.transpose(z_tilde)), 1.0 / tau)
    off_diag = ad.add(sims, ad.constant(np.diag(np.full(n, _NEG_INF_FILL))))
    denom = ad.logsumexp(off_diag, axis=1)
    mean_pos = ad.div(
        ad.tsum(ad.mul(sims, ad.constant(pos_mask)), axis=1),
        ad.constant(np.maximum(counts, 1.0)),
    )
    # per_anchor is 1-D; the mean over valid anchors is a dot with an indicator.
    per_anchor = ad.sub(denom, mean_pos)
    indicator = np.zeros(n)
    indicator[valid] = 1.0 / valid.size
    return ad.tsum(ad.mul(per_anchor, ad.constant(indicator)))


def classifier_losses(
    p_hat: Tensor,
    p_tilde: Tensor,
    labels: np.ndarray | None,
    sup_weight: float,
    entropy_weight: float,
    num_known: int | None = None,
) -> Tensor:
    """Classifier objective: cross-view CE, supervised CE, entropy reward.

    ``labels`` carries one entry per row, -1 for unlabeled rows (or None for
    a fully unlabeled batch). The target distribution (second view) is
    detached. The mean prediction over both views earns an entropy bonus,
    which fights collapse onto few prototypes.
    """
    if p_hat.shape != p_tilde.shape or p_hat.ndim != 2:
        raise ShapeError("soft label views must be equal-shaped matrices")
    q = p_hat.shape[0]
    target = p_tilde.detach()
    log_hat = ad.log(ad.clamp_min(p_hat, _LOG_FLOOR))

    cross_view = ad.tmean(ad.neg(ad.tsum(ad.mul(target, log_hat), axis=1)))

    sup_term: Tensor | None = None
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (q,):
            raise ShapeError("labels must have one entry per row")
        lab_rows = np.flatnonzero(labels >= 0)
        if lab_rows.size:
            y = labels[lab_rows]
            if num_known is not None and y.max() >= num_known:
                raise ContractError(f"labeled class id {y.max()} outside known range {num_known}")
            if y.max() >= p_hat.shape[1]:
                raise ContractError("labeled class id outside the classifier range")
            onehot = np.zeros((lab_rows.size, p_hat.shape[1]))
            onehot[np.arange(lab_rows.size), y] = 1.0
            picked = ad.gather_rows(log_hat, lab_rows)
            sup_term = ad.tmean(ad.neg(ad.tsum(ad.mul(ad.constant(onehot), picked), axis=1)))

    mean_pred = ad.mul(ad.add(ad.tsum(p_hat, axis=0), ad.tsum(target, axis=0)), 1.0 / (2.0 * q))
    entropy = ad.neg(ad.tsum(ad.mul(mean_pred, ad.log(ad.clamp_min(mean_pred, _LOG_FLOOR)))))

    total = ad.mul(cross_view, 1.0 - sup_weight)
    if sup_term is not None:
        total = ad.add(total, ad.mul(sup_term, sup_weight))
    return ad.sub(total, ad.mul(entropy, entropy_weight))


# ---------------------------------------------------------------------------
# Paired batch construction


@dataclass
class FusedBatch:
    """Interleaved anchored batch: each labeled row leads its partners.

    ``labels`` carries -1 on unlabeled rows; ``known_weight`` is 1.0 on
    labeled rows and the (detached) OVA score on unlabeled rows. Weak and
    strong views each come from one transform instance shared by all rows.
    """

    x: np.ndarray  # (Q, input_dim) raw inputs in pattern order
    labels: np.ndarray  # (Q,)
    known_weight: np.ndarray  # (Q,)
    anchors: int  # number of labeled rows
    partners_per_anchor: int
    weak: np.ndarray | None = None
    strong: np.ndarray | None = None

    def __post_init__(self) -> None:
        expected = self.anchors * (1 + self.partners_per_anchor)
        if self.x.shape[0] != expected:
            raise ShapeError(f"batch has {self.x.shape[0]} rows, pattern expects {expected}")

    @property
    def q(self) -> int:
        return self.x.shape[0]

    @property
    def labeled_rows(self) -> np.ndarray:
        return np.arange(self.anchors) * (1 + self.partners_per_anchor)

    @property
    def unlabeled_rows(self) -> np.ndarray:
        return np.flatnonzero(self.labels < 0)

    @property
    def labeled_mask(self) -> np.ndarray:
        mask = np.zeros(self.q, dtype=bool)
        mask[self.labeled_rows] = True
        return mask


def build_batch(
    labeled_x: np.ndarray,
    labeled_y: np.ndarray,
    unlabeled_x: np.ndarray,
    known_weight_pool: np.ndarray,
    anchors: int,
    candidates: int,
    id_fraction: float,
    rng: np.random.Generator,
) -> FusedBatch:
    """Sample anchors and attach their most known-like unlabeled partners.

    Per anchor, ``candidates`` unlabeled samples are drawn uniformly and the
    ``floor(candidates * id_fraction)`` with the highest known-weight are
    kept. With an ID fraction near zero the batch degrades to labeled rows
    only and alignment has nothing to pair (callers skip it that step).
    """
    if candidates < 1:
        raise ContractError("need at least one unlabeled candidate per anchor")
    if anchors < 1 or anchors > len(labeled_x):
        raise ContractError(f"cannot draw {anchors} anchors from {len(labeled_x)} labeled samples")
    if candidates > len(unlabeled_x):
        raise ContractError(f"cannot draw {candidates} candidates from {len(unlabeled_x)} unlabeled samples")

    keep = int(candidates * id_fraction)
    anchor_idx = rng.choice(len(labeled_x), size=anchors, replace=False)

    rows, labels, weights = [], [], []
    for a in anchor_idx:
        rows.append(labeled_x[a])
        labels.append(int(labeled_y[a]))
        weights.append(1.0)
        if keep > 0:
            cand = rng.choice(len(unlabeled_x), size=candidates, replace=False)
            ranked = cand[np.argsort(-known_weight_pool[cand], kind="stable")[:keep]]
            for u in ranked:
                rows.append(unlabeled_x[u])
                labels.append(-1)
                weights.append(float(known_weight_pool[u]))

    return FusedBatch(
        x=np.asarray(rows),
        labels=np.asarray(labels, dtype=np.int64),
        known_weight=np.asarray(weights),
        anchors=anchors,
        partners_per_anchor=keep,
    )


# ---------------------------------------------------------------------------
# Embedding fusion


def fusion_matrix(known_weight: np.ndarray, alpha: float) -> Tensor:
    """Circular-shift fusion matrix A.

    Row i moves mass ``alpha * w_i`` from itself onto its predecessor's
    embedding (wrapping at the top), so every row of I + A sums to one.
    The weights are constants by design.
    """
    w = np.asarray(known_weight, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise ShapeError("known_weight must be a nonempty vector")
    q = w.size
    a = np.zeros((q, q))
    idx = np.arange(q)
    a[idx, (idx - 1) % q] += alpha * w
    a[idx, idx] -= alpha * w
    return ad.constant(a)


def apply_fusion(z: Tensor, a: Tensor) -> Tensor:
    """Fused embeddings (I + A) Z, differentiable through Z.

    A zero fusion matrix short-circuits to the identity so the no-fusion
    configuration is bit-exact.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[1] != z.shape[0]:
        raise ShapeError(f"fusion matrix {a.shape} does not match embeddings {z.shape}")
    if not a.data.any():
        return z
    mixer = ad.add(ad.constant(np.eye(a.shape[0])), a)
    return ad.matmul(mixer, z)


def behavior_deltas(
    proj_weak: Tensor,
    proj_strong: Tensor,
    fused_weak: Tensor,
    fused_strong: Tensor,
    labeled_mask: np.ndarray,
) -> Tensor:
    """Per-row weak-minus-strong projection difference.

    Labeled rows use raw projections; unlabeled rows the fused ones (both
    views fused with the same matrix).
    """
    mask = np.asarray(labeled_mask, dtype=np.float64)[:, None]
    raw = ad.sub(proj_weak, proj_strong)
    fused = ad.sub(fused_weak, fused_strong)
    return ad.add(ad.mul(raw, ad.constant(mask)), ad.mul(fused, ad.constant(1.0 - mask)))


def align_loss(
    delta_labeled: Tensor,
    delta_unlabeled: Tensor,
    known_weight: np.ndarray,
    anchors: int,
    partners: int,
) -> Tensor:
    """Mean squared gap between each anchor delta and its partners' mean.

    Partner deltas are averaged with their (constant) known-weights, grouped
    anchor-major. Anchors whose partner weights sum to zero are skipped and
    the mean renormalized; with no usable anchor the call is an error.
    """
    w = np.asarray(known_weight, dtype=np.float64)
    if partners < 1 or delta_unlabeled.shape[0] != anchors * partners or w.shape != (anchors * partners,):
        raise ShapeError("partner deltas/weights do not match the anchor grouping")
    if delta_labeled.shape[0] != anchors:
        raise ShapeError("one labeled delta per anchor required")

    groups = w.reshape(anchors, partners)
    sums = groups.sum(axis=1)
    valid = np.flatnonzero(sums > 0)
    if valid.size == 0:
        raise ContractError("every anchor has zero partner weight")

    mixer = np.zeros((anchors, anchors * partners))
    for i in valid:
        mixer[i, i * partners : (i + 1) * partners] = groups[i] / sums[i]
    weighted_mean = ad.matmul(ad.constant(mixer), delta_unlabeled)
    diff = ad.gather_rows(ad.sub(delta_labeled, weighted_mean), valid)
    return ad.mul(ad.tsum(ad.mul(diff, diff)), 1.0 / valid.size)


# ---------------------------------------------------------------------------
# Relational discovery


def pairwise_similarities(features: Tensor, tau: float) -> Tensor:
    """exp(cosine / tau) for every pair of rows; symmetric."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    unit = ad.l2_normalize_rows(features)
    return ad.exp(ad.mul(ad.matmul(unit, ad.transpose(unit)), 1.0 / tau))


def discovery_loss(
    features: Tensor,
    prototypes: Tensor | np.ndarray,
    novel_weight: np.ndarray,
    tau: float,
) -> Tensor:
    """Similarity-weighted consistency of relational signatures.

    Sums ``w_i w_j s_ij ||r_i - r_j||^2`` over all ordered pairs (the
    diagonal vanishes). ``novel_weight`` entries are constants; gradients
    flow through features and prototypes.
    """
    w = np.asarray(novel_weight, dtype=np.float64)
    n = features.shape[0]
    if w.shape != (n,):
        raise ShapeError("one novel weight per feature row required")
    if n < 2:
        raise ContractError("discovery loss needs at least 2 samples")

    protos = prototypes if isinstance(prototypes, Tensor) else ad.constant(prototypes)
    unit = ad.l2_normalize_rows(features)
    sims = ad.exp(ad.mul(ad.matmul(unit, ad.transpose(unit)), 1.0 / tau))
    sig = ad.matmul(unit, ad.transpose(ad.l2_normalize_rows(protos)))

    sq = ad.tsum(ad.mul(sig, sig), axis=1, keepdims=True)  # (n, 1)
    cross = ad.matmul(sig, ad.transpose(sig))
    dists = ad.sub(ad.add(sq, ad.transpose(sq)), ad.mul(cross, 2.0))
    return ad.tsum(ad.mul(ad.mul(ad.constant(np.outer(w, w)), sims), dists))


# ---------------------------------------------------------------------------
# Total objective


def total_loss(
    rep_unsup: Tensor,
    rep_sup: Tensor | None,
    classifier: Tensor,
    align: Tensor | None,
    discover: Tensor | None,
    weights: LossWeights,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of all active terms plus a per-component value log.

    Terms with zero weight (or passed as None) are skipped outright, so the
    no-RPC configuration reduces bit-exactly to the baseline objective.
    """
    parts: dict[str, float] = {"rep_unsup": rep_unsup.item()}
    total = ad.mul(rep_unsup, 1.0 - weights.sup_weight)
    if rep_sup is not None:
        parts["rep_sup"] = rep_sup.item()
        total = ad.add(total, ad.mul(rep_sup, weights.sup_weight))
    parts["classifier"] = classifier.item()
    total = ad.add(total, classifier)
    if align is not None and weights.align_weight > 0:
        parts["align"] = align.item()
        total = ad.add(total, ad.mul(align, weights.align_weight))
    if discover is not None and weights.discover_weight > 0:
        parts["discover"] = discover.item()
        total = ad.add(total, ad.mul(discover, weights.discover_weight))
    for name, value in parts.items():
        if not np.isfinite(value):
            raise NonFiniteError(f"loss component {name!r} is non-finite")
    parts["total"] = total.item()
    return total, parts
