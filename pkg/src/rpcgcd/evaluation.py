"""Clustering evaluation: joint Hungarian matching and All/Old/New accuracy.

One optimal assignment between predicted clusters and hidden classes is
computed over the whole unlabeled pool; Old and New accuracies are the
matched fractions over the known-class and novel-class subsets under that
single mapping, so All is always their size-weighted mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import model as M
from .errors import ShapeError
from .worlds import TruthHandle


@dataclass
class ClusterAssignment:
    predicted: np.ndarray  # cluster id per sample
    truth: np.ndarray  # hidden class id per sample
    mapping: np.ndarray  # cluster id -> class id, a bijection


@dataclass
class GcdAccuracy:
    all_acc: float
    old_acc: float | None  # None when the subset is empty
    new_acc: float | None

    def as_tuple(self) -> tuple:
        return (self.all_acc, self.old_acc, self.new_acc)


def hungarian_match(confusion: np.ndarray) -> np.ndarray:
    """Cluster→class permutation maximizing the matched count."""
    confusion = np.asarray(confusion)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ShapeError(f"confusion matrix must be square, got {confusion.shape}")
    if np.any(confusion < 0):
        raise ShapeError("confusion counts must be nonnegative")
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    mapping = np.empty(confusion.shape[0], dtype=np.int64)
    mapping[rows] = cols
    return mapping


def confusion_counts(predicted: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (predicted, truth), 1)
    return counts


def assign_clusters(predicted: np.ndarray, truth: np.ndarray, num_classes: int) -> ClusterAssignment:
    predicted = np.asarray(predicted, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predicted.shape != truth.shape:
        raise ShapeError("predicted and truth must have equal length")
    mapping = hungarian_match(confusion_counts(predicted, truth, num_classes))
    return ClusterAssignment(predicted=predicted, truth=truth, mapping=mapping)


def gcd_accuracy(assignment: ClusterAssignment, known_mask: np.ndarray) -> GcdAccuracy:
    """All/Old/New matched fractions under one joint mapping."""
    known_mask = np.asarray(known_mask, dtype=bool)
    hits = assignment.mapping[assignment.predicted] == assignment.truth

    def subset(mask: np.ndarray) -> float | None:
        return float(hits[mask].mean()) if mask.any() else None

    return GcdAccuracy(
        all_acc=float(hits.mean()),
        old_acc=subset(known_mask),
        new_acc=subset(~known_mask),
    )


def predict_clusters(params: M.ModelParams, x: np.ndarray) -> np.ndarray:
    """Hard cluster ids: argmax prototype cosine per sample."""
    scores = M.score_batch(params, x, tau=1.0)
    return np.argmax(scores.soft_label, axis=1)


def evaluate_params(params: M.ModelParams, unlabeled_x: np.ndarray, truth: TruthHandle) -> GcdAccuracy:
    predicted = predict_clusters(params, unlabeled_x)
    assignment = assign_clusters(predicted, truth.labels, params.num_classes)
    return gcd_accuracy(assignment, truth.known_mask)


def nearest_center_accuracy(x: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy of classifying each sample by its nearest class mean.

    A quick separability oracle for generated worlds: high accuracy means
    the hidden classes are recoverable from raw geometry alone.
    """
    labels = np.asarray(labels, dtype=np.int64)
    centers = np.stack([x[labels == c].mean(axis=0) for c in np.unique(labels)])
    classes = np.unique(labels)
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(classes[np.argmin(d2, axis=1)] == labels))
