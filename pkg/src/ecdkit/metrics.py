"""Ranking and classification metrics for the hallucination detector.

auroc is the tie-corrected pairwise concordance (ties count 0.5), computed
via average ranks. auprc is the area under the precision-recall step curve
over distinct score thresholds, with the segment down to recall 0 carried
at the first threshold group's precision. Both match their brute-force
definitions exactly, not approximately.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, MetricUndefinedError


def _check_inputs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or labels.shape != scores.shape:
        raise DataError("scores and labels must be 1-D arrays of equal length")
    if scores.shape[0] == 0:
        raise MetricUndefinedError("no examples")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def auroc(scores, labels) -> float:
    scores, labels = _check_inputs(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("auroc undefined with a single class")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.shape[0])
    i = 0
    while i < sorted_scores.shape[0]:
        j = i
        while j < sorted_scores.shape[0] and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)  # average 1-based rank across the tie group
        i = j
    rank_sum_pos = float(ranks[labels == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pr_curve_points(scores, labels):
    """(recall, precision) pairs at each distinct threshold, descending scores."""
    scores, labels = _check_inputs(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricUndefinedError("precision-recall undefined without positives")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    z = labels[order]
    tp = np.cumsum(z)
    fp = np.cumsum(1 - z)
    # threshold group boundaries: last index of each distinct score
    last = np.nonzero(np.diff(s) != 0)[0]
    idx = np.concatenate([last, [s.shape[0] - 1]])
    recall = tp[idx] / n_pos
    precision = tp[idx] / (tp[idx] + fp[idx])
    return recall, precision, s[idx]


def auprc(scores, labels) -> float:
    scores, labels = _check_inputs(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.shape[0]:
        raise MetricUndefinedError("auprc undefined with a single class")
    recall, precision, _ = pr_curve_points(scores, labels)
    prev_r = 0.0
    area = 0.0
    for r, p in zip(recall, precision):
        area += (r - prev_r) * p
        prev_r = r
    return float(area)


def roc_curve_points(scores, labels):
    """(fpr, tpr) pairs at each distinct threshold, plus the (0, 0) origin."""
    scores, labels = _check_inputs(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("roc undefined with a single class")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    z = labels[order]
    tp = np.cumsum(z)
    fp = np.cumsum(1 - z)
    last = np.nonzero(np.diff(s) != 0)[0]
    idx = np.concatenate([last, [s.shape[0] - 1]])
    fpr = np.concatenate([[0.0], fp[idx] / n_neg])
    tpr = np.concatenate([[0.0], tp[idx] / n_pos])
    return fpr, tpr


def accuracy(scores, labels, tau: float = 0.5) -> float:
    scores, labels = _check_inputs(scores, labels)
    pred = (scores >= tau).astype(np.int64)
    return float(np.mean(pred == labels))


@dataclass
class SplitMetrics:
    acc: float
    auroc: float
    auprc: float

    def to_dict(self) -> dict:
        return {"acc": self.acc, "auroc": self.auroc, "auprc": self.auprc}


@dataclass
class DetectorReport:
    splits: list[SplitMetrics]
    mean: dict[str, float]
    std: dict[str, float]
    n_examples: int
    prevalence: float
    classifier: str

    def to_dict(self) -> dict:
        return {
            "classifier": self.classifier,
            "n_examples": self.n_examples,
            "prevalence": self.prevalence,
            "splits": [s.to_dict() for s in self.splits],
            "mean": self.mean,
            "std": self.std,
        }

    def table_rows(self) -> list[list[str]]:
        rows = []
        for i, s in enumerate(self.splits, start=1):
            rows.append([f"split {i}", f"{s.acc:.4f}", f"{s.auroc:.4f}", f"{s.auprc:.4f}"])
        rows.append([
            "mean (std)",
            f"{self.mean['acc']:.4f} ({self.std['acc']:.4f})",
            f"{self.mean['auroc']:.4f} ({self.std['auroc']:.4f})",
            f"{self.mean['auprc']:.4f} ({self.std['auprc']:.4f})",
        ])
        return rows


def stratified_splits(labels, k_splits: int, seed: int, val_fraction: float = 0.3):
    """k random stratified train/validation index splits."""
    labels = np.asarray(labels)
    if k_splits < 1:
        raise DataError(f"k_splits must be >= 1, got {k_splits}")
    if not 0.0 < val_fraction < 1.0:
        raise DataError(f"val_fraction must be in (0, 1), got {val_fraction}")
    pos = np.nonzero(labels == 1)[0]
    neg = np.nonzero(labels == 0)[0]
    n_val_pos = int(round(len(pos) * val_fraction))
    n_val_neg = int(round(len(neg) * val_fraction))
    if min(n_val_pos, n_val_neg) < 1 or len(pos) - n_val_pos < 1 or len(neg) - n_val_neg < 1:
        raise DataError(
            f"too few examples per class for splitting "
            f"({len(pos)} positive, {len(neg)} negative, val_fraction {val_fraction})"
        )
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(k_splits):
        p = rng.permutation(pos)
        n = rng.permutation(neg)
        val = np.concatenate([p[:n_val_pos], n[:n_val_neg]])
        train = np.concatenate([p[n_val_pos:], n[n_val_neg:]])
        out.append((np.sort(train), np.sort(val)))
    return out


def crossval_report(
    x: np.ndarray,
    labels: np.ndarray,
    train_fn,
    score_fn,
    k_splits: int = 10,
    seed: int = 0,
    val_fraction: float = 0.3,
    tau: float = 0.5,
    classifier: str = "",
) -> DetectorReport:
    """Train on each split's train part and evaluate on its validation part.

    train_fn(x_train, labels_train) -> model; score_fn(model, x) -> scores.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    splits = stratified_splits(labels, k_splits, seed, val_fraction)
    per_split = []
    for train_idx, val_idx in splits:
        model = train_fn(x[train_idx], labels[train_idx])
        scores = score_fn(model, x[val_idx])
        per_split.append(SplitMetrics(
            acc=accuracy(scores, labels[val_idx], tau=tau),
            auroc=auroc(scores, labels[val_idx]),
            auprc=auprc(scores, labels[val_idx]),
        ))
    mean = {}
    std = {}
    for key in ("acc", "auroc", "auprc"):
        vals = np.array([getattr(s, key) for s in per_split])
        mean[key] = float(vals.mean())
        std[key] = float(vals.std())
    return DetectorReport(
        splits=per_split,
        mean=mean,
        std=std,
        n_examples=int(labels.shape[0]),
        prevalence=float(np.mean(labels)),
        classifier=classifier,
    )
