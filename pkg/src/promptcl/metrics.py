"""Classification and continual-learning metrics.

The continual-learning metrics read an accuracy matrix ``A`` where row i
holds the accuracy on every task right after training stage i finished
(0-indexed; ``A[i][j]`` is the accuracy on task j). Rows at or below the
diagonal describe tasks the model has been trained on; columns beyond the
diagonal, if present, are ignored by the summaries that only consider seen
tasks.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, InputError


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise InputError(f"preds/labels must be equal-length 1-D, got {preds.shape} {labels.shape}")
    if preds.size == 0:
        raise ContractError("cannot score an empty batch")
    return float(np.mean(preds == labels))


def macro_f1(preds, labels, num_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1 scores.

    A class with no predictions and no true samples contributes an F1 of 0,
    so a degenerate constant predictor is penalized rather than excused.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise InputError(f"preds/labels must be equal-length 1-D, got {preds.shape} {labels.shape}")
    if preds.size == 0:
        raise ContractError("cannot score an empty batch")
    if num_classes is None:
        num_classes = int(max(preds.max(), labels.max())) + 1
    if num_classes < 1 or preds.min() < 0 or labels.min() < 0 \
            or max(preds.max(), labels.max()) >= num_classes:
        raise InputError("class ids must lie in [0, num_classes)")
    scores = []
    for c in range(num_classes):
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def _check_matrix(matrix, min_stages: int = 1) -> np.ndarray:
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError(f"accuracy matrix must be square, got shape {a.shape}")
    if a.shape[0] < min_stages:
        raise ContractError(f"metric needs at least {min_stages} stages, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise InputError("accuracy matrix contains non-finite entries")
    return a


def avg_acc(matrix, form: str = "seen") -> float:
    """Average accuracy across stages.

    ``seen`` (default) averages, for each stage i, the mean accuracy over
    the i+1 tasks seen so far, then averages those per-stage means.
    ``diagonal`` averages only the just-trained-task entries ``A[i][i]``.
    """
    a = _check_matrix(matrix)
    if form == "seen":
        t = a.shape[0]
        per_stage = [a[i, : i + 1].mean() for i in range(t)]
        return float(np.mean(per_stage))
    if form == "diagonal":
        return float(np.mean(np.diag(a)))
    raise InputError(f"avg_acc form must be 'seen' or 'diagonal', got {form!r}")


def faa(matrix) -> float:
    """Final average accuracy: the mean of the last row."""
    a = _check_matrix(matrix)
    return float(a[-1].mean())


def bwt(matrix) -> float:
    """Backward transfer: mean final-minus-just-trained accuracy gap.

    Averages ``A[T-1][i] - A[i][i]`` over the earlier tasks i < T-1;
    negative values mean the model lost ground on old tasks.
    """
    a = _check_matrix(matrix, min_stages=2)
    t = a.shape[0]
    gaps = [a[t - 1, i] - a[i, i] for i in range(t - 1)]
    return float(np.mean(gaps))


def avg_f(matrix) -> float:
    """Average forgetting: mean drop from each task's best pre-final accuracy.

    For each earlier task i, takes the best accuracy any stage before the
    last achieved on it, minus the final accuracy on it.
    """
    a = _check_matrix(matrix, min_stages=2)
    t = a.shape[0]
    drops = [a[: t - 1, i].max() - a[t - 1, i] for i in range(t - 1)]
    return float(np.mean(drops))


def summarize(matrix, avg_acc_form: str = "seen") -> dict:
    """All four continual-learning summaries keyed for the metrics report."""
    return {
        "avg_acc": avg_acc(matrix, form=avg_acc_form),
        "faa": faa(matrix),
        "bwt": bwt(matrix),
        "avg_f": avg_f(matrix),
    }


def save_matrix_csv(path, matrix, row_prefix: str = "stage", col_prefix: str = "task") -> None:
    """Write a matrix as CSV with labeled rows/columns and round-trip floats."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise InputError(f"matrix must be 2-D, got shape {a.shape}")
    lines = ["," + ",".join(f"{col_prefix}_{j}" for j in range(a.shape[1]))]
    for i, row in enumerate(a):
        lines.append(f"{row_prefix}_{i}," + ",".join(repr(float(x)) for x in row))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_matrix_csv(path) -> np.ndarray:
    """Read a matrix written by ``save_matrix_csv`` (labels are discarded)."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if len(lines) < 2:
        raise InputError(f"{path}: no matrix rows")
    rows = []
    width = len(lines[0].split(",")) - 1
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != width + 1:
            raise InputError(f"{path}: ragged row {ln!r}")
        rows.append([float(c) for c in cells[1:]])
    return np.asarray(rows, dtype=np.float64)
