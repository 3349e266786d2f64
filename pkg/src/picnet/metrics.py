import numpy as np

from .errors import DataError


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class (0-based labels)."""
    t = np.asarray(y_true, dtype=np.int64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise DataError(f"{t.size} true labels vs {p.size} predictions")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes})")
    return np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def overall_accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise DataError("empty confusion matrix")
    return float(np.trace(cm) / total)


def per_class_accuracy(cm: np.ndarray) -> np.ndarray:
    """Recall per class; NaN for classes absent from the reference."""
    rows = cm.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(cm) / np.where(rows > 0, rows, 1.0), np.nan)


def average_accuracy(cm: np.ndarray) -> float:
    acc = per_class_accuracy(cm)
    present = ~np.isnan(acc)
    if not present.any():
        raise DataError("empty confusion matrix")
    return float(acc[present].mean())


def kappa(cm: np.ndarray) -> float:
    total = float(cm.sum())
    if total == 0:
        raise DataError("empty confusion matrix")
    p_o = np.trace(cm) / total
    p_e = float((cm.sum(axis=1).astype(np.float64) * cm.sum(axis=0)).sum()) / (total * total)
    if p_e == 1.0:
        # only one class occurs in both reference and prediction
        return 1.0
    return float((p_o - p_e) / (1.0 - p_e))
