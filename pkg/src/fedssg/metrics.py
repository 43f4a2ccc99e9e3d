"""Per-domain confusion matrices, accuracy, macro-F1 and report rows."""
from __future__ import annotations

import csv
import io
from typing import Mapping, Sequence

import numpy as np

from .core import Dataset
from .nn import ParamVector, predict


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def evaluate(params: ParamVector, test_set: Dataset, n_domains: int | None = None) -> dict[int, np.ndarray]:
    """Eval-mode argmax predictions, accumulated per domain tag (rows = truth)."""
    n_domains = test_set.n_domains if n_domains is None else n_domains
    pred = predict(params, test_set.features) if len(test_set) else np.zeros(0, np.int64)
    out = {}
    for j in range(n_domains):
        sel = test_set.domains == j
        out[j] = confusion_matrix(test_set.labels[sel], pred[sel], test_set.n_classes)
    return out


def accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 0.0


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(pred > 0, tp / pred, 0.0)
        r = np.where(true > 0, tp / true, 0.0)
        f1 = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return f1


def macro_f1(cm: np.ndarray) -> float:
    return float(per_class_f1(cm).mean())


def per_domain_report(cms: Mapping[int, np.ndarray], domain_names: Sequence[str]) -> dict[str, float]:
    """``acc_<name>``, ``f1_<name>`` per domain plus unweighted ``acc_Avg`` / ``f1_Avg``."""
    row = {}
    accs, f1s = [], []
    for j, name in enumerate(domain_names):
        a, f = accuracy(cms[j]), macro_f1(cms[j])
        row[f"acc_{name}"] = a
        accs.append(a)
        f1s.append(f)
    for j, name in enumerate(domain_names):
        row[f"f1_{name}"] = f1s[j]
    row["acc_Avg"] = float(np.mean(accs))
    row["f1_Avg"] = float(np.mean(f1s))
    return row


def metric_columns(domain_names: Sequence[str]) -> list[str]:
    return ([f"acc_{n}" for n in domain_names] + ["acc_Avg"]
            + [f"f1_{n}" for n in domain_names] + ["f1_Avg"])


def format_value(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def rows_to_csv(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_value(r[c]) for c in columns])
    return buf.getvalue()
