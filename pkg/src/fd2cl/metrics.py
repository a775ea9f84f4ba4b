"""Accuracy, AUC and the continual-learning summaries AA / AF."""
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DataError, StateError


def _pair(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.size != y.size:
        raise DataError(f"{s.size} scores vs {y.size} labels")
    if s.size == 0:
        raise DataError("empty input")
    return s, y


def accuracy(scores, labels, threshold):
    """Fraction of samples with ``(score >= threshold) == label``."""
    s, y = _pair(scores, labels)
    return float(np.mean((s >= threshold).astype(np.int64) == y))


def select_threshold(scores, labels):
    """Threshold maximising accuracy on ``scores``; ties go to the lowest one.

    Candidates are the midpoints between consecutive distinct scores plus one
    point below the minimum and one above the maximum, which covers every
    distinct labelling a threshold can produce.
    """
    s, y = _pair(scores, labels)
    u = np.unique(s)
    cands = np.concatenate([[u[0] - 1.0], 0.5 * (u[:-1] + u[1:]), [u[-1] + 1.0]])
    # positives at or above each candidate, via sorted search
    order = np.sort(s[y == 1])
    neg = np.sort(s[y == 0])
    tp = order.size - np.searchsorted(order, cands, side="left")
    tn = np.searchsorted(neg, cands, side="left")
    acc = (tp + tn) / s.size
    return float(cands[int(np.argmax(acc))])


def auc(scores, labels):
    """Mann-Whitney AUC from average ranks; ties get half credit."""
    s, y = _pair(scores, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both classes")
    ranks = kernels.average_ranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class TaskMatrix:
    """Lower-triangular ``a[t][i]``: accuracy on task i after training task t (0-based)."""

    task_names: list
    rows: list = field(default_factory=list)

    @property
    def n_tasks(self):
        return len(self.task_names)

    def add_row(self, accs):
        t = len(self.rows)
        if len(accs) != t + 1:
            raise StateError(f"row {t} needs {t + 1} entries, got {len(accs)}")
        for a in accs:
            if not 0.0 <= a <= 1.0:
                raise StateError(f"accuracy {a} outside [0, 1]")
        self.rows.append([float(a) for a in accs])

    def get(self, t, i):
        if i > t:
            raise StateError(f"a[{t}][{i}] is above the diagonal")
        return self.rows[t][i]

    def complete(self):
        return len(self.rows) == self.n_tasks

    def as_array(self):
        out = np.full((len(self.rows), self.n_tasks), np.nan)
        for t, row in enumerate(self.rows):
            out[t, :len(row)] = row
        return out

    def to_json(self):
        return json.dumps({"task_names": self.task_names, "rows": self.rows}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        return cls(list(obj["task_names"]), [list(r) for r in obj["rows"]])


def average_accuracy(m):
    """Mean of the final row."""
    if not m.complete():
        raise StateError(f"final row missing: {len(m.rows)} of {m.n_tasks} rows present")
    last = m.rows[-1]
    return float(sum(last) / len(last))


def average_forgetting(m):
    """Mean drop from just-learned accuracy to final accuracy over tasks 1..T-1."""
    if m.n_tasks < 2:
        raise StateError("average forgetting is undefined for fewer than 2 tasks")
    if not m.complete():
        raise StateError("task matrix incomplete")
    t_last = m.n_tasks - 1
    drops = [m.rows[i][i] - m.rows[t_last][i] for i in range(t_last)]
    return float(sum(drops) / len(drops))
