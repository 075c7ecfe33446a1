"""ROC-AUC and multi-seed aggregation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError, ValidationError


@dataclass
class RunResult:
    seed: int
    variant: str
    hyperparams: dict
    best_valid_auc: float
    test_auc: float
    train_auc: float
    epochs_trained: int
    best_epoch: int
    n_train: int
    status: str = "ok"
    error: str = ""
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.status == "ok":
            for name in ("best_valid_auc", "test_auc", "train_auc"):
                v = getattr(self, name)
                if not 0.0 <= v <= 1.0:
                    raise ValidationError(f"{name}={v} is not a valid AUC")

    @property
    def gap(self):
        """Train AUC minus test AUC."""
        return self.train_auc - self.test_auc

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)


def roc_auc(scores, labels):
    """Mann-Whitney AUC with ties counted as half, via midranks in O(n log n)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValidationError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    n_pos = int(np.count_nonzero(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC needs both classes present")
    order = np.argsort(s, kind="stable")
    ss = s[order]
    # doubled midranks are integers: tie group [i, j) gets 2*rank = i + j + 1
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    ends = np.r_[starts[1:], ss.size]
    twice_rank = np.empty(ss.size, dtype=np.int64)
    twice_rank[order] = np.repeat(starts + ends + 1, ends - starts)
    twice_u = int(twice_rank[y == 1].sum()) - n_pos * (n_pos + 1)
    return (twice_u / 2) / (n_pos * n_neg)


def roc_auc_pairwise(scores, labels):
    """O(n^2) reference: fraction of (positive, negative) pairs ranked correctly."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    if not pos or not neg:
        raise DomainError("AUC needs both classes present")
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def mean_sd(values):
    """Arithmetic mean and sample standard deviation (n - 1)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise DomainError("need at least two values for a sample standard deviation")
    m = math.fsum(v) / v.size
    return m, math.sqrt(math.fsum((v - m) ** 2) / (v.size - 1))


def summarize_runs(results, metrics=("test_auc", "best_valid_auc", "train_auc", "gap")):
    """Mean and sample SD of each metric over successful runs."""
    ok = [r for r in results if r.status == "ok"]
    if len(ok) < 2:
        raise DomainError(f"need at least two successful runs, got {len(ok)}")
    out = {}
    for name in metrics:
        m, sd = mean_sd([getattr(r, name) for r in ok])
        out[name] = {"mean": m, "sd": sd}
    out["n"] = len(ok)
    return out


def best_by_valid(results):
    """Successful run with the highest validation AUC (earliest seed on ties)."""
    ok = [r for r in results if r.status == "ok"]
    if not ok:
        raise DomainError("no successful runs")
    return max(ok, key=lambda r: (r.best_valid_auc, -r.seed))
