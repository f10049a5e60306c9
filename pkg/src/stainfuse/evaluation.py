"""Cohort evaluation: ROC curves, AUROC with bootstrap CIs, Youden thresholds.

AUROC follows the Mann-Whitney convention (ties credited 0.5), computed via
average ranks in O(n log n) but contractually equal to brute-force pair
counting.  Bootstrap CIs resample slides with replacement using counter-based
seed streams, so the result is independent of worker count and chunking;
replicates that draw a single class are dropped and counted.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .aggregate import BootstrapConfig, _chunk_bounds
from .rng import counter_randint

POSITIVE_LABEL = "melanoma"
NEGATIVE_LABEL = "nevus"
_CLAMP = 1e-6


@dataclass(frozen=True)
class CohortEntry:
    slide_id: str
    score: float
    label: str

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1] for slide {self.slide_id}")
        if self.label not in (POSITIVE_LABEL, NEGATIVE_LABEL):
            raise ValueError(f"label must be {POSITIVE_LABEL!r} or {NEGATIVE_LABEL!r}, got {self.label!r}")


@dataclass
class CohortPredictions:
    cohort_id: str
    entries: list

    def __post_init__(self):
        ids = [e.slide_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate slide_ids in cohort {self.cohort_id}")

    @property
    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries], dtype=np.float64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([1 if e.label == POSITIVE_LABEL else 0 for e in self.entries], dtype=np.int64)

    def canonical_arrays(self) -> tuple:
        """(scores, labels) sorted by slide_id, so resampling ignores entry order."""
        order = sorted(range(len(self.entries)), key=lambda i: self.entries[i].slide_id)
        return self.scores[order], self.labels[order]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class RocResult:
    auroc: float
    curve: list  # (fpr, tpr) points
    ci_low: float
    ci_high: float
    n_boot: int
    seed: int
    n_dropped_replicates: int
    n: int


@dataclass(frozen=True)
class DecisionThreshold:
    value: float
    method: str
    source_cohort: str


def _check_two_classes(labels: np.ndarray) -> tuple:
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: cohort has a single class")
    return n_pos, n_neg


def auroc(cohort: CohortPredictions) -> float:
    """Mann-Whitney AUROC: P(random positive outranks random negative), ties 0.5."""
    scores, labels = cohort.scores, cohort.labels
    n_pos, n_neg = _check_two_classes(labels)
    ranks = rankdata(scores, method="average")
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_curve(cohort: CohortPredictions) -> list:
    """ROC points swept over distinct score thresholds, ties grouped.

    Starts at (0, 0), ends at (1, 1); trapezoidal area equals ``auroc``.
    """
    scores, labels = cohort.scores, cohort.labels
    n_pos, n_neg = _check_two_classes(labels)
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(s_sorted)
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            j += 1
        tp += int(l_sorted[i:j].sum())
        fp += (j - i) - int(l_sorted[i:j].sum())
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return points


def _bootstrap_aurocs(scores: np.ndarray, labels: np.ndarray, seed: int, lo: int, hi: int) -> tuple:
    n = scores.size
    idx = counter_randint(seed, np.arange(lo, hi), np.arange(n), n)
    s = scores[idx]
    l = labels[idx].astype(np.float64)
    n_pos = l.sum(axis=1)
    n_neg = n - n_pos
    valid = (n_pos > 0) & (n_neg > 0)
    ranks = rankdata(s, method="average", axis=1)
    pos_rank_sum = (ranks * l).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        aucs = (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return aucs[valid], int((~valid).sum())


def auroc_ci(cohort: CohortPredictions, config: BootstrapConfig, workers: int = 1) -> tuple:
    """Percentile bootstrap CI of the AUROC, resampling slides.

    Returns (low, high, n_dropped).  Single-class replicates are dropped; more
    than 50% dropped is an error.  Deterministic given the seed and identical
    for any worker count.
    """
    scores, labels = cohort.canonical_arrays()
    _check_two_classes(labels)
    bounds = _chunk_bounds(config.n_boot, workers)
    if len(bounds) == 1:
        parts = [_bootstrap_aurocs(scores, labels, config.seed, 0, config.n_boot)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_bootstrap_aurocs, scores, labels, config.seed, lo, hi) for lo, hi in bounds]
            parts = [f.result() for f in futures]
    aucs = np.concatenate([p[0] for p in parts])
    n_dropped = sum(p[1] for p in parts)
    if 2 * n_dropped > config.n_boot:
        raise ValueError("cohort too small or imbalanced for bootstrap: >50% single-class replicates")
    low, high = np.quantile(aucs, [config.alpha / 2.0, 1.0 - config.alpha / 2.0], method="linear")
    return float(low), float(high), n_dropped


def evaluate_cohort(cohort: CohortPredictions, config: BootstrapConfig, workers: int = 1) -> RocResult:
    """AUROC + ROC curve + bootstrap CI in one result."""
    low, high, n_dropped = auroc_ci(cohort, config, workers=workers)
    return RocResult(
        auroc=auroc(cohort),
        curve=roc_curve(cohort),
        ci_low=low,
        ci_high=high,
        n_boot=config.n_boot,
        seed=config.seed,
        n_dropped_replicates=n_dropped,
        n=len(cohort),
    )


def select_threshold(cohort: CohortPredictions) -> DecisionThreshold:
    """Youden-optimal threshold: maximize J = TPR - FPR, predict positive at score >= t.

    Candidates sit midway between consecutive distinct scores, plus sentinels
    below the minimum and above the maximum clamped into (0, 1).  Ties in J
    resolve to the smallest threshold.
    """
    scores, labels = cohort.scores, cohort.labels
    n_pos, n_neg = _check_two_classes(labels)
    distinct = np.unique(scores)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    lo_sentinel = min(max(distinct[0] / 2.0, _CLAMP), 1.0 - _CLAMP)
    hi_sentinel = min(max((distinct[-1] + 1.0) / 2.0, _CLAMP), 1.0 - _CLAMP)
    candidates = np.unique(np.concatenate([[lo_sentinel], mids, [hi_sentinel]]))
    pred = scores[None, :] >= candidates[:, None]
    tpr = (pred & (labels == 1)[None, :]).sum(axis=1) / n_pos
    fpr = (pred & (labels == 0)[None, :]).sum(axis=1) / n_neg
    j = tpr - fpr
    best = int(np.argmax(j))  # argmax returns the first (= smallest) maximizer
    return DecisionThreshold(value=float(candidates[best]), method="youden", source_cohort=cohort.cohort_id)


def significance_vs_random(result: RocResult) -> bool:
    """True iff the CI excludes 0.5, the random-guessing critical value (bounds inclusive)."""
    return not (result.ci_low <= 0.5 <= result.ci_high)


# ---------------------------------------------------------------------------
# Reporting


def format_cell(auroc_value: float, ci_low: float, ci_high: float) -> str:
    return f"{auroc_value:.2f} [{ci_low:.2f};{ci_high:.2f}]"


MISSING_CELL = "—"  # em dash marks a model/cohort pair without results


@dataclass
class ReportTable:
    """AUROC + CI per model row and cohort column."""

    model_rows: list  # (model_id, display label)
    cohort_ids: list
    results: dict  # (model_id, cohort_id) -> RocResult

    def cell(self, model_id: str, cohort_id: str) -> str:
        res = self.results.get((model_id, cohort_id))
        if res is None:
            return MISSING_CELL
        return format_cell(res.auroc, res.ci_low, res.ci_high)

    def to_text(self) -> str:
        label_width = max(len(label) for _, label in self.model_rows) + 2
        col_width = 18
        lines = ["Model".ljust(label_width) + "".join(c.ljust(col_width) for c in self.cohort_ids)]
        lines.append("-" * (label_width + col_width * len(self.cohort_ids)))
        for model_id, label in self.model_rows:
            cells = [self.cell(model_id, c) for c in self.cohort_ids]
            lines.append(label.ljust(label_width) + "".join(c.ljust(col_width) for c in cells))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["model_id", "cohort_id", "auroc", "ci_low", "ci_high", "n", "n_boot", "seed", "significant"])
            for model_id, _ in self.model_rows:
                for cohort_id in self.cohort_ids:
                    res = self.results.get((model_id, cohort_id))
                    if res is None:
                        continue
                    writer.writerow(
                        [
                            model_id,
                            cohort_id,
                            repr(res.auroc),
                            repr(res.ci_low),
                            repr(res.ci_high),
                            res.n,
                            res.n_boot,
                            res.seed,
                            str(significance_vs_random(res)).lower(),
                        ]
                    )

    def write_roc_points(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["model_id", "cohort_id", "fpr", "tpr"])
            for model_id, _ in self.model_rows:
                for cohort_id in self.cohort_ids:
                    res = self.results.get((model_id, cohort_id))
                    if res is None:
                        continue
                    for fpr, tpr in res.curve:
                        writer.writerow([model_id, cohort_id, repr(fpr), repr(tpr)])


# ---------------------------------------------------------------------------
# File interface

COHORT_CSV_HEADER = ["slide_id", "score", "label"]


def read_cohort_csv(path, cohort_id: str) -> CohortPredictions:
    """Cohort predictions CSV: slide_id,score,label with label in {melanoma, nevus}."""
    entries = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != COHORT_CSV_HEADER:
            raise ValueError(f"bad cohort header: {header}")
        for row in reader:
            if not row:
                continue
            slide_id, score, label = row
            entries.append(CohortEntry(slide_id=slide_id, score=float(score), label=label))
    return CohortPredictions(cohort_id=cohort_id, entries=entries)


def write_cohort_csv(path, cohort: CohortPredictions) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(COHORT_CSV_HEADER)
        for e in cohort.entries:
            writer.writerow([e.slide_id, repr(e.score), e.label])
