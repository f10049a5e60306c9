"""Slide-level aggregation: mean tile score plus a percentile-bootstrap CI.

The bootstrap resamples tiles with replacement; replicate ``i`` draws its
indices from the counter stream ``(seed, i, .)``, so splitting replicates
across any number of workers cannot change the result.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .rng import counter_randint

DEFAULT_N_BOOT = 10_000


@dataclass(frozen=True)
class BootstrapConfig:
    n_boot: int = DEFAULT_N_BOOT
    alpha: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_boot < 1:
            raise ValueError("n_boot must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")


@dataclass
class SlidePrediction:
    """Per-slide, per-model score with optional bootstrap CI and ground truth."""

    slide_id: str
    stain: str
    model_id: str
    score: float
    n_tiles: int
    ci_low: float | None = None
    ci_high: float | None = None
    label: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"slide score {self.score} outside [0, 1]")
        if (self.ci_low is None) != (self.ci_high is None):
            raise ValueError("ci_low and ci_high must be set together")
        if self.ci_low is not None:
            if not (0.0 <= self.ci_low <= self.ci_high <= 1.0):
                raise ValueError(f"bad CI [{self.ci_low}, {self.ci_high}]")

    @property
    def has_ci(self) -> bool:
        return self.ci_low is not None


def aggregate_slide(
    tile_scores,
    slide_id: str,
    stain: str,
    model_id: str,
    label: str | None = None,
) -> SlidePrediction:
    """Slide score = arithmetic mean of the slide's tile scores."""
    scores = np.asarray(list(tile_scores), dtype=np.float64)
    if scores.size == 0:
        raise ValueError(f"slide has no tiles: {slide_id}")
    lo, hi = float(scores.min()), float(scores.max())
    # exact for constant inputs; otherwise clamp out float accumulation noise
    mean = lo if lo == hi else min(max(float(scores.mean()), lo), hi)
    return SlidePrediction(
        slide_id=slide_id,
        stain=stain,
        model_id=model_id,
        score=mean,
        n_tiles=int(scores.size),
        label=label,
    )


def _replicate_means(scores: np.ndarray, seed: int, lo: int, hi: int) -> np.ndarray:
    idx = counter_randint(seed, np.arange(lo, hi), np.arange(scores.size), scores.size)
    return scores[idx].mean(axis=1)


def slide_score_ci(tile_scores, config: BootstrapConfig, workers: int = 1) -> tuple:
    """Percentile bootstrap CI of the slide mean over its tiles.

    Returns (low, high): the (alpha/2, 1 - alpha/2) linear-interpolation
    quantiles of ``n_boot`` resampled means.  Deterministic given the seed and
    identical for any ``workers`` count.
    """
    scores = np.asarray(list(tile_scores), dtype=np.float64)
    if scores.size == 0:
        raise ValueError("slide has no tiles")
    if scores.min() == scores.max():
        return float(scores[0]), float(scores[0])  # zero variance: degenerate CI
    means = np.empty(config.n_boot)
    bounds = _chunk_bounds(config.n_boot, workers)
    if len(bounds) == 1:
        means[:] = _replicate_means(scores, config.seed, 0, config.n_boot)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_replicate_means, scores, config.seed, lo, hi): (lo, hi) for lo, hi in bounds}
            for fut, (lo, hi) in futures.items():
                means[lo:hi] = fut.result()
    low, high = np.quantile(means, [config.alpha / 2.0, 1.0 - config.alpha / 2.0], method="linear")
    return float(low), float(high)


def _chunk_bounds(n: int, workers: int) -> list:
    workers = max(1, int(workers))
    if workers == 1 or n < 2 * workers:
        return [(0, n)]
    step = (n + workers - 1) // workers
    return [(lo, min(lo + step, n)) for lo in range(0, n, step)]


# ---------------------------------------------------------------------------
# File interface

PREDICTION_HEADER = ["slide_id", "stain", "model_id", "score", "n_tiles", "ci_low", "ci_high", "label"]


def write_predictions(path, predictions) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(PREDICTION_HEADER)
        for p in predictions:
            writer.writerow(
                [
                    p.slide_id,
                    p.stain,
                    p.model_id,
                    repr(p.score),
                    p.n_tiles,
                    "" if p.ci_low is None else repr(p.ci_low),
                    "" if p.ci_high is None else repr(p.ci_high),
                    p.label or "",
                ]
            )


def read_predictions(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != PREDICTION_HEADER:
            raise ValueError(f"bad slide-prediction header: {header}")
        for row in reader:
            if not row:
                continue
            slide_id, stain, model_id, score, n_tiles, ci_low, ci_high, label = row
            out.append(
                SlidePrediction(
                    slide_id=slide_id,
                    stain=stain,
                    model_id=model_id,
                    score=float(score),
                    n_tiles=int(n_tiles),
                    ci_low=float(ci_low) if ci_low else None,
                    ci_high=float(ci_high) if ci_high else None,
                    label=label or None,
                )
            )
    return out
