"""Fusing per-slide predictions from several models into one score.

Every model's score is first mapped through a piecewise-linear calibration
that places its own decision threshold at 0.5.  Calibrated scores are then
averaged with one of three weighting schemes; the fused score is thresholded
at 0.5 by construction.

The hierarchical rule mirrors the clinical workflow: trust the H&E model
alone when its slide-score CI excludes the decision threshold, and pull in
the MelanA models only for uncertain slides.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

from .aggregate import SlidePrediction

THRESHOLD_EPS = 1e-6
WEIGHT_EPS = 1e-12


class FusionMode(Enum):
    UNWEIGHTED = "unweighted"
    VALIDATION_WEIGHTED = "validation_weighted"
    THRESHOLD_DISTANCE = "threshold_distance"

    @classmethod
    def parse(cls, text: str) -> "FusionMode":
        for mode in cls:
            if text == mode.value:
                return mode
        raise ValueError(f"unknown fusion mode: {text!r}")


@dataclass(frozen=True)
class ModelProfile:
    """Per-model fusion inputs: decision threshold and validation AUROC."""

    model_id: str
    threshold: float
    validation_auroc: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "threshold", min(max(self.threshold, THRESHOLD_EPS), 1.0 - THRESHOLD_EPS))
        if not 0.0 <= self.validation_auroc <= 1.0:
            raise ValueError("validation_auroc must be in [0, 1]")


@dataclass
class FusionConfig:
    mode: FusionMode
    models: list

    def __post_init__(self):
        ids = [m.model_id for m in self.models]
        if len(set(ids)) != len(ids):
            raise ValueError("model_ids in a fusion config must be distinct")
        self._by_id = {m.model_id: m for m in self.models}

    def profile(self, model_id: str) -> ModelProfile:
        try:
            return self._by_id[model_id]
        except KeyError:
            raise ValueError(f"model {model_id!r} not in fusion config") from None


@dataclass
class FusedPrediction:
    slide_id: str
    score: float
    mode: FusionMode
    model_ids: list
    weights: list


def calibrate_score(score: float, threshold: float) -> float:
    """Monotone bijection of [0, 1] sending the model's threshold to 0.5.

    [0, t] maps linearly onto [0, 0.5] and [t, 1] onto [0.5, 1], so the
    calibrated decision rule "score >= 0.5" agrees with the raw "score >= t".
    """
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score {score} outside [0, 1]")
    t = min(max(threshold, THRESHOLD_EPS), 1.0 - THRESHOLD_EPS)
    if score <= t:
        return 0.5 * score / t
    return 0.5 + 0.5 * (score - t) / (1.0 - t)


def fuse(predictions, config: FusionConfig) -> FusedPrediction:
    """Weighted average of calibrated per-model scores for one slide.

    Unweighted: equal weights.  ValidationWeighted: weights proportional to
    max(validation_auroc - 0.5, 0).  ThresholdDistanceWeighted: weights
    proportional to the calibrated score's distance from 0.5.  If every raw
    weight vanishes the unweighted mean is used instead.
    """
    preds = list(predictions)
    if not preds:
        raise ValueError("fuse needs at least one prediction")
    slide_ids = {p.slide_id for p in preds}
    if len(slide_ids) != 1:
        raise ValueError(f"fuse mixes slides: {sorted(slide_ids)}")
    # deterministic regardless of caller ordering
    preds.sort(key=lambda p: p.model_id)
    profiles = [config.profile(p.model_id) for p in preds]
    calibrated = [calibrate_score(p.score, prof.threshold) for p, prof in zip(preds, profiles)]

    if config.mode is FusionMode.UNWEIGHTED:
        raw = [1.0] * len(preds)
    elif config.mode is FusionMode.VALIDATION_WEIGHTED:
        raw = [max(prof.validation_auroc - 0.5, 0.0) for prof in profiles]
    else:
        raw = [abs(c - 0.5) for c in calibrated]
    total = sum(raw)
    if total <= WEIGHT_EPS:
        raw = [1.0] * len(preds)
        total = float(len(preds))
    weights = [r / total for r in raw]
    fused = sum(w * c for w, c in zip(weights, calibrated))
    return FusedPrediction(
        slide_id=preds[0].slide_id,
        score=min(max(fused, 0.0), 1.0),
        mode=config.mode,
        model_ids=[p.model_id for p in preds],
        weights=weights,
    )


def hierarchical_predict(
    he: SlidePrediction,
    he_threshold: float,
    melana_predictions,
    config: FusionConfig,
) -> FusedPrediction:
    """H&E-first gate: fuse in MelanA only when the H&E prediction is uncertain.

    Uncertain means the decision threshold lies inside the H&E slide-score CI
    (bounds inclusive).  Certain slides return the calibrated H&E score alone.
    """
    if not he.has_ci:
        raise ValueError(f"hierarchical gate needs an H&E CI for slide {he.slide_id}")
    if he.ci_low <= he_threshold <= he.ci_high:
        return fuse([he, *melana_predictions], config)
    return FusedPrediction(
        slide_id=he.slide_id,
        score=calibrate_score(he.score, he_threshold),
        mode=config.mode,
        model_ids=[he.model_id],
        weights=[1.0],
    )


def fused_model_id(mode: FusionMode) -> str:
    return f"fused:{mode.value}"


# ---------------------------------------------------------------------------
# File interface


def load_fusion_config(path) -> FusionConfig:
    """Fusion config JSON: {"mode": ..., "models": [{model_id, threshold, validation_auroc}]}."""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    models = [
        ModelProfile(
            model_id=m["model_id"],
            threshold=float(m["threshold"]),
            validation_auroc=float(m.get("validation_auroc", 0.5)),
        )
        for m in data["models"]
    ]
    return FusionConfig(mode=FusionMode.parse(data["mode"]), models=models)


def save_fusion_config(config: FusionConfig, path) -> None:
    payload = {
        "mode": config.mode.value,
        "models": [
            {"model_id": m.model_id, "threshold": m.threshold, "validation_auroc": m.validation_auroc}
            for m in config.models
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
