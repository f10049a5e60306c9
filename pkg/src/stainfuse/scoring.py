"""Tile scoring: color features, jitter augmentation, and the baseline scorer.

The baseline scorer is a logistic regression over handcrafted color features
(HSV histograms + RGB moments) trained at the tile level with the slide's
label.  Externally computed tile scores can be imported through the CSV
interface instead, in which case training is bypassed entirely.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import cv2
import numpy as np

from .color import hsv_to_rgb01, rgb_to_hsv01
from .rng import derive_seed, substream
from .tess import TILE_EDGE_PX, Magnification, Stain, TileRef

logger = logging.getLogger(__name__)

N_HIST_BINS = 8
FEATURE_DIM = 3 * N_HIST_BINS + 6  # HSV histograms + RGB mean/std


def extract_features(tile_image: np.ndarray) -> np.ndarray:
    """30-dim color descriptor of one 237x237 RGB tile.

    Layout: 8-bin H, S, V histograms (each normalized to sum 1), then per
    channel RGB means and population stds on the 0..255 scale.
    """
    px = np.asarray(tile_image)
    if px.shape != (TILE_EDGE_PX, TILE_EDGE_PX, 3):
        raise ValueError(f"expected a {TILE_EDGE_PX}x{TILE_EDGE_PX}x3 tile, got {px.shape}")
    hsv = rgb_to_hsv01(px.astype(np.float32) / 255.0)
    n = px.shape[0] * px.shape[1]
    bins = np.minimum((hsv * N_HIST_BINS).astype(np.int64), N_HIST_BINS - 1)
    hists = [np.bincount(bins[:, :, c].ravel(), minlength=N_HIST_BINS).astype(np.float64) / n for c in range(3)]
    mean, std = cv2.meanStdDev(np.ascontiguousarray(px))
    return np.concatenate(hists + [mean.ravel(), std.ravel()])


@dataclass(frozen=True)
class JitterParams:
    """Maximum perturbation magnitudes; hue as a fraction of the full circle."""

    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation", "hue"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.hue > 0.5:
            raise ValueError("hue must be <= 0.5")

    @property
    def is_identity(self) -> bool:
        return self.brightness == self.contrast == self.saturation == self.hue == 0.0


def apply_color_jitter(
    img: np.ndarray,
    brightness_factor: float,
    contrast_factor: float,
    saturation_factor: float,
    hue_shift: float,
) -> np.ndarray:
    """Apply fixed jitter factors in the order brightness, contrast, saturation, hue."""
    out = np.asarray(img).astype(np.float64)
    if brightness_factor != 1.0:
        out = np.clip(out * brightness_factor, 0.0, 255.0)
    if contrast_factor != 1.0:
        mean_gray = float((out @ np.array([0.299, 0.587, 0.114])).mean())
        out = np.clip(mean_gray + (out - mean_gray) * contrast_factor, 0.0, 255.0)
    if saturation_factor != 1.0:
        gray = out @ np.array([0.299, 0.587, 0.114])
        out = np.clip(gray[..., None] + (out - gray[..., None]) * saturation_factor, 0.0, 255.0)
    if hue_shift != 0.0:
        hsv = rgb_to_hsv01(out / 255.0)
        hsv[..., 0] += hue_shift
        out = np.clip(hsv_to_rgb01(hsv).astype(np.float64) * 255.0, 0.0, 255.0)
    return np.floor(out + 0.5).astype(np.uint8)


def color_jitter(tile_image: np.ndarray, params: JitterParams, seed: int) -> np.ndarray:
    """Randomized jitter: factors ~ U[1-m, 1+m], hue shift ~ U[-h, +h], seeded."""
    rng = substream(seed, "jitter")
    b = rng.uniform(1.0 - params.brightness, 1.0 + params.brightness)
    c = rng.uniform(1.0 - params.contrast, 1.0 + params.contrast)
    s = rng.uniform(1.0 - params.saturation, 1.0 + params.saturation)
    h = rng.uniform(-params.hue, params.hue)
    return apply_color_jitter(tile_image, b, c, s, h)


def sample_tiles_per_slide(tiles_by_slide, quota: int, seed: int) -> list:
    """Draw exactly ``quota`` tiles per slide, deterministically.

    Uniform without replacement when a slide has at least ``quota`` tiles,
    with replacement otherwise.  Slides with zero tiles are skipped with a
    warning.  Slide order (and hence output order) is sorted by slide id, so
    the result does not depend on the mapping's iteration order.
    """
    if quota < 1:
        raise ValueError("quota must be >= 1")
    out = []
    for slide_id in sorted(tiles_by_slide):
        tiles = tiles_by_slide[slide_id]
        n = len(tiles)
        if n == 0:
            logger.warning("slide %s has no tiles; skipped in sampling", slide_id)
            continue
        rng = substream(seed, "sample", slide_id)
        if n >= quota:
            idx = rng.choice(n, size=quota, replace=False)
        else:
            idx = rng.integers(0, n, size=quota)
        out.extend(tiles[int(i)] for i in idx)
    return out


@dataclass
class ScorerModel:
    """Linear tile scorer: sigmoid(w . x + b), plus provenance metadata."""

    weights: np.ndarray
    bias: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.bias):
            raise ValueError("model parameters must be finite")
        if self.metadata.get("sampling_number", 1) < 1:
            raise ValueError("sampling_number must be >= 1")


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_loss_and_grad(w, b, X, y):
    """Mean binary cross-entropy and its gradient for a linear scorer.

    Uses the log-sum-exp form, so it is exact for any margin and safe to
    compare against finite differences.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = X @ w + b
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    resid = sigmoid(z) - y
    grad_w = X.T @ resid / len(y)
    grad_b = float(np.mean(resid))
    return loss, grad_w, grad_b


@dataclass
class TrainConfig:
    epochs: int
    learning_rate: float
    quota: int
    seed: int
    jitter: JitterParams | None = None
    batch_size: int = 0  # 0 = full batch


def train_baseline_scorer(
    features: np.ndarray,
    tile_slide_ids,
    slide_labels,
    config: TrainConfig,
    augment=None,
    metadata: dict | None = None,
) -> ScorerModel:
    """Fit the logistic tile scorer by gradient descent on per-epoch resampled tiles.

    ``features`` is (n_tiles, dim); ``tile_slide_ids`` assigns each tile to a
    slide; ``slide_labels`` maps slide id to 0 (nevus) or 1 (melanoma).  Each
    epoch redraws ``quota`` tiles per slide via sample_tiles_per_slide.  The
    optional ``augment(tile_indices, epoch)`` hook returns replacement raw
    feature rows (the pipeline uses it to inject color-jittered features).
    Features are standardized internally; the returned weights act on raw
    features.  Fully deterministic given the config seed.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be a 2-D array")
    tile_slide_ids = list(tile_slide_ids)
    if len(tile_slide_ids) != X.shape[0]:
        raise ValueError("one slide id per feature row required")

    by_slide = {}
    for i, sid in enumerate(tile_slide_ids):
        by_slide.setdefault(sid, []).append(i)
    indices_by_slide = {sid: np.asarray(ix, dtype=np.int64) for sid, ix in by_slide.items()}
    present = {int(slide_labels[sid]) for sid in indices_by_slide}
    if present != {0, 1}:
        raise ValueError("degenerate training set: need at least one slide of each class")
    y_tile = np.array([float(slide_labels[sid]) for sid in tile_slide_ids])

    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    scale = np.where(sd > 0, sd, 1.0)

    dim = X.shape[1]
    w = np.zeros(dim)
    b = 0.0
    lr = config.learning_rate
    for epoch in range(config.epochs):
        idx = np.asarray(
            sample_tiles_per_slide(indices_by_slide, config.quota, derive_seed(config.seed, "epoch", epoch)),
            dtype=np.int64,
        )
        raw = augment(idx, epoch) if augment is not None else X[idx]
        Xe = (np.asarray(raw, dtype=np.float64) - mu) / scale
        ye = y_tile[idx]
        if config.batch_size and config.batch_size < len(idx):
            order = substream(config.seed, "shuffle", epoch).permutation(len(idx))
            starts = range(0, len(idx), config.batch_size)
            batches = [order[s : s + config.batch_size] for s in starts]
        else:
            batches = [np.arange(len(idx))]
        for batch in batches:
            _, gw, gb = logistic_loss_and_grad(w, b, Xe[batch], ye[batch])
            w -= lr * gw
            b -= lr * gb

    meta = {
        "training_seed": config.seed,
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "sampling_number": config.quota,
    }
    if metadata:
        meta.update(metadata)
    # fold the standardization into the weights so scoring works on raw features
    w_raw = w / scale
    b_raw = b - float(np.sum(w * mu / scale))
    return ScorerModel(weights=w_raw, bias=b_raw, metadata=meta)


def score_tile(model: ScorerModel, features: np.ndarray) -> float:
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape != model.weights.shape:
        raise ValueError(f"feature dim {feats.shape} does not match model dim {model.weights.shape}")
    return float(sigmoid(feats @ model.weights + model.bias))


def score_tiles(model: ScorerModel, features: np.ndarray) -> np.ndarray:
    """Vectorized score_tile over rows of a feature matrix."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != model.weights.shape[0]:
        raise ValueError("feature matrix does not match model dim")
    return sigmoid(feats @ model.weights + model.bias)


# ---------------------------------------------------------------------------
# File interfaces


@dataclass(frozen=True)
class TileScore:
    """One tile's melanoma probability under one model."""

    tile: TileRef
    stain: Stain
    score: float
    model_id: str

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


TILE_SCORE_HEADER = ["slide_id", "stain", "magnification", "grid_x", "grid_y", "score", "model_id"]


def write_tile_scores(path, scores) -> None:
    """Tile-score CSV: UTF-8, '.' decimal, LF line endings; scores kept round-trip exact."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TILE_SCORE_HEADER)
        for ts in scores:
            t = ts.tile
            writer.writerow(
                [t.slide_id, ts.stain.value, t.magnification.label, t.grid_x, t.grid_y, repr(ts.score), ts.model_id]
            )


def import_external_scores(path) -> list:
    """Parse and validate a tile-score CSV; rejects bad rows by line number."""
    out = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty file: missing tile-score header") from None
        if header != TILE_SCORE_HEADER:
            raise ValueError(f"malformed tile-score header: {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(TILE_SCORE_HEADER):
                raise ValueError(f"row {lineno}: expected {len(TILE_SCORE_HEADER)} fields, got {len(row)}")
            slide_id, stain, mag, gx, gy, score_text, model_id = row
            try:
                score = float(score_text)
            except ValueError:
                raise ValueError(f"row {lineno}: non-numeric score {score_text!r}") from None
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"row {lineno}: score {score} outside [0, 1]")
            tile = TileRef(slide_id, Magnification.parse(mag), int(gx), int(gy))
            out.append(TileScore(tile=tile, stain=Stain.parse(stain), score=score, model_id=model_id))
    return out


def save_model(model: ScorerModel, path) -> None:
    """Model JSON; float serialization round-trips bit-exactly."""
    payload = {
        "weights": [float(w) for w in model.weights],
        "bias": float(model.bias),
        "metadata": model.metadata,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def load_model(path) -> ScorerModel:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return ScorerModel(weights=np.array(data["weights"]), bias=data["bias"], metadata=data.get("metadata", {}))
