"""End-to-end experiment orchestration.

Stages: tessellate+featurize every slide, cross-validate the per-model
scorers on the training split to pick decision thresholds, train final
models, score and aggregate every evaluation slide, fuse the model scores,
apply the hierarchical gate, and report AUROC tables per cohort.

All randomness flows from one root seed through named substreams, so a rerun
with the same config is byte-identical, regardless of the worker count.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from . import __version__
from .aggregate import BootstrapConfig, SlidePrediction, aggregate_slide, slide_score_ci, write_predictions
from .evaluation import (
    CohortEntry,
    CohortPredictions,
    ReportTable,
    auroc,
    evaluate_cohort,
    select_threshold,
)
from .fusion import (
    FusionConfig,
    FusionMode,
    ModelProfile,
    fuse,
    fused_model_id,
    hierarchical_predict,
    save_fusion_config,
)
from .rng import derive_seed, substream
from .scoring import (
    JitterParams,
    ScorerModel,
    TileScore,
    TrainConfig,
    color_jitter,
    extract_features,
    import_external_scores,
    save_model,
    score_tiles,
    train_baseline_scorer,
    write_tile_scores,
)
from .synth import LABEL_IN_SITU, LABEL_MELANOMA, LABEL_NEVUS, load_manifest
from .tess import Magnification, SlideImage, Stain, downscale, load_annotation, tessellate, tile_pixels

logger = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A stage failure; carries the stage name and offending slide when known."""

    def __init__(self, stage: str, message: str, slide_id: str | None = None):
        self.stage = stage
        self.slide_id = slide_id
        where = f"stage {stage}" + (f", slide {slide_id}" if slide_id else "")
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    stain: Stain
    magnification: Magnification


MODEL_SPECS = (
    ModelSpec("he_40x", Stain.HE, Magnification.X40),
    ModelSpec("melana_40x", Stain.MELANA, Magnification.X40),
    ModelSpec("melana_20x", Stain.MELANA, Magnification.X20),
    ModelSpec("melana_10x", Stain.MELANA, Magnification.X10),
    ModelSpec("melana_5x", Stain.MELANA, Magnification.X5),
)

REPORT_ROWS = (
    ("he_40x", "H&E (0.25 um/px)"),
    ("melana_40x", "MelanA (0.25 um/px)"),
    ("melana_20x", "MelanA (0.50 um/px)"),
    ("melana_10x", "MelanA (1.00 um/px)"),
    ("melana_5x", "MelanA (2.00 um/px)"),
    ("melana_combined", "MelanA (all 4 combined)"),
    ("melana_he", "MelanA + H&E"),
    ("melana_he_hierarchical", "MelanA + H&E (hierarchical)"),
)

FUSED_ROWS = ("melana_combined", "melana_he", "melana_he_hierarchical")


@dataclass
class ScorerSettings:
    epochs: int = 16
    learning_rate: float = 0.5
    sampling_number: int = 24
    batch_size: int = 0
    jitter: JitterParams | None = None


@dataclass
class PipelineConfig:
    seed: int = 20230925
    data_root: str = "data"
    output_root: str = "out"
    workers: int = 1
    synth: dict = field(default_factory=dict)
    min_mask_coverage: float = 0.5
    scorers: dict = field(default_factory=dict)  # model_id -> ScorerSettings
    cv_folds: int = 5
    fusion_mode: FusionMode = FusionMode.THRESHOLD_DISTANCE
    two_level_multimodal: bool = False
    bootstrap_n: int = 10_000
    bootstrap_alpha: float = 0.05
    in_situ_as: str = LABEL_MELANOMA
    external_scores: dict | None = None  # model_id -> tile-score CSV path
    external_fusion_models: list | None = None  # ModelProfile list when external

    def __post_init__(self):
        if self.in_situ_as not in (LABEL_MELANOMA, LABEL_NEVUS):
            raise ValueError("in_situ_as must be 'melanoma' or 'nevus'")
        for spec in MODEL_SPECS:
            self.scorers.setdefault(spec.model_id, ScorerSettings())

    def scorer(self, model_id: str) -> ScorerSettings:
        return self.scorers[model_id]

    def bootstrap(self, *seed_tokens) -> BootstrapConfig:
        return BootstrapConfig(
            n_boot=self.bootstrap_n, alpha=self.bootstrap_alpha, seed=derive_seed(self.seed, *seed_tokens)
        )


def load_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    scorers = {}
    for model_id, entry in raw.get("scorers", {}).items():
        jitter = entry.get("jitter")
        scorers[model_id] = ScorerSettings(
            epochs=int(entry.get("epochs", 16)),
            learning_rate=float(entry.get("learning_rate", 0.5)),
            sampling_number=int(entry.get("sampling_number", 24)),
            batch_size=int(entry.get("batch_size", 0)),
            jitter=JitterParams(**jitter) if jitter else None,
        )
    fusion = raw.get("fusion", {})
    external = raw.get("external", {})
    ext_models = None
    if external.get("fusion_models"):
        ext_models = [
            ModelProfile(m["model_id"], float(m["threshold"]), float(m.get("validation_auroc", 0.5)))
            for m in external["fusion_models"]
        ]
    return PipelineConfig(
        seed=int(raw.get("seed", 20230925)),
        data_root=raw.get("data_root", "data"),
        output_root=raw.get("output_root", "out"),
        workers=int(raw.get("workers", 1)),
        synth=raw.get("synth", {}),
        min_mask_coverage=float(raw.get("tessellation", {}).get("min_coverage", 0.5)),
        scorers=scorers,
        cv_folds=int(raw.get("cv_folds", 5)),
        fusion_mode=FusionMode.parse(fusion.get("mode", "threshold_distance")),
        two_level_multimodal=bool(fusion.get("two_level", False)),
        bootstrap_n=int(raw.get("bootstrap", {}).get("n_boot", 10_000)),
        bootstrap_alpha=float(raw.get("bootstrap", {}).get("alpha", 0.05)),
        in_situ_as=raw.get("in_situ_as", LABEL_MELANOMA),
        external_scores=external.get("scores"),
        external_fusion_models=ext_models,
    )


def binary_label(label: str, in_situ_as: str) -> int:
    if label == LABEL_IN_SITU:
        label = in_situ_as
    return 1 if label == LABEL_MELANOMA else 0


def config_digest(config: PipelineConfig) -> str:
    """Stable hash of the effective configuration, for the run manifest."""

    def encode(obj):
        if isinstance(obj, (ScorerSettings, JitterParams)):
            return vars(obj)
        if isinstance(obj, FusionMode):
            return obj.value
        if isinstance(obj, ModelProfile):
            return {"model_id": obj.model_id, "threshold": obj.threshold, "validation_auroc": obj.validation_auroc}
        raise TypeError(f"unhashable config field: {type(obj).__name__}")

    fields = {k: v for k, v in vars(config).items() if k not in ("workers", "output_root", "data_root")}
    payload = json.dumps(fields, sort_keys=True, default=encode)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Manifest/cohort bookkeeping


@dataclass
class Workspace:
    """Loaded manifests plus the derived slide bookkeeping for one run."""

    manifests: list
    labels: dict  # slide_id -> 0/1
    raw_labels: dict  # slide_id -> melanoma/in_situ/nevus
    train_sids: list
    cohorts: dict  # cohort_id -> [slide_id]

    @property
    def eval_sids(self) -> list:
        return sorted(set.union(*[set(v) for v in self.cohorts.values()]))


def load_workspace(config: PipelineConfig) -> Workspace:
    data_root = Path(config.data_root)
    manifests = []
    for name in ("site_a", "site_b", "site_c"):
        path = data_root / f"manifest_{name}.json"
        if not path.exists():
            raise PipelineError("load", f"missing manifest {path}; run `stainfuse synth` first")
        manifests.append(load_manifest(path))
    labels = {e.slide_id: binary_label(e.label, config.in_situ_as) for m in manifests for e in m.entries}
    raw_labels = {e.slide_id: e.label for m in manifests for e in m.entries}
    train_sids = sorted(e.slide_id for e in manifests[0].entries if e.split == "train")
    cohorts = {
        "site_a_holdout": sorted(e.slide_id for e in manifests[0].entries if e.split == "holdout"),
        manifests[1].cohort_id: sorted(manifests[1].slide_ids()),
        manifests[2].cohort_id: sorted(manifests[2].slide_ids()),
    }
    return Workspace(manifests, labels, raw_labels, train_sids, cohorts)


# ---------------------------------------------------------------------------
# Feature stage


@dataclass
class SlideFeatures:
    """Per-slide tessellation products for one stain and magnification."""

    slide_id: str
    stain: Stain
    magnification: Magnification
    tiles: list
    features: np.ndarray  # (n_tiles, FEATURE_DIM)
    tile_images: list | None = None  # kept only when jitter training needs pixels


def load_slide_image(path: str, slide_id: str, stain: Stain) -> SlideImage:
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise PipelineError("tessellate", f"cannot read image {path}", slide_id)
    return SlideImage(slide_id=slide_id, stain=stain, pixels=np.ascontiguousarray(raw[:, :, ::-1]), um_per_px=0.25)


def _featurize_slide(entry, config: PipelineConfig, keep_pixels: frozenset) -> dict:
    """All (stain, magnification) tessellations + features for one slide."""
    out = {}
    mask = load_annotation(entry.annotation)
    for stain in (Stain.HE, Stain.MELANA):
        mags = sorted({spec.magnification for spec in MODEL_SPECS if spec.stain is stain}, key=lambda m: m.um_per_px)
        if not mags:
            continue
        current = load_slide_image(entry.stains[stain.value], entry.slide_id, stain)
        for mag in mags:
            if current.um_per_px != mag.um_per_px:
                current = downscale(current, mag)
            tiles = tessellate(current, mask, mag, min_coverage=config.min_mask_coverage)
            if not tiles:
                raise PipelineError(
                    "tessellate", f"no tiles at {mag.label} ({stain.value}); image or mask too small", entry.slide_id
                )
            pixels = [np.ascontiguousarray(tile_pixels(current, t)) for t in tiles]
            feats = np.stack([extract_features(p) for p in pixels])
            out[(stain, mag)] = SlideFeatures(
                slide_id=entry.slide_id,
                stain=stain,
                magnification=mag,
                tiles=tiles,
                features=feats,
                tile_images=pixels if (stain, mag) in keep_pixels else None,
            )
    return out


def featurize_cohorts(ws: Workspace, config: PipelineConfig, keep_pixels=frozenset(), workers: int = 1) -> dict:
    """slide_id -> {(stain, mag) -> SlideFeatures} over all manifests."""
    entries = sorted((e for m in ws.manifests for e in m.entries), key=lambda e: e.slide_id)
    keep_pixels = frozenset(keep_pixels)
    logger.info("tessellating and featurizing %d slides", len(entries))
    results = {}
    if workers > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = {pool.submit(_featurize_slide, e, config, keep_pixels): e.slide_id for e in entries}
            for fut, sid in futs.items():
                results[sid] = fut.result()
    else:
        for e in entries:
            results[e.slide_id] = _featurize_slide(e, config, keep_pixels)
    return results


def jitter_pixel_keys(config: PipelineConfig) -> set:
    keys = set()
    for spec in MODEL_SPECS:
        jit = config.scorer(spec.model_id).jitter
        if jit is not None and not jit.is_identity:
            keys.add((spec.stain, spec.magnification))
    return keys


# ---------------------------------------------------------------------------
# Training stage


def _stratified_folds(slide_ids, labels, k: int, seed: int) -> tuple:
    """Deterministic stratified fold assignment; returns ({slide_id: fold}, k)."""
    by_class = {}
    for sid in sorted(slide_ids):
        by_class.setdefault(labels[sid], []).append(sid)
    min_class = min(len(v) for v in by_class.values()) if by_class else 0
    if len(by_class) < 2 or min_class < 2:
        raise PipelineError("train", "need at least 2 slides per class on the training split")
    k = max(2, min(k, min_class))
    folds = {}
    rng = substream(seed, "cv")
    for cls in sorted(by_class):
        sids = by_class[cls]
        order = rng.permutation(len(sids))
        for pos, idx in enumerate(order):
            folds[sids[idx]] = pos % k
    return folds, k


def _train_model(spec: ModelSpec, train_sids, features, labels, settings: ScorerSettings, seed: int) -> ScorerModel:
    rows = []
    sids = []
    images = []
    for sid in sorted(train_sids):
        sf = features[sid][(spec.stain, spec.magnification)]
        rows.append(sf.features)
        sids.extend([sid] * len(sf.tiles))
        if settings.jitter is not None and sf.tile_images is not None:
            images.extend(sf.tile_images)
    X = np.concatenate(rows, axis=0)

    augment = None
    if settings.jitter is not None and not settings.jitter.is_identity:
        if len(images) != X.shape[0]:
            raise PipelineError("train", f"jitter requested for {spec.model_id} but tile pixels were not retained")

        def augment(indices, epoch):
            out = np.empty((len(indices), X.shape[1]))
            for row, idx in enumerate(indices):
                jit_seed = derive_seed(seed, "jitter", epoch, int(idx))
                out[row] = extract_features(color_jitter(images[int(idx)], settings.jitter, jit_seed))
            return out

    train_cfg = TrainConfig(
        epochs=settings.epochs,
        learning_rate=settings.learning_rate,
        quota=settings.sampling_number,
        seed=seed,
        jitter=settings.jitter,
        batch_size=settings.batch_size,
    )
    metadata = {
        "stain": spec.stain.value,
        "magnification": spec.magnification.label,
        "model_id": spec.model_id,
    }
    return train_baseline_scorer(X, sids, labels, train_cfg, augment=augment, metadata=metadata)


def _validation_cohort(slide_scores: dict, labels: dict) -> CohortPredictions:
    entries = [
        CohortEntry(sid, slide_scores[sid], LABEL_MELANOMA if labels[sid] == 1 else LABEL_NEVUS)
        for sid in sorted(slide_scores)
    ]
    return CohortPredictions(cohort_id="validation", entries=entries)


@dataclass
class TrainedModels:
    models: dict  # model_id -> ScorerModel
    profiles: list  # ModelProfile per model
    thresholds: dict
    validation_aurocs: dict
    validation_scores: dict  # model_id -> {slide_id -> slide score}


def train_stage(ws: Workspace, features: dict, config: PipelineConfig) -> TrainedModels:
    """Cross-validated threshold selection, then final per-model training."""
    folds, k = _stratified_folds(ws.train_sids, ws.labels, config.cv_folds, config.seed)
    logger.info("selecting thresholds with %d-fold validation on %d slides", k, len(ws.train_sids))
    thresholds = {}
    validation_aurocs = {}
    validation_scores = {}
    profiles = []
    models = {}
    for spec in MODEL_SPECS:
        settings = config.scorer(spec.model_id)
        val_scores = {}
        for fold in range(k):
            fit_sids = [s for s in ws.train_sids if folds[s] != fold]
            val_sids = [s for s in ws.train_sids if folds[s] == fold]
            try:
                model = _train_model(
                    spec, fit_sids, features, ws.labels, settings, derive_seed(config.seed, "train", spec.model_id, fold)
                )
            except ValueError as exc:
                raise PipelineError("train", f"{spec.model_id} fold {fold}: {exc}") from exc
            for sid in val_sids:
                sf = features[sid][(spec.stain, spec.magnification)]
                val_scores[sid] = aggregate_slide(
                    score_tiles(model, sf.features), sid, spec.stain.value, spec.model_id
                ).score
        val_cohort = _validation_cohort(val_scores, ws.labels)
        thresholds[spec.model_id] = select_threshold(val_cohort).value
        validation_aurocs[spec.model_id] = auroc(val_cohort)
        validation_scores[spec.model_id] = val_scores
        profiles.append(ModelProfile(spec.model_id, thresholds[spec.model_id], validation_aurocs[spec.model_id]))

    logger.info("training final models on %d slides", len(ws.train_sids))
    for spec in MODEL_SPECS:
        try:
            models[spec.model_id] = _train_model(
                spec, ws.train_sids, features, ws.labels, config.scorer(spec.model_id),
                derive_seed(config.seed, "train", spec.model_id),
            )
        except ValueError as exc:
            raise PipelineError("train", f"{spec.model_id}: {exc}") from exc
    return TrainedModels(models, profiles, thresholds, validation_aurocs, validation_scores)


# ---------------------------------------------------------------------------
# Scoring / aggregation / fusion stages


def score_stage(models: dict, features: dict, eval_sids, workers: int = 1) -> dict:
    """model_id -> [TileScore] over the evaluation slides."""
    logger.info("scoring %d evaluation slides", len(eval_sids))
    out = {}
    for spec in MODEL_SPECS:
        model = models[spec.model_id]
        scores = []
        for sid in eval_sids:
            sf = features[sid][(spec.stain, spec.magnification)]
            for tile, s in zip(sf.tiles, score_tiles(model, sf.features)):
                scores.append(TileScore(tile=tile, stain=spec.stain, score=float(s), model_id=spec.model_id))
        out[spec.model_id] = scores
    return out


def aggregate_stage(tile_scores_by_model: dict, config: PipelineConfig, raw_labels: dict, workers: int = 1) -> dict:
    """model_id -> {slide_id -> SlidePrediction with bootstrap CI}."""
    logger.info("aggregating slide scores with bootstrap CIs (n_boot=%d)", config.bootstrap_n)
    predictions = {}
    for spec in MODEL_SPECS:
        by_slide = {}
        for ts in tile_scores_by_model[spec.model_id]:
            by_slide.setdefault(ts.tile.slide_id, []).append(ts.score)
        preds = {}
        for sid in sorted(by_slide):
            scores = by_slide[sid]
            pred = aggregate_slide(scores, sid, spec.stain.value, spec.model_id, label=raw_labels.get(sid))
            pred.ci_low, pred.ci_high = slide_score_ci(
                scores, config.bootstrap("slide_ci", spec.model_id, sid), workers=workers
            )
            preds[sid] = pred
        predictions[spec.model_id] = preds
    return predictions


def fusion_stage(
    predictions: dict,
    fusion_config: FusionConfig,
    config: PipelineConfig,
    trained: TrainedModels | None,
    labels: dict,
):
    """Fused score maps for the three combined rows."""
    melana_ids = [s.model_id for s in MODEL_SPECS if s.stain is Stain.MELANA]
    scored_sids = sorted(set.intersection(*[set(predictions[s.model_id]) for s in MODEL_SPECS]))
    logger.info("fusing model scores for %d slides", len(scored_sids))
    he_threshold = fusion_config.profile("he_40x").threshold

    combined_val_auroc = 0.5
    if config.two_level_multimodal and trained is not None:
        fused_val = {}
        for sid in trained.validation_scores["melana_40x"]:
            melana_val = [
                SlidePrediction(sid, Stain.MELANA.value, m, trained.validation_scores[m][sid], 1) for m in melana_ids
            ]
            fused_val[sid] = fuse(melana_val, fusion_config).score
        if fused_val:
            combined_val_auroc = auroc(_validation_cohort(fused_val, labels))

    fused_scores = {row: {} for row in FUSED_ROWS}
    for sid in scored_sids:
        melana_preds = [predictions[m][sid] for m in melana_ids]
        he_pred = predictions["he_40x"][sid]
        combined = fuse(melana_preds, fusion_config)
        fused_scores["melana_combined"][sid] = combined.score
        if config.two_level_multimodal:
            combined_pred = SlidePrediction(
                slide_id=sid,
                stain=Stain.MELANA.value,
                model_id=fused_model_id(config.fusion_mode),
                score=combined.score,
                n_tiles=sum(p.n_tiles for p in melana_preds),
            )
            two_cfg = FusionConfig(
                mode=config.fusion_mode,
                models=[
                    fusion_config.profile("he_40x"),
                    ModelProfile(fused_model_id(config.fusion_mode), 0.5, combined_val_auroc),
                ],
            )
            fused_scores["melana_he"][sid] = fuse([he_pred, combined_pred], two_cfg).score
        else:
            fused_scores["melana_he"][sid] = fuse([he_pred, *melana_preds], fusion_config).score
        fused_scores["melana_he_hierarchical"][sid] = hierarchical_predict(
            he_pred, he_threshold, melana_preds, fusion_config
        ).score
    return fused_scores, scored_sids


# ---------------------------------------------------------------------------
# The full run


@dataclass
class RunResult:
    report: ReportTable
    thresholds: dict
    validation_aurocs: dict
    output_root: Path


def run_pipeline(config: PipelineConfig, workers: int | None = None) -> RunResult:
    workers = config.workers if workers is None else workers
    out_root = Path(config.output_root)
    models_dir = out_root / "models"
    scores_dir = out_root / "scores"
    pred_dir = out_root / "predictions"
    for d in (models_dir, scores_dir, pred_dir):
        d.mkdir(parents=True, exist_ok=True)

    ws = load_workspace(config)
    external = config.external_scores or {}

    trained = None
    if external:
        missing = [s.model_id for s in MODEL_SPECS if s.model_id not in external]
        if missing:
            raise PipelineError("score", f"external scores missing for models: {missing}")
        if not config.external_fusion_models:
            raise PipelineError("fuse", "external scores need explicit fusion model profiles")
        logger.info("importing external tile scores for %d models", len(MODEL_SPECS))
        tile_scores_by_model = {s.model_id: import_external_scores(external[s.model_id]) for s in MODEL_SPECS}
        profiles = list(config.external_fusion_models)
        thresholds = {p.model_id: p.threshold for p in profiles}
        validation_aurocs = {p.model_id: p.validation_auroc for p in profiles}
    else:
        features = featurize_cohorts(ws, config, keep_pixels=jitter_pixel_keys(config), workers=workers)
        trained = train_stage(ws, features, config)
        profiles = trained.profiles
        thresholds = trained.thresholds
        validation_aurocs = trained.validation_aurocs
        for model_id, model in trained.models.items():
            save_model(model, models_dir / f"{model_id}.json")
        tile_scores_by_model = score_stage(trained.models, features, ws.eval_sids, workers=workers)
        for model_id, scores in tile_scores_by_model.items():
            write_tile_scores(scores_dir / f"{model_id}_tile_scores.csv", scores)

    fusion_config = FusionConfig(mode=config.fusion_mode, models=profiles)
    save_fusion_config(fusion_config, out_root / "fusion_models.json")

    predictions = aggregate_stage(tile_scores_by_model, config, ws.raw_labels, workers=workers)
    for model_id, preds in predictions.items():
        write_predictions(pred_dir / f"{model_id}_predictions.csv", [preds[s] for s in sorted(preds)])

    fused_scores, scored_sids = fusion_stage(predictions, fusion_config, config, trained, ws.labels)
    melana_ids = [s.model_id for s in MODEL_SPECS if s.stain is Stain.MELANA]
    for row_id, mode_tag, contributing in (
        ("melana_combined", fused_model_id(config.fusion_mode), melana_ids),
        ("melana_he", fused_model_id(config.fusion_mode), melana_ids + ["he_40x"]),
        ("melana_he_hierarchical", "hierarchical", melana_ids + ["he_40x"]),
    ):
        stain_tag = Stain.MELANA.value if row_id == "melana_combined" else "HE+MelanA"
        rows = [
            SlidePrediction(
                slide_id=sid,
                stain=stain_tag,
                model_id=mode_tag,
                score=fused_scores[row_id][sid],
                n_tiles=sum(predictions[m][sid].n_tiles for m in contributing),
                label=ws.raw_labels.get(sid),
            )
            for sid in scored_sids
        ]
        write_predictions(pred_dir / f"{row_id}_predictions.csv", rows)

    # --- evaluation ---------------------------------------------------------
    logger.info("evaluating %d model rows on %d cohorts", len(REPORT_ROWS), len(ws.cohorts))
    results = {}
    for row_id, _label in REPORT_ROWS:
        for cohort_id, sids in ws.cohorts.items():
            entries = []
            for sid in sids:
                score = fused_scores[row_id][sid] if row_id in fused_scores else predictions[row_id][sid].score
                entries.append(CohortEntry(sid, score, LABEL_MELANOMA if ws.labels[sid] == 1 else LABEL_NEVUS))
            cohort = CohortPredictions(cohort_id=cohort_id, entries=entries)
            try:
                results[(row_id, cohort_id)] = evaluate_cohort(
                    cohort, config.bootstrap("auroc_ci", row_id, cohort_id), workers=workers
                )
            except ValueError as exc:
                raise PipelineError("evaluate", f"{row_id} on {cohort_id}: {exc}") from exc

    report = ReportTable(model_rows=list(REPORT_ROWS), cohort_ids=list(ws.cohorts), results=results)
    report.write_csv(out_root / "report.csv")
    report.write_roc_points(out_root / "roc_points.csv")
    (out_root / "report.txt").write_text(report.to_text(), encoding="utf-8")

    run_manifest = {
        "package_version": __version__,
        "config_sha256": config_digest(config),
        "seed": config.seed,
        "bootstrap": {"n_boot": config.bootstrap_n, "alpha": config.bootstrap_alpha},
        "fusion_mode": config.fusion_mode.value,
        "thresholds": {k: thresholds[k] for k in sorted(thresholds)},
        "validation_aurocs": {k: validation_aurocs[k] for k in sorted(validation_aurocs)},
        "cohorts": {k: len(v) for k, v in ws.cohorts.items()},
        "external_scores": sorted(external) if external else [],
    }
    with open(out_root / "run_manifest.json", "w", encoding="utf-8") as f:
        json.dump(run_manifest, f, indent=2, sort_keys=True)
        f.write("\n")

    return RunResult(report=report, thresholds=thresholds, validation_aurocs=validation_aurocs, output_root=out_root)
