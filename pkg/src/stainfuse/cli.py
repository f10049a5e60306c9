"""Command-line interface.

Subcommands mirror the pipeline stages (synth, tessellate, train, score,
aggregate, fuse, evaluate) plus `run`, which executes the whole experiment
from one JSON config.  Exit codes: 0 ok, 1 pipeline error, 2 usage/config
error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .aggregate import SlidePrediction, read_predictions, write_predictions
from .evaluation import evaluate_cohort, format_cell, read_cohort_csv, significance_vs_random
from .fusion import FusionConfig, fused_model_id, load_fusion_config, save_fusion_config
from .pipeline import (
    MODEL_SPECS,
    PipelineConfig,
    PipelineError,
    aggregate_stage,
    featurize_cohorts,
    fusion_stage,
    jitter_pixel_keys,
    load_config,
    load_slide_image,
    load_workspace,
    run_pipeline,
    score_stage,
    train_stage,
)
from .scoring import import_external_scores, load_model, save_model, write_tile_scores
from .synth import SynthConfig, default_site_profiles, generate_cohorts
from .tess import Stain, downscale, load_annotation, tessellate, write_tile_manifest, write_tile_png

logger = logging.getLogger("stainfuse")

EXIT_OK = 0
EXIT_PIPELINE = 1
EXIT_USAGE = 2


class SystemExit2(Exception):
    """Usage/config error, mapped to exit code 2."""


def _load_config_or_die(args) -> PipelineConfig:
    path = Path(args.config)
    if not path.exists():
        raise SystemExit2(f"config file not found: {path}")
    try:
        config = load_config(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise SystemExit2(f"invalid config {path}: {exc}") from exc
    if args.seed is not None:
        config.seed = args.seed
    if args.workers is not None:
        config.workers = args.workers
    if args.out is not None:
        config.output_root = args.out
    return config


def cmd_synth(args) -> int:
    config = _load_config_or_die(args)
    synth_args = {k: v for k, v in config.synth.items() if k != "seed"}
    if "blob_count" in synth_args:
        synth_args["blob_count"] = tuple(synth_args["blob_count"])
    try:
        synth_config = SynthConfig(seed=config.seed, **synth_args)
    except (TypeError, ValueError) as exc:
        raise SystemExit2(f"invalid synth config: {exc}") from exc
    out = Path(config.data_root)
    manifests = generate_cohorts(synth_config, out, sites=default_site_profiles(), workers=config.workers)
    for m in manifests:
        print(f"cohort {m.cohort_id}: {len(m.entries)} slides -> {out / ('manifest_' + m.cohort_id + '.json')}")
    return EXIT_OK


def cmd_tessellate(args) -> int:
    config = _load_config_or_die(args)
    ws = load_workspace(config)
    out_root = Path(config.output_root)
    tiles_dir = out_root / "tiles"
    tiles_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for manifest in ws.manifests:
        for entry in sorted(manifest.entries, key=lambda e: e.slide_id):
            mask = load_annotation(entry.annotation)
            for stain in (Stain.HE, Stain.MELANA):
                mags = sorted(
                    {s.magnification for s in MODEL_SPECS if s.stain is stain}, key=lambda m: m.um_per_px
                )
                current = load_slide_image(entry.stains[stain.value], entry.slide_id, stain)
                for mag in mags:
                    if current.um_per_px != mag.um_per_px:
                        current = downscale(current, mag)
                    for tile in tessellate(current, mask, mag, min_coverage=config.min_mask_coverage):
                        write_tile_png(current, tile, tiles_dir)
                        rows.append((stain, tile))
    manifest_path = out_root / "tile_manifest.csv"
    write_tile_manifest(manifest_path, rows)
    print(f"{len(rows)} tiles -> {tiles_dir} (manifest: {manifest_path})")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config_or_die(args)
    ws = load_workspace(config)
    features = featurize_cohorts(ws, config, keep_pixels=jitter_pixel_keys(config), workers=config.workers)
    trained = train_stage(ws, features, config)
    out_root = Path(config.output_root)
    models_dir = out_root / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    for model_id, model in trained.models.items():
        save_model(model, models_dir / f"{model_id}.json")
    save_fusion_config(
        FusionConfig(mode=config.fusion_mode, models=trained.profiles), out_root / "fusion_models.json"
    )
    for model_id in sorted(trained.thresholds):
        print(
            f"{model_id}: threshold {trained.thresholds[model_id]:.4f}, "
            f"validation AUROC {trained.validation_aurocs[model_id]:.3f}"
        )
    return EXIT_OK


def cmd_score(args) -> int:
    config = _load_config_or_die(args)
    ws = load_workspace(config)
    out_root = Path(config.output_root)
    models_dir = out_root / "models"
    models = {}
    for spec in MODEL_SPECS:
        path = models_dir / f"{spec.model_id}.json"
        if not path.exists():
            raise SystemExit2(f"missing model file {path}; run `stainfuse train` first")
        models[spec.model_id] = load_model(path)
    features = featurize_cohorts(ws, config, workers=config.workers)
    tile_scores = score_stage(models, features, ws.eval_sids, workers=config.workers)
    scores_dir = out_root / "scores"
    scores_dir.mkdir(parents=True, exist_ok=True)
    for model_id, scores in tile_scores.items():
        path = scores_dir / f"{model_id}_tile_scores.csv"
        write_tile_scores(path, scores)
        print(f"{model_id}: {len(scores)} tile scores -> {path}")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    config = _load_config_or_die(args)
    ws = load_workspace(config)
    out_root = Path(config.output_root)
    scores_dir = out_root / "scores"
    tile_scores = {}
    for spec in MODEL_SPECS:
        path = Path(args.scores) / f"{spec.model_id}_tile_scores.csv" if args.scores else scores_dir / f"{spec.model_id}_tile_scores.csv"
        if not path.exists():
            raise SystemExit2(f"missing tile-score file {path}; run `stainfuse score` first")
        tile_scores[spec.model_id] = import_external_scores(path)
    predictions = aggregate_stage(tile_scores, config, ws.raw_labels, workers=config.workers)
    pred_dir = out_root / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    for model_id, preds in predictions.items():
        path = pred_dir / f"{model_id}_predictions.csv"
        write_predictions(path, [preds[s] for s in sorted(preds)])
        print(f"{model_id}: {len(preds)} slide predictions -> {path}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    config = _load_config_or_die(args)
    ws = load_workspace(config)
    out_root = Path(config.output_root)
    fusion_path = Path(args.fusion_config) if args.fusion_config else out_root / "fusion_models.json"
    if not fusion_path.exists():
        raise SystemExit2(f"missing fusion config {fusion_path}; run `stainfuse train` first")
    fusion_config = load_fusion_config(fusion_path)
    pred_dir = out_root / "predictions"
    predictions = {}
    for spec in MODEL_SPECS:
        path = pred_dir / f"{spec.model_id}_predictions.csv"
        if not path.exists():
            raise SystemExit2(f"missing predictions {path}; run `stainfuse aggregate` first")
        predictions[spec.model_id] = {p.slide_id: p for p in read_predictions(path)}
    fused_scores, scored_sids = fusion_stage(predictions, fusion_config, config, None, ws.labels)
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
        path = pred_dir / f"{row_id}_predictions.csv"
        write_predictions(path, rows)
        print(f"{row_id}: {len(rows)} fused predictions -> {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _load_config_or_die(args)
    path = Path(args.predictions)
    if not path.exists():
        raise SystemExit2(f"predictions file not found: {path}")
    cohort = read_cohort_csv(path, cohort_id=args.cohort_id)
    result = evaluate_cohort(cohort, config.bootstrap("cli_eval", args.cohort_id), workers=config.workers)
    print(
        f"{args.cohort_id}: AUROC {format_cell(result.auroc, result.ci_low, result.ci_high)} "
        f"(n={result.n}, n_boot={result.n_boot}, dropped={result.n_dropped_replicates}, "
        f"significant_vs_0.5={str(significance_vs_random(result)).lower()})"
    )
    return EXIT_OK


def cmd_run(args) -> int:
    config = _load_config_or_die(args)
    result = run_pipeline(config)
    print(result.report.to_text())
    print(f"outputs written to {result.output_root}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stainfuse", description=__doc__)
    parser.add_argument("--verbose", "-v", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", "-c", required=True, help="pipeline config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=None, help="worker threads (must not change results)")
        p.add_argument("--out", default=None, help="override the output root")

    p = sub.add_parser("synth", help="generate the synthetic three-site cohorts")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tessellate", help="write tile PNGs and the tile manifest CSV")
    common(p)
    p.set_defaults(func=cmd_tessellate)

    p = sub.add_parser("train", help="train scorers and select decision thresholds")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score evaluation slides with trained models")
    common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("aggregate", help="aggregate tile scores into slide predictions with CIs")
    common(p)
    p.add_argument("--scores", default=None, help="directory of tile-score CSVs (default: <out>/scores)")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("fuse", help="fuse per-model slide predictions")
    common(p)
    p.add_argument("--fusion-config", default=None, help="fusion config JSON (default: <out>/fusion_models.json)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="evaluate a cohort predictions CSV (slide_id,score,label)")
    common(p)
    p.add_argument("--predictions", required=True, help="cohort predictions CSV")
    p.add_argument("--cohort-id", default="cohort", help="cohort name for the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="run the full experiment end to end")
    common(p)
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except SystemExit2 as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
