"""
Command-line interface
face3d/cli.py

    python -m face3d [--config PATH] [--log-level LEVEL] <command> [--out DIR] [--seed INT] [--jobs N] ...

Commands communicate only through files. Every command writes run.json into
its output directory. Exit codes: 0 success, 2 configuration error,
3 data error, 4 internal error.
"""

from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence
import argparse
import logging
import time

import pandas as pd
from joblib import Parallel, delayed

from . import __version__
from .analysis.evaluation import (
    LabeledFeatureSet,
    decision_histograms,
    expression_based_eval,
    expression_specific_matrix,
    loo_subject_cv,
)
from .analysis.features import (
    expression_delta,
    form_subject_pairs,
    landmark_coord_features,
    landmark_distance_features,
)
from .analysis.reference import reference_rate
from .analysis.report import (
    AUTO,
    FixedScale,
    Palette,
    render_grid,
    write_colored_mesh,
    grid_vertex_colors,
    write_histograms,
    write_significance,
    write_tables,
)
from .analysis.stats import demographic_balance, mean_abs_deformation, saliency_map, variance_spectra
from .analysis.synth import generate_corpus
from .errors import ConfigError, EmptyGroup, Face3DError, InternalError, IoError, TooFewSamples
from .factory import ClassifierFactory, ConfigurationManager, LoggerManager, RunConfig
from .geometry.curves import (
    FeatureKind,
    FeatureTable,
    extract_radial_curves,
    grid_to_vector,
    read_feature_csv,
    read_grid_csv,
    vector_to_grid,
    write_feature_csv,
    write_grid_csv,
)
from .geometry.mesh_io import (
    NON_NEUTRAL,
    ScanRecord,
    filter_manifest,
    load_landmarks,
    load_manifest,
    load_mesh,
    save_manifest,
)
from .geometry.preprocess import Preprocessor, detect_nosetip
from .jsonio import CSV_FLOAT_FORMAT, dump_json
from .observer import ExclusionRecorder, PipelineEvents, ProgressLoggerObserver

logger = logging.getLogger(__name__)

FEATURE_FILES = {
    FeatureKind.DEPTH: "features_depth.csv",
    FeatureKind.DELTA_DEPTH: "features_delta.csv",
    FeatureKind.COORD: "features_coord.csv",
    FeatureKind.DELTA_COORD: "features_delta_coord.csv",
    FeatureKind.DIST: "features_dist.csv",
    FeatureKind.DELTA_DIST: "features_delta_dist.csv",
}
EXPERIMENTS = ("general", "matrix", "expression_based", "histograms")
ANALYSES = ("ttest", "pca", "balance", "deformation")
_REFERENCE_KIND = {FeatureKind.DEPTH: "depth", FeatureKind.COORD: "coord", FeatureKind.DIST: "dist"}


# ============ shared helpers ============

def write_run_json(out_dir: Path, command: str, config: RunConfig) -> Path:
    return dump_json({
        "command": command,
        "toolkit_version": __version__,
        "master_seed": config.master_seed,
        "config": config.to_dict(),
    }, out_dir / "run.json")


def _write_csv(df: pd.DataFrame, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        raise IoError(f"Cannot write {path.name}: {e}", {"path": str(path)}) from e
    return path


def write_exclusions(out_dir: Path, records: Sequence[Dict[str, str]]) -> Path:
    return _write_csv(pd.DataFrame(list(records), columns=["scan_id", "subject_id", "reason"]),
                      out_dir / "excluded.csv")


def _pipeline_events() -> PipelineEvents:
    events = PipelineEvents()
    events.attach(ProgressLoggerObserver())
    return events


def _load_features(config: RunConfig, kind: FeatureKind, records: Sequence[ScanRecord]) -> LabeledFeatureSet:
    path = config.require("features_dir") / FEATURE_FILES[kind]
    if not path.exists():
        raise ConfigError(f"Feature file {path} not found; run the features command first")
    table = read_feature_csv(path, config.curves.shape)
    if table.kind is not kind:
        raise ConfigError(f"{path} holds {table.kind.value} features, expected {kind.value}")
    return LabeledFeatureSet.from_table(table, records)


def _experiment_echo(config: RunConfig, kind: FeatureKind) -> Dict[str, Any]:
    return {
        "learn": config.learn.to_dict(),
        "feature_file": FEATURE_FILES[kind],
        "grid_shape": list(config.curves.shape),
    }


def _check_audit(report) -> None:
    if not report.verify_subject_independence():
        raise InternalError("A test scan was classified by a model trained on its own subject")
    if report.recompute_rates() != report.rates:
        raise InternalError("Stored rates differ from rates recomputed from per-scan decisions")


# ============ commands ============

def cmd_synth(config: RunConfig, args: argparse.Namespace) -> int:
    """Generate a synthetic corpus into the output directory"""
    out_dir = config.require("out_dir")
    write_run_json(out_dir, "synth", config)
    manifest = generate_corpus(config.synth, out_dir, n_jobs=config.jobs)
    logger.info(f"Synthetic corpus manifest: {manifest}")
    return 0


def cmd_manifest(config: RunConfig, args: argparse.Namespace) -> int:
    """Validate a manifest; with --filter, apply the dataset filter"""
    manifest_path = config.require("manifest")
    out_dir = config.require("out_dir")
    records = load_manifest(manifest_path, allow_duplicates=args.filter)
    write_run_json(out_dir, "manifest", config)
    if not args.filter:
        return 0
    kept, excluded = filter_manifest(records, config.max_age, config.require_pair)
    save_manifest(kept, out_dir / "manifest.filtered.csv")
    write_exclusions(out_dir, [{"scan_id": r.scan_id, "subject_id": r.subject_id, "reason": reason}
                               for r, reason in excluded])
    logger.info(f"Manifest filter kept {len(kept)} of {len(records)} scans "
                f"({len({r.subject_id for r in kept})} subjects)")
    return 0


def _extract_scan(record: ScanRecord, preprocessor: Preprocessor, curve_config) -> Dict[str, Any]:
    try:
        scan = preprocessor.run(load_mesh(record.mesh_path))
        grid = extract_radial_curves(scan.mesh, scan.nosetip, curve_config)
    except Face3DError as e:
        raise e.with_context(scan_id=record.scan_id)
    return {
        "vector": grid_to_vector(grid),
        "icp_updates": len(scan.residual_history) - 1,
        "residual_mm": scan.residual_history[-1],
        "rotation_deg": scan.transform.angle_deg,
        "invalid_cells": int((~grid.validity).sum()),
    }


def _landmark_tables(records: Sequence[ScanRecord], nosetip_index: int, out_dir: Path) -> None:
    missing = [r for r in records if r.landmarks_path is None]
    if missing:
        logger.warning(f"{len(missing)} scans have no landmark file; skipping landmark features")
        return
    coord, dist = {}, {}
    for record in records:
        try:
            landmarks = load_landmarks(record.landmarks_path, nosetip_index)
        except Face3DError as e:
            raise e.with_context(scan_id=record.scan_id)
        coord[record.scan_id] = landmark_coord_features(landmarks)
        dist[record.scan_id] = landmark_distance_features(landmarks)
    for kind, vectors in ((FeatureKind.COORD, coord), (FeatureKind.DIST, dist)):
        write_feature_csv(FeatureTable.from_vectors([(r.scan_id, vectors[r.scan_id]) for r in records]),
                          out_dir / FEATURE_FILES[kind])
        pairs = form_subject_pairs(records, vectors)
        if pairs:
            deltas = [(p.expressive[0].scan_id, expression_delta(p)) for p in pairs]
            write_feature_csv(FeatureTable.from_vectors(deltas), out_dir / FEATURE_FILES[kind.delta])


def cmd_features(config: RunConfig, args: argparse.Namespace) -> int:
    """Preprocess every scan, extract depth grids and write the feature CSVs"""
    manifest_path = config.require("manifest")
    out_dir = config.require("out_dir")
    records = load_manifest(manifest_path)
    template_path = Path(config.preprocess.template_path) if config.preprocess.template_path \
        else manifest_path.parent / "template.ply"
    if not template_path.exists():
        raise ConfigError(f"Template mesh {template_path} not found; set preprocess.template_path")
    preprocessor = Preprocessor(load_mesh(template_path), config.preprocess)
    write_run_json(out_dir, "features", config)

    events = _pipeline_events()
    recorder = ExclusionRecorder()
    events.attach(recorder)

    results = Parallel(n_jobs=config.jobs)(
        delayed(_extract_scan)(record, preprocessor, config.curves) for record in records
    )
    vectors = {}
    for record, result in zip(records, results):
        vectors[record.scan_id] = result["vector"]
        events.scan_processed(record.scan_id, residual_mm=result["residual_mm"])
    write_feature_csv(FeatureTable.from_vectors([(r.scan_id, vectors[r.scan_id]) for r in records]),
                      out_dir / FEATURE_FILES[FeatureKind.DEPTH])
    _write_csv(pd.DataFrame({
        "scan_id": [r.scan_id for r in records],
        "icp_updates": [res["icp_updates"] for res in results],
        "residual_mm": [res["residual_mm"] for res in results],
        "rotation_deg": [res["rotation_deg"] for res in results],
        "invalid_cells": [res["invalid_cells"] for res in results],
    }), out_dir / "preprocess.csv")

    pairs = form_subject_pairs(records, vectors, events)
    if pairs:
        deltas = [(p.expressive[0].scan_id, expression_delta(p)) for p in pairs]
        write_feature_csv(FeatureTable.from_vectors(deltas), out_dir / FEATURE_FILES[FeatureKind.DELTA_DEPTH])
    else:
        logger.warning("No neutral/expressive scan pairs; no difference features written")

    _landmark_tables(records, config.nosetip_index, out_dir)
    write_exclusions(out_dir, recorder.sorted_records())
    return 0


def _eval_general(config, records, strategy, events, out_dir) -> None:
    kind = config.feature_kind
    features = _load_features(config, kind, records)
    report = loo_subject_cv(features, strategy, config.master_seed, n_jobs=config.jobs, events=events,
                            config=_experiment_echo(config, kind))
    _check_audit(report)
    summary = report.to_dict()
    summary["reference_overall_rate"] = reference_rate(_REFERENCE_KIND[kind], strategy.get_classifier_name())
    dump_json(summary, out_dir / "report.json")
    write_tables({"general": report}, None, [], out_dir)


def _eval_matrix(config, records, strategy, events, out_dir) -> None:
    kind = config.feature_kind
    features = _load_features(config, kind, records)
    matrix = expression_specific_matrix(features, strategy, config.master_seed, n_jobs=config.jobs,
                                        events=events, config=_experiment_echo(config, kind))
    if not matrix.verify_subject_independence():
        raise InternalError("A test scan was classified by a model trained on its own subject")
    dump_json(matrix.to_dict(), out_dir / "matrix.json")
    write_tables({}, matrix, [], out_dir)
    render_grid(matrix.accuracy_grid(), Palette.GRAYSCALE, FixedScale(0.0, 1.0), upscale=16).save(
        out_dir / "matrix.ppm")


def _eval_expression_based(config, records, strategy, events, out_dir) -> None:
    kind = config.feature_kind.delta
    features = _load_features(config, kind, records)
    reports = expression_based_eval(features, strategy, config.master_seed, n_jobs=config.jobs, events=events,
                                    config=_experiment_echo(config, kind))
    summary = {}
    for expression, report in reports.items():
        _check_audit(report)
        entry = report.to_dict()
        entry["reference_overall_rate"] = reference_rate(_REFERENCE_KIND[config.feature_kind],
                                                         strategy.get_classifier_name(), expression)
        summary[expression.value] = entry
    dump_json(summary, out_dir / "expression_based.json")
    write_tables({e.value: r for e, r in reports.items()}, None, [], out_dir)


def _eval_histograms(config, records, strategy, events, out_dir) -> None:
    kind = config.feature_kind
    features = _load_features(config, kind, records)
    report = loo_subject_cv(features, strategy, config.master_seed, n_jobs=config.jobs, events=events,
                            config=_experiment_echo(config, kind))
    _check_audit(report)
    histograms = decision_histograms(report, records, config.bins)
    dump_json(report.to_dict(), out_dir / "report.json")
    dump_json({e.value: h.to_dict() for e, h in histograms.items()}, out_dir / "histograms.json")
    write_histograms(histograms, out_dir)


_EXPERIMENT_RUNNERS: Dict[str, Callable] = {
    "general": _eval_general,
    "matrix": _eval_matrix,
    "expression_based": _eval_expression_based,
    "histograms": _eval_histograms,
}


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> int:
    """Run one evaluation protocol on previously extracted features"""
    records = load_manifest(config.require("manifest"))
    out_dir = config.require("out_dir")
    config.require("features_dir")
    # folds run in parallel, so each trainer stays single-threaded
    strategy = ClassifierFactory.create_classifier(config.learn.classifier, config.learn, n_jobs=1)
    write_run_json(out_dir, f"eval {args.experiment}", config)
    _EXPERIMENT_RUNNERS[args.experiment](config, records, strategy, _pipeline_events(), out_dir)
    return 0


def _analyze_ttest(config, records, out_dir) -> None:
    features = _load_features(config, FeatureKind.DELTA_DEPTH, records)
    densities = {}
    for expression in NON_NEUTRAL:
        subset = features.for_expression(expression)
        if len(subset) == 0:
            continue
        try:
            sig = saliency_map(subset.X, subset.genders, config.alphas, config.curves.shape)
        except TooFewSamples as e:
            logger.warning(f"Skipping saliency map for {expression.value}: {e}")
            continue
        write_significance(sig, out_dir, prefix=f"saliency_{expression.value}")
        densities[expression.value] = {f"{a:g}": sig.density(a) for a in sig.alphas}
    if not densities:
        raise EmptyGroup("No expression has enough scans per gender for a saliency map")
    dump_json(densities, out_dir / "saliency.json")


def _analyze_pca(config, records, out_dir) -> None:
    features = _load_features(config, FeatureKind.DELTA_DEPTH, records)
    spectra = variance_spectra(features)
    if not spectra:
        raise EmptyGroup("No (gender, expression) group has two or more scans")
    write_tables({}, None, spectra, out_dir)


def _analyze_balance(config, records, out_dir) -> None:
    report = demographic_balance(records)
    dump_json(asdict(report), out_dir / "balance.json")
    logger.info(f"Demographic balance: age p={report.age_p:.4f}, ethnicity p={report.ethnicity_p:.4f}")


def _analyze_deformation(config, records, out_dir) -> None:
    features = _load_features(config, FeatureKind.DELTA_DEPTH, records)
    maps = mean_abs_deformation(features, config.curves.shape)
    if not maps:
        raise EmptyGroup("No expressive difference features to summarise")
    peak = max(float(grid.max()) for grid in maps.values())
    scale = FixedScale(0.0, peak) if peak > 0 else AUTO
    for (gender, expression), grid in maps.items():
        stem = f"deformation_{gender.value}_{expression.value}"
        write_grid_csv(grid, out_dir / f"{stem}.csv", "mean_abs_mm")
        render_grid(grid, Palette.HEAT, scale, upscale=4).save(out_dir / f"{stem}.ppm")


_ANALYSIS_RUNNERS: Dict[str, Callable] = {
    "ttest": _analyze_ttest,
    "pca": _analyze_pca,
    "balance": _analyze_balance,
    "deformation": _analyze_deformation,
}


def cmd_analyze(config: RunConfig, args: argparse.Namespace) -> int:
    """Saliency maps, variance spectra, demographic balance, deformation maps"""
    records = load_manifest(config.require("manifest"))
    out_dir = config.require("out_dir")
    write_run_json(out_dir, f"analyze {args.analysis}", config)
    _ANALYSIS_RUNNERS[args.analysis](config, records, out_dir)
    return 0


def cmd_render(config: RunConfig, args: argparse.Namespace) -> int:
    """Render a feature row or a per-cell grid CSV as a PPM image, optionally painted on a mesh"""
    source = Path(args.source)
    if not source.exists():
        raise ConfigError(f"Render source {source} not found")
    out_dir = config.require("out_dir")
    try:
        columns = list(pd.read_csv(source, nrows=0).columns)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"Render source {source} is not a CSV table: {e}") from e

    if columns and columns[0] == "scan_id":
        table = read_feature_csv(source, config.curves.shape)
        if not table.kind.is_depth:
            raise ConfigError(f"{table.kind.value} features have no curve grid to render")
        scan_id = args.scan_id or table.scan_ids[0]
        if scan_id not in table.scan_ids:
            raise ConfigError(f"Scan {scan_id} is not in {source}")
        grid = vector_to_grid(table.vector(scan_id))
        stem = f"{source.stem}_{scan_id}"
    else:
        grid = read_grid_csv(source, args.column)
        stem = source.stem

    scale = AUTO
    if args.vmin is not None or args.vmax is not None:
        if args.vmin is None or args.vmax is None:
            raise ConfigError("--vmin and --vmax must be given together")
        scale = FixedScale(args.vmin, args.vmax)
    palette = Palette(args.palette)
    write_run_json(out_dir, "render", config)
    render_grid(grid, palette, scale, args.upscale).save(out_dir / f"{stem}.ppm")

    if args.mesh:
        mesh = load_mesh(args.mesh)
        curves = config.curves
        if grid.shape != curves.shape:
            curves = type(curves)(n_curves=grid.shape[0], n_points=grid.shape[1], r_max_mm=curves.r_max_mm,
                                  support_radius_mm=curves.support_radius_mm, n_neighbors=curves.n_neighbors)
        colors = grid_vertex_colors(mesh, detect_nosetip(mesh), grid, curves, palette, scale)
        write_colored_mesh(mesh, colors, out_dir / f"{stem}_colored.ply")
    return 0


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "synth": cmd_synth,
    "manifest": cmd_manifest,
    "features": cmd_features,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "render": cmd_render,
}


# ============ argument parsing ============

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="face3d", description="Expression-aware 3D face gender analysis toolkit")
    parser.add_argument("--config", type=Path, help="key=value configuration file with dotted keys")
    parser.add_argument("--log-level", choices=LoggerManager.valid_levels, help="logging level (default INFO)")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (run.out_dir)")
    common.add_argument("--seed", type=int, help="master seed (run.master_seed)")
    common.add_argument("--jobs", type=int, help="parallel workers (run.jobs)")
    common.add_argument("--manifest", help="dataset manifest CSV (run.manifest)")
    common.add_argument("--features", help="directory holding feature CSVs (run.features_dir)")

    commands = parser.add_subparsers(dest="command", required=True)
    synth = commands.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    synth.add_argument("--profile", help="synth.profile: default, null or expression_specific")
    synth.add_argument("--n-subjects", type=int, help="synth.n_subjects")

    manifest = commands.add_parser("manifest", parents=[common], help="validate or filter a manifest")
    manifest.add_argument("--filter", action="store_true",
                          help="apply the age / first-scan / neutral-pair filter and write manifest.filtered.csv")

    commands.add_parser("features", parents=[common], help="extract depth, difference and landmark features")

    evaluate = commands.add_parser("eval", parents=[common], help="run an evaluation protocol")
    evaluate.add_argument("experiment", choices=EXPERIMENTS)

    analyze = commands.add_parser("analyze", parents=[common], help="statistical analysis of features")
    analyze.add_argument("analysis", choices=ANALYSES)

    render = commands.add_parser("render", parents=[common], help="render a feature row or grid CSV")
    render.add_argument("source", help="feature CSV (scan_id,...) or grid CSV (curve,point,value)")
    render.add_argument("--scan-id", help="row of a feature CSV to render (default: first)")
    render.add_argument("--column", help="value column of a grid CSV (default: third column)")
    render.add_argument("--palette", choices=[p.value for p in Palette], default=Palette.HEAT.value)
    render.add_argument("--vmin", type=float)
    render.add_argument("--vmax", type=float)
    render.add_argument("--upscale", type=int, default=4)
    render.add_argument("--mesh", help="PLY/XYZ mesh to paint with the grid (per-vertex colour PLY)")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {
        "run.out_dir": args.out,
        "run.master_seed": args.seed,
        "run.jobs": args.jobs,
        "run.manifest": args.manifest,
        "run.features_dir": args.features,
    }
    if args.command == "synth":
        overrides["synth.profile"] = args.profile
        overrides["synth.n_subjects"] = args.n_subjects
    return overrides


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        logger_manager = LoggerManager(args.log_level)
    except ConfigError as e:
        parser.error(str(e))

    started = time.monotonic()
    exit_code = 0
    try:
        config = ConfigurationManager(args.config, overrides=_overrides(args)).build()
        logger_manager.log_run_start(args.command, config)
        exit_code = COMMANDS[args.command](config, args)
    except Face3DError as e:
        logger.error(f"{type(e).__name__}: {e}")
        exit_code = e.exit_code
    except Exception as e:
        logger_manager.log_error(e, f"face3d {args.command}", {"argv": argv})
        exit_code = InternalError.exit_code
    finally:
        logger_manager.log_run_end(args.command, exit_code, time.monotonic() - started)
        logger_manager.close()
    return exit_code
