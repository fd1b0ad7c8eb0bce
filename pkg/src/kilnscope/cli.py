"""Command-line entry point: ``kilnscope <subcommand> ...``.

Settings resolve in three layers: built-in defaults, then the matching
section of ``--config <json>``, then explicit flags. Exit codes: 0 ok,
1 usage/config/IO error, 2 partial failure, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import ConfigError, KilnError, NumericalError
from .graph import DEFAULT_BUFFER_PX, DEFAULT_K, build_graph, read_graph, write_graph
from .metrics import (DEFAULT_IOU_THRESHOLD, detection_report, load_boxes, match_detections,
                      node_classification_report)
from .model import (MODELS, TrainConfig, gradient_check, load_checkpoint, metrics_csv,
                    predict, run_replicates, save_checkpoint, split_indices)
from .raster import dumps_geojson, feature_collection, read_grid, read_rgb_tile
from .rsdetect import DetectConfig, Tile, run_pipeline
from .synth import GraphSpec, SceneSpec, gen_graph, gen_raster_scene, write_scene

log = logging.getLogger("kilnscope")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_NUMERICAL = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4
TILE_SUFFIXES = (".kgrd", ".png")

_GRAPH_DEFAULTS = {"k": DEFAULT_K, "buffer_px": DEFAULT_BUFFER_PX, "label_column": "label",
                   "feature_columns": None}
_EVAL_DEFAULTS = {"iou_threshold": DEFAULT_IOU_THRESHOLD}
SECTIONS = ("detect", "graph", "train", "synth", "eval")


# --- config ------------------------------------------------------------------

def load_run_config(path: Optional[str]) -> dict:
    """Read a RunConfig JSON file; unknown sections or keys raise ConfigError."""
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    allowed = {
        "detect": {f.name for f in fields(DetectConfig)},
        "graph": set(_GRAPH_DEFAULTS),
        "train": {f.name for f in fields(TrainConfig)},
        "eval": set(_EVAL_DEFAULTS),
    }
    for name, section in doc.items():
        if not isinstance(section, dict):
            raise ConfigError(f"{path}: section {name!r} must be an object")
        if name == "synth":
            extra = set(section) - {"scene", "graph"}
            if extra:
                raise ConfigError(f"{path}: unknown synth keys {sorted(extra)}")
            _check_keys(section.get("scene", {}), {f.name for f in fields(SceneSpec)}, f"{path}: synth.scene")
            _check_keys(section.get("graph", {}), {f.name for f in fields(GraphSpec)}, f"{path}: synth.graph")
        else:
            _check_keys(section, allowed[name], f"{path}: {name}")
    return doc


def _check_keys(section: dict, allowed: set, where: str) -> None:
    extra = set(section) - allowed
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")


def _resolve(defaults: dict, section: dict, overrides: dict) -> dict:
    out = dict(defaults)
    out.update(section)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _build(cls, values: dict):
    try:
        obj = cls(**values)
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None
    return obj


def _tuple_fields(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _dump_json(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _report(command: str, resolved: dict, body: dict) -> dict:
    return {"tool": "kilnscope", "version": __version__, "command": command,
            "config": resolved, "config_hash": config_hash(resolved), **body}


# --- detect --------------------------------------------------------------------

def discover_tiles(root: Path) -> list[tuple[str, list]]:
    """(tile name, [path per frame]) pairs; frames are sorted subdirectories."""
    if not root.is_dir():
        raise ConfigError(f"input directory not found: {root}")
    base = root / "frames" if (root / "frames").is_dir() else root
    frame_dirs = sorted(d for d in base.iterdir() if d.is_dir())
    if not frame_dirs:
        frame_dirs = [base]
    by_name: dict[str, list] = {}
    for d in frame_dirs:
        for p in sorted(d.iterdir()):
            if p.is_file() and p.suffix.lower() in TILE_SUFFIXES:
                by_name.setdefault(p.stem, []).append(p)
    return sorted(by_name.items())


def _load_tile_frame(path: Path):
    return read_grid(path) if path.suffix.lower() == ".kgrd" else read_rgb_tile(path)


def cmd_detect(args, cfg: dict) -> int:
    overrides = {"jobs": args.jobs, "threshold_scope": args.threshold_scope, "percentile": args.percentile,
                 "height_filter": args.height_filter}
    values = _resolve(asdict(DetectConfig()), cfg.get("detect", {}), overrides)
    config = _build(DetectConfig, values)
    found = discover_tiles(Path(args.input))
    if not found:
        raise ConfigError(f"no tiles found in {args.input}")
    heights = read_grid(args.heights) if args.heights else None

    tiles, failures = [], []
    for name, paths in found:
        try:
            tiles.append(Tile(name, [_load_tile_frame(p) for p in paths]))
        except (KilnError, OSError, ValueError) as exc:
            failures.append({"tile": name, "stage": "read", "error": f"{type(exc).__name__}: {exc}"})
    result = run_pipeline(tiles, heights, config)
    report_body = dict(result.report)
    report_body["failures"] = failures + report_body["failures"]

    collection = feature_collection(result.regions, lambda i, r: {"tile": r.tile})
    Path(args.out).write_text(dumps_geojson(collection) + "\n")
    # worker count changes nothing in the outputs, so it stays out of the provenance
    resolved = {k: v for k, v in asdict(config).items() if k != "jobs"}
    report_path = args.report or str(Path(args.out).with_suffix(".report.json"))
    _dump_json(_report("detect", resolved, report_body), report_path)
    print(f"{len(result.regions)} regions from {report_body['tiles_processed']} tiles -> {args.out}")
    if report_body["failures"]:
        for f in report_body["failures"]:
            print(f"failed: {f['tile']} ({f['stage']}): {f['error']}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# --- graph / train / predict / eval ------------------------------------------------

def cmd_graph_build(args, cfg: dict) -> int:
    overrides = {"k": args.k, "buffer_px": args.buffer_px, "label_column": args.label_column,
                 "feature_columns": args.feature_columns.split(",") if args.feature_columns else None}
    opts = _resolve(_GRAPH_DEFAULTS, cfg.get("graph", {}), overrides)
    rasters = [read_grid(p) for p in args.raster or []]
    names = [Path(p).stem for p in args.raster or []]
    graph = build_graph(args.pois, rasters, k=int(opts["k"]), buffer_px=int(opts["buffer_px"]),
                        feature_columns=opts["feature_columns"], label_column=opts["label_column"],
                        raster_names=names)
    write_graph(graph, args.out)
    print(f"{graph.num_nodes} nodes, {graph.num_edges} edges -> {args.out}")
    return EXIT_OK


def _train_config(args, cfg: dict) -> TrainConfig:
    overrides = {"model": args.model, "seed": args.seed, "epochs": args.epochs,
                 "learning_rate": args.lr, "hidden_dim": args.hidden_dim, "layers": args.layers,
                 "harmonics": args.harmonics, "class_weight_mode": args.class_weights}
    values = _resolve(asdict(TrainConfig()), cfg.get("train", {}), overrides)
    return _build(TrainConfig, values)


def _replicate_path(path: str, r: int, total: int) -> Path:
    p = Path(path)
    return p if total == 1 else p.with_name(f"{p.stem}.r{r}{p.suffix}")


def cmd_train(args, cfg: dict) -> int:
    config = _train_config(args, cfg)
    if args.replicates < 1:
        raise ConfigError("--replicates must be >= 1")
    graph = read_graph(args.graph)
    runs = run_replicates(graph, config, args.replicates)
    scores = [rep.macro_f1 for _, rep in runs]
    for r, (model, rep) in enumerate(runs):
        if args.out:
            save_checkpoint(model, _replicate_path(args.out, r, len(runs)))
        if args.metrics:
            _replicate_path(args.metrics, r, len(runs)).write_text(metrics_csv(model.metrics_log))
    mean, std = float(np.mean(scores)), float(np.std(scores))
    if args.report:
        body = {"replicates": [{"seed": m.config.seed, "best_epoch": m.epoch, "val_macro_f1": m.val_macro_f1,
                                "test": rep.to_dict()} for m, rep in runs],
                "test_macro_f1_mean": mean, "test_macro_f1_std": std}
        _dump_json(_report("train", asdict(config), body), args.report)
    if len(runs) == 1:
        print(f"test macro-F1 {scores[0]:.4f} (best epoch {runs[0][0].epoch})")
    else:
        print(f"test macro-F1 {mean:.4f} ± {std:.4f} over {len(runs)} replicates")
    return EXIT_OK


def predictions_csv(graph, pred: np.ndarray, probs: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "pred"] + [f"prob_{c}" for c in range(probs.shape[1])])
    for node, y, p in zip(graph.nodes, pred, probs):
        writer.writerow([node.id, int(y)] + [repr(float(v)) for v in p])
    return buf.getvalue()


def read_predictions(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not {"id", "pred"} <= set(reader.fieldnames or ()):
            raise ConfigError(f"{path}: predictions need 'id' and 'pred' columns")
        return {int(r["id"]): int(r["pred"]) for r in reader}


def cmd_predict(args, cfg: dict) -> int:
    graph = read_graph(args.graph)
    model = load_checkpoint(args.model)
    pred, probs = predict(graph, model)
    Path(args.out).write_text(predictions_csv(graph, pred, probs))
    print(f"{len(pred)} predictions -> {args.out}")
    return EXIT_OK


def cmd_eval_nodes(args, cfg: dict) -> int:
    graph = read_graph(args.graph)
    model = load_checkpoint(args.model) if args.model else None
    if args.predictions:
        table = read_predictions(args.predictions)
        missing = [n.id for n in graph.nodes if n.id not in table]
        if missing:
            raise ConfigError(f"predictions missing {len(missing)} node ids, first {missing[0]}")
        pred = np.array([table[n.id] for n in graph.nodes])
        num_classes = model.num_classes if model else int(max(graph.labels().max(), pred.max())) + 1
    elif model is not None:
        pred, _ = predict(graph, model)
        num_classes = model.num_classes
    else:
        raise ConfigError("eval-nodes needs --predictions or --model")
    if args.split != "all" and model is None:
        raise ConfigError(f"--split {args.split} needs --model for the stored split")
    idx = split_indices(graph, model, args.split) if model else np.flatnonzero(graph.labels() >= 0)
    rep = node_classification_report(pred[idx], graph.labels()[idx], num_classes)
    print(rep.to_table())
    if args.out:
        _dump_json(_report("eval-nodes", {"split": args.split}, rep.to_dict()), args.out)
    return EXIT_OK


def cmd_eval_detections(args, cfg: dict) -> int:
    opts = _resolve(_EVAL_DEFAULTS, cfg.get("eval", {}), {"iou_threshold": args.iou})
    thr = float(opts["iou_threshold"])
    if not 0 < thr <= 1:
        raise ConfigError("--iou must be in (0, 1]")
    transform = read_grid(args.grid).transform if args.grid else None
    preds = load_boxes(args.pred, transform)
    gts = load_boxes(args.truth, transform)
    result = match_detections(preds, gts, thr)
    rep = detection_report(result)
    print(f"tp {result.tp} fp {result.fp} fn {result.fn}")
    print(f"precision {rep.macro_precision:.4f} recall {rep.macro_recall:.4f} F1 {rep.macro_f1:.4f}")
    if args.out:
        body = rep.to_dict()
        body["pairs"] = [list(p) for p in result.pairs]
        _dump_json(_report("eval-detections", {"iou_threshold": thr}, body), args.out)
    return EXIT_OK


# --- synth / gradcheck -----------------------------------------------------------

def cmd_synth(args, cfg: dict) -> int:
    section = cfg.get("synth", {})
    if args.kind == "raster":
        overrides = {"seed": args.seed, "width": args.width, "height": args.height, "frames": args.frames,
                     "kiln_count": args.kilns, "kiln_radius_px": args.radius,
                     "activity_probability": args.activity, "distractor_count": args.distractors}
        values = _tuple_fields(_resolve(asdict(SceneSpec()), section.get("scene", {}), overrides))
        spec = _build(SceneSpec, values)
        scene = gen_raster_scene(spec)
        write_scene(scene, args.out, tile_size=args.tile_size, fmt=args.format)
        print(f"{spec.kiln_count} kilns, {len(scene.frames)} frames -> {args.out}")
        return EXIT_OK
    overrides = {"seed": args.seed, "node_count": args.nodes, "k": args.k,
                 "anisotropy_axis_deg": args.axis, "class_rule": args.rule,
                 "noise_features": args.noise_features}
    values = _resolve(asdict(GraphSpec()), section.get("graph", {}), overrides)
    spec = _build(GraphSpec, values)
    graph, _ = gen_graph(spec)
    write_graph(graph, args.out)
    print(f"{graph.num_nodes} nodes ({spec.class_rule}) -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: dict) -> int:
    err = gradient_check(seed=args.seed, layers=args.layers, harmonics=args.harmonics,
                         hidden_dim=args.hidden_dim, eps=args.eps, model=args.model)
    print(f"max relative error {err:.3e}")
    return EXIT_OK if math.isfinite(err) and err < GRADCHECK_TOLERANCE else EXIT_NUMERICAL


# --- parser ----------------------------------------------------------------------

def _opt(p, flag: str, default, help: str, **kw):
    """A flag that defaults to None so config values survive; help shows the effective default."""
    p.add_argument(flag, default=None, help=f"{help} (default: {default})", **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kilnscope", description="Brick-kiln detection toolkit.")
    parser.add_argument("--version", action="version", version=f"kilnscope {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="RunConfig JSON; explicit flags override it (default: none)")
        p.set_defaults(func=fn)
        return p

    d = DetectConfig()
    p = command("detect", cmd_detect, "Detect kilns in a directory of per-frame tiles.")
    p.add_argument("--input", required=True, help="directory with one subdirectory per frame")
    p.add_argument("--heights", help="KGRD building-height grid (default: none)")
    p.add_argument("--out", required=True, help="output GeoJSON")
    p.add_argument("--report", help="run report JSON (default: <out>.report.json)")
    _opt(p, "--jobs", "logical cores", "worker threads", type=int)
    _opt(p, "--threshold-scope", d.threshold_scope, "Otsu pooling", choices=("scene", "tile"))
    _opt(p, "--percentile", d.percentile, "temporal composite percentile", type=float)
    _opt(p, "--height-filter", d.height_filter, "tall-structure filter", choices=("auto", "on", "off"))

    p = command("graph-build", cmd_graph_build, "Build a k-NN POI graph from CSV and rasters.")
    p.add_argument("--pois", required=True, help="CSV with id, lon, lat, features, optional label")
    p.add_argument("--raster", action="append", help="KGRD raster to sample (repeatable; default: none)")
    p.add_argument("--out", required=True, help="output graph JSON")
    _opt(p, "--k", DEFAULT_K, "neighbours per node", type=int)
    _opt(p, "--buffer-px", DEFAULT_BUFFER_PX, "NoData imputation window half-size", type=int)
    _opt(p, "--label-column", "label", "label column name")
    _opt(p, "--feature-columns", "all non-reserved columns", "comma-separated feature columns")

    t = TrainConfig()

    def train_flags(p):
        _opt(p, "--model", t.model, "architecture", choices=MODELS)
        _opt(p, "--seed", t.seed, "random seed", type=int)
        _opt(p, "--epochs", t.epochs, "training epochs", type=int)
        _opt(p, "--lr", t.learning_rate, "Adam learning rate", type=float)
        _opt(p, "--hidden-dim", t.hidden_dim, "hidden width", type=int)
        _opt(p, "--layers", t.layers, "message-passing layers", type=int)
        _opt(p, "--harmonics", t.harmonics, "Fourier harmonics in the directional kernel", type=int)
        _opt(p, "--class-weights", t.class_weight_mode, "loss weighting",
             choices=("uniform", "inverse_frequency"))

    p = command("train", cmd_train, "Train a node classifier on a graph JSON.")
    p.add_argument("--graph", required=True, help="graph JSON with labels")
    train_flags(p)
    p.add_argument("--replicates", type=int, default=1, help="seeded replicates (default: 1)")
    p.add_argument("--out", help="checkpoint JSON (default: none)")
    p.add_argument("--metrics", help="per-epoch metrics CSV (default: none)")
    p.add_argument("--report", help="run report JSON (default: none)")

    p = command("predict", cmd_predict, "Predict node classes with a checkpoint.")
    p.add_argument("--graph", required=True, help="graph JSON")
    p.add_argument("--model", required=True, help="checkpoint JSON")
    p.add_argument("--out", required=True, help="predictions CSV")

    p = command("eval-nodes", cmd_eval_nodes, "Macro precision/recall/F1 for node predictions.")
    p.add_argument("--graph", required=True, help="graph JSON with labels")
    p.add_argument("--model", help="checkpoint JSON; supplies splits and, without --predictions, predictions")
    p.add_argument("--predictions", help="predictions CSV (default: predict with --model)")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"),
                   help="nodes to score (default: test)")
    p.add_argument("--out", help="report JSON (default: none)")

    p = command("eval-detections", cmd_eval_detections, "IoU-matched detection precision/recall/F1.")
    p.add_argument("--pred", required=True, help="predicted GeoJSON or x0,y0,x1,y1 CSV")
    p.add_argument("--truth", required=True, help="ground-truth GeoJSON or CSV")
    p.add_argument("--grid", help="KGRD whose transform maps GeoJSON to pixels (default: match in lon/lat)")
    _opt(p, "--iou", DEFAULT_IOU_THRESHOLD, "match threshold (inclusive)", type=float)
    p.add_argument("--out", help="report JSON (default: none)")

    p = command("synth", cmd_synth, "Generate a synthetic raster scene or POI graph.")
    p.add_argument("kind", choices=("raster", "graph"))
    p.add_argument("--out", required=True, help="output directory (raster) or graph JSON (graph)")
    s, g = SceneSpec(), GraphSpec()
    _opt(p, "--seed", s.seed, "random seed", type=int)
    _opt(p, "--width", s.width, "raster: scene width in pixels", type=int)
    _opt(p, "--height", s.height, "raster: scene height in pixels", type=int)
    _opt(p, "--frames", s.frames, "raster: timestamps", type=int)
    _opt(p, "--kilns", s.kiln_count, "raster: planted kilns", type=int)
    _opt(p, "--radius", s.kiln_radius_px, "raster: kiln radius in pixels", type=int)
    _opt(p, "--activity", s.activity_probability, "raster: per-frame kiln activity probability", type=float)
    _opt(p, "--distractors", s.distractor_count, "raster: tall red roofs", type=int)
    p.add_argument("--tile-size", type=int, default=None, help="raster: split into square tiles (default: whole scene)")
    p.add_argument("--format", default="kgrd", choices=("kgrd", "png"), help="raster: tile format (default: kgrd)")
    _opt(p, "--nodes", g.node_count, "graph: node count", type=int)
    _opt(p, "--k", g.k, "graph: neighbours per node", type=int)
    _opt(p, "--axis", g.anisotropy_axis_deg, "graph: anisotropy axis in degrees", type=float)
    _opt(p, "--rule", g.class_rule, "graph: labelling rule", choices=("anisotropic", "feature_separable"))
    _opt(p, "--noise-features", g.noise_features, "graph: label-free noise columns", type=int)

    p = command("gradcheck", cmd_gradcheck, "Finite-difference check of the model gradients.")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--layers", type=int, default=2, help="layers (default: 2)")
    p.add_argument("--harmonics", type=int, default=4, help="kernel harmonics (default: 4)")
    p.add_argument("--hidden-dim", type=int, default=8, help="hidden width (default: 8)")
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step (default: 1e-05)")
    p.add_argument("--model", default="climategraph", choices=MODELS, help="architecture (default: climategraph)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config)
        return args.func(args, cfg)
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (KilnError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
