"""Command-line entry point: ``mapmeta <command> [options]``.

Exit status is 0 on success, 1 when some sheets failed, 2 for configuration
or input-contract errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .config import ConfigError, PipelineConfig, load_config
from .consensus import read_edges, write_edges
from .evaluation import DEFAULT_HIST_EDGES, EvalInputError, evaluate_dirs
from .features import write_embeddings
from .geolocalizer import MODES, GeoEstimate, read_estimates, write_estimates
from .ingest import MapSheet, SheetFormatError, SheetValidationError, iter_sheet_files, parse_sheet, write_sheet
from .linked_metadata import build_map_record, emit_rdf, load_record, match_phrases, query_maps
from .phrase_graph import LocationPhrase, read_phrases, write_phrases
from .pipeline import (
    Resources,
    geo_stage,
    link_stage,
    load_gazetteer,
    load_resources,
    load_table,
    make_geocoder,
    phrase_stage,
    run_batch,
)
from .synth import SynthConfig, fall_river_sheet, write_corpus
from .textual_linker import LinkerModel, TrainingDivergedError, UntrainableSheetError, train_with_embeddings

log = logging.getLogger("mapmeta")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2

# argparse dest -> PipelineConfig field
CONFIG_FLAGS = {
    "embeddings": "embeddings", "dim": "embed_dim", "oov": "oov", "gazetteer": "gazetteer",
    "checkpoint": "checkpoint", "prob_maps": "prob_maps", "geocoder_url": "geocoder_url",
    "rate_limit": "rate_limit", "text_threshold": "text_threshold", "theta": "theta",
    "binarize_p": "binarize_p", "raster_size": "raster_size", "component": "component_mode",
    "mode": "geo_modes", "match_mode": "match_mode", "eps_km": "eps_km", "min_pts": "min_pts",
    "radius_km": "radius_km", "min_similarity": "min_similarity", "epochs": "epochs", "lr": "lr",
    "seed": "seed", "workers": "workers",
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration (flags override --config)")
    g.add_argument("--config", help="JSON file of configuration values")
    g.add_argument("--embeddings", help="word-vector text file")
    g.add_argument("--dim", type=int, help="expected embedding dimension")
    g.add_argument("--oov", choices=("zeros", "hash"), help="out-of-vocabulary policy")
    g.add_argument("--gazetteer", help="gazetteer TSV")
    g.add_argument("--checkpoint", help="linker checkpoint")
    g.add_argument("--prob-maps", help="directory of external probability maps")
    g.add_argument("--geocoder-url", help="HTTP geocoder endpoint (env MAPMETA_GEOCODER_URL)")
    g.add_argument("--rate-limit", type=float, help="geocoder requests per second")
    g.add_argument("--text-threshold", type=float)
    g.add_argument("--theta", type=float, help="consensus threshold")
    g.add_argument("--binarize-p", type=float, help="probability-map binarization level")
    g.add_argument("--raster-size", type=int)
    g.add_argument("--component", choices=("scc", "wcc"))
    g.add_argument("--mode", action="append", choices=MODES, help="geocoding mode (repeatable)")
    g.add_argument("--match-mode", choices=MODES, help="estimate used for entity matching")
    g.add_argument("--eps-km", type=float)
    g.add_argument("--min-pts", type=int)
    g.add_argument("--radius-km", type=float)
    g.add_argument("--min-similarity", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    p.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="mapmeta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name: str, func: Callable, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help, description=help)
        p.set_defaults(func=func)
        return p

    p = cmd("synth", cmd_synth, "generate a synthetic annotated corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-sheets", type=int, default=SynthConfig.n_sheets)
    p.add_argument("--fall-river", action="store_true", help="also write the Fall/River/Burgettville sheet")

    p = cmd("train", cmd_train, "train the textual linker")
    p.add_argument("sheets", nargs="*", help="sheet files or directories")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", help="write per-epoch losses as CSV")
    p.add_argument("--tune-embeddings", metavar="PATH",
                   help="also fine-tune the word vectors and write them to PATH")

    p = cmd("link", cmd_link, "link text regions (writes <id>.edges and <id>.candidates)")
    p.add_argument("sheets", nargs="*")
    p.add_argument("--out", required=True)

    p = cmd("phrases", cmd_phrases, "group linked regions into phrases")
    p.add_argument("sheets", nargs="*")
    p.add_argument("--edges", required=True, help="directory of <id>.edges files")
    p.add_argument("--out", required=True)

    p = cmd("geolocate", cmd_geolocate, "estimate each map's location from its phrases")
    p.add_argument("sheets", nargs="*", help="annotated sheets; give them so word2paragraph uses OCR order")
    p.add_argument("--phrases", required=True, help="directory of <id>.phrases files")
    p.add_argument("--out", required=True)

    p = cmd("match", cmd_match, "link phrases to gazetteer entities")
    p.add_argument("--phrases", required=True)
    p.add_argument("--geo", required=True, help="directory of <id>.geo files")
    p.add_argument("--out", required=True)

    p = cmd("emit-rdf", cmd_emit_rdf, "write one RDF record per map")
    p.add_argument("--phrases", required=True)
    p.add_argument("--geo", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("ntriples", "xml"), default="ntriples")
    p.add_argument("--point-format", choices=("latlng", "wkt"), default="latlng")

    p = cmd("query", cmd_query, "find maps overlapping entities of a type")
    p.add_argument("--records", required=True, help="directory of <id>.nt records")
    p.add_argument("--type")
    p.add_argument("--min-elevation", type=float, help="inclusive lower bound in metres")

    p = cmd("eval", cmd_eval, "score predictions against annotated sheets")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--edge-mode", choices=("all_pairs", "chain"), default="all_pairs")
    p.add_argument("--hist-edges", type=float, nargs="+", default=list(DEFAULT_HIST_EDGES))

    p = cmd("pipeline", cmd_pipeline, "run every stage on a batch of sheets")
    p.add_argument("sheets", nargs="*")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    return parser


# -- helpers ---------------------------------------------------------------

def _config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {field: getattr(args, dest) for dest, field in CONFIG_FLAGS.items()}
    return load_config(args.config, overrides)


def _sheet_paths(args: argparse.Namespace, cfg: PipelineConfig) -> list[Path]:
    sources = args.sheets or ([cfg.sheets_dir] if cfg.sheets_dir else [])
    if not sources:
        raise ConfigError("no sheets given")
    missing = [s for s in sources if not Path(s).exists()]
    if missing:
        raise ConfigError(f"no such sheet path: {', '.join(map(str, missing))}")
    paths = iter_sheet_files(sources)
    if not paths:
        raise ConfigError("no *.sheet files found")
    return paths


def _artifacts(directory: str, suffix: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"not a directory: {directory}")
    paths = sorted(d.glob(f"*{suffix}"))
    if not paths:
        raise ConfigError(f"no *{suffix} files in {directory}")
    return paths


def _each(items: Iterable, fn: Callable, label: Callable = str) -> tuple[int, list[dict]]:
    """Apply ``fn`` per item, isolating failures. Returns (ok count, failures)."""
    ok, failed = 0, []
    for item in items:
        try:
            fn(item)
            ok += 1
        except Exception as exc:
            log.error("%s: %s", label(item), exc)
            failed.append({"item": label(item), "error": f"{type(exc).__name__}: {exc}"})
    return ok, failed


def _finish(args: argparse.Namespace, summary: dict, failed: Sequence = ()) -> int:
    summary = {**summary, "failed": list(failed)}
    if args.json:
        print(json.dumps(summary, sort_keys=True, indent=2))
    else:
        for k in sorted(summary):
            if k != "failed":
                print(f"{k}: {summary[k]}")
        for f in failed:
            print(f"FAILED {f['item']}: {f['error']}", file=sys.stderr)
    return EXIT_PARTIAL if failed else EXIT_OK


def _phrase_file(path: Path) -> tuple[str, list[LocationPhrase]]:
    sid, phrases = read_phrases(path)
    return sid or path.stem, phrases


# -- commands --------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    cfg = SynthConfig(n_sheets=args.n_sheets, seed=args.seed or 0)
    paths = write_corpus(args.out, cfg)
    if args.fall_river:
        write_sheet(fall_river_sheet(), Path(args.out) / "fall_river.sheet")
    return _finish(args, {"out": args.out, "sheets": args.n_sheets, **{k: str(v) for k, v in paths.items()}})


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    table = load_table(cfg)
    sheets = []
    for path in _sheet_paths(args, cfg):
        try:
            sheets.append(parse_sheet(path))
        except (SheetFormatError, SheetValidationError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    tuned_path = args.tune_embeddings
    if tuned_path is None and cfg.tune_embeddings:
        tuned_path = str(Path(args.out).with_suffix(".vectors.txt"))
    lcfg = replace(cfg.linker(), tune_embeddings=tuned_path is not None)
    model = LinkerModel.initialize(table.dim + 5, lcfg)
    try:
        model, tuned, history = train_with_embeddings(model, sheets, table, lcfg)
    except UntrainableSheetError as exc:
        raise ConfigError(f"untrainable corpus: {exc}") from exc
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    summary = {"checkpoint": args.out}
    if tuned_path is not None:
        write_embeddings(tuned.vectors, tuned_path)
        summary["embeddings"] = tuned_path
    for epoch, loss in enumerate(history):
        log.info("epoch %d loss %.6f", epoch, loss)
    if args.loss_log:
        with open(args.loss_log, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "loss"))
            w.writerows((e, repr(loss)) for e, loss in enumerate(history))
    summary.update(sheets=len(sheets), epochs=len(history), loss_first=history[0], loss_last=history[-1])
    return _finish(args, summary)


def cmd_link(args: argparse.Namespace) -> int:
    cfg = _config(args)
    res = load_resources(cfg, link=True, geo=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {"edges": 0, "candidates": 0}

    def run(path: Path) -> None:
        sheet = parse_sheet(path)
        decisions = link_stage(sheet, res, cfg)
        write_edges(decisions, out / f"{sheet.sheet_id}.edges")
        write_edges(decisions, out / f"{sheet.sheet_id}.candidates", linked_only=False)
        counts["edges"] += sum(d.linked for d in decisions)
        counts["candidates"] += len(decisions)

    ok, failed = _each(_sheet_paths(args, cfg), run)
    return _finish(args, {"sheets": ok, **counts}, failed)


def cmd_phrases(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_phrases = 0

    def run(path: Path) -> None:
        nonlocal n_phrases
        sheet: MapSheet = parse_sheet(path)
        edge_path = Path(args.edges) / f"{sheet.sheet_id}.edges"
        edges = [(a, b) for a, b, _, _ in read_edges(edge_path)]
        phrases = phrase_stage(sheet, edges, cfg)
        write_phrases(sheet.sheet_id, phrases, out / f"{sheet.sheet_id}.phrases")
        n_phrases += len(phrases)

    ok, failed = _each(_sheet_paths(args, cfg), run)
    return _finish(args, {"sheets": ok, "phrases": n_phrases, "component": cfg.component_mode}, failed)


def cmd_geolocate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    gaz = load_gazetteer(cfg) if cfg.gazetteer else None
    res = Resources(gazetteer=gaz, geocoder=make_geocoder(cfg, gaz))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    estimates: dict[str, dict] = {}
    reading = {}
    for path in iter_sheet_files(args.sheets) if args.sheets else ():
        sheet = parse_sheet(path)
        reading[sheet.sheet_id] = [r.text for r in sheet.regions]

    def run(path: Path) -> None:
        sid, phrases = _phrase_file(path)
        if "word2paragraph" in cfg.geo_modes and sid not in reading:
            log.warning("no sheet for %s; word2paragraph falls back to phrase order", sid)
        est = geo_stage(phrases, res, cfg, reading.get(sid))
        write_estimates(est, out / f"{sid}.geo")
        estimates[sid] = {m: None if e is None else [e.lat, e.lng] for m, e in est.items()}

    ok, failed = _each(_artifacts(args.phrases, ".phrases"), run)
    return _finish(args, {"sheets": ok, "estimates": estimates}, failed)


def _estimate_for(geo_dir: str, sid: str, cfg: PipelineConfig) -> GeoEstimate | None:
    path = Path(geo_dir) / f"{sid}.geo"
    if not path.exists():
        raise FileNotFoundError(f"no estimate file {path}")
    return read_estimates(path).get(cfg.match_mode)


def cmd_match(args: argparse.Namespace) -> int:
    cfg = _config(args)
    gaz = load_gazetteer(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_matched = 0

    def run(path: Path) -> None:
        nonlocal n_matched
        sid, phrases = _phrase_file(path)
        est = _estimate_for(args.geo, sid, cfg)
        matches = match_phrases(phrases, est, gaz, cfg.radius_km, cfg.min_similarity) if est else {}
        with open(out / f"{sid}.matches", "w", encoding="utf-8") as fh:
            for ph in phrases:
                rec = matches.get(tuple(ph.ids))
                fh.write(f"{','.join(ph.ids)}\t{ph.text}\t{rec.uri if rec else '-'}\n")
                n_matched += rec is not None

    ok, failed = _each(_artifacts(args.phrases, ".phrases"), run)
    return _finish(args, {"sheets": ok, "matched": n_matched}, failed)


def cmd_emit_rdf(args: argparse.Namespace) -> int:
    cfg = _config(args)
    gaz = load_gazetteer(cfg) if cfg.gazetteer else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".nt" if args.format == "ntriples" else ".rdf"

    def run(path: Path) -> None:
        sid, phrases = _phrase_file(path)
        est = _estimate_for(args.geo, sid, cfg)
        matches = match_phrases(phrases, est, gaz, cfg.radius_km, cfg.min_similarity) if est and gaz else None
        record = build_map_record(sid, phrases, est, matches)
        (out / f"{sid}{ext}").write_text(emit_rdf(record, args.format, args.point_format), encoding="utf-8")

    ok, failed = _each(_artifacts(args.phrases, ".phrases"), run)
    return _finish(args, {"sheets": ok, "format": args.format}, failed)


def cmd_query(args: argparse.Namespace) -> int:
    cfg = _config(args)
    gaz = load_gazetteer(cfg)
    records = []
    ok, failed = _each(_artifacts(args.records, ".nt"), lambda p: records.append(load_record(p)))
    hits = query_maps(records, gaz, args.type, args.min_elevation)
    if not args.json:
        for sid in hits:
            print(sid)
        for f in failed:
            print(f"FAILED {f['item']}: {f['error']}", file=sys.stderr)
        return EXIT_PARTIAL if failed else EXIT_OK
    return _finish(args, {"records": ok, "maps": hits}, failed)


def cmd_eval(args: argparse.Namespace) -> int:
    _config(args)
    try:
        report = evaluate_dirs(args.pred, args.gt, args.out, args.edge_mode, args.hist_edges)
    except EvalInputError as exc:
        raise ConfigError(str(exc)) from exc
    skipped = [{"item": sid, "error": "no ground truth"} for sid in report.missing_gt]
    skipped += [{"item": sid, "error": "no predictions"} for sid in report.missing_pred]
    return _finish(args, {**report.summary, "tables": {k: str(v) for k, v in report.tables.items()}}, skipped)


def cmd_pipeline(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = args.out or cfg.output_dir
    if not out:
        raise ConfigError("no output directory (--out or output_dir)")
    paths = _sheet_paths(args, cfg)
    res = load_resources(cfg, link=True, geo=True)
    results = run_batch(paths, res, cfg, out)
    failed = [{"item": r.source, "error": r.error} for r in results if not r.ok]
    return _finish(args, {"processed": sum(r.ok for r in results), "sheets": len(results),
                          "summary": str(Path(out) / "summary.csv")}, failed)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
