"""Per-sheet processing from text regions to linked metadata.

Each sheet yields four artifacts in the output directory: ``<id>.edges``
(accepted links), ``<id>.phrases``, ``<id>.geo`` (one estimate per geocoding
mode) and ``<id>.nt``. With ``write_candidates`` the textual candidates are
also kept in ``<id>.candidates`` so the textual stage can be scored alone.
A batch writes ``summary.csv`` in input order.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .config import ConfigError, PipelineConfig
from .consensus import DirectoryMaps, LinkDecision, MapProvider, link_sheet, surrogate_maps, write_edges
from .features import EmbeddingFormatError, EmbeddingTable, load_embeddings
from .geolocalizer import (
    Gazetteer,
    GazetteerGeocoder,
    GeoEstimate,
    Geocoder,
    HttpGeocoder,
    estimate_location,
    geocode_sheet,
    write_estimates,
)
from .ingest import MapSheet, parse_sheet
from .linked_metadata import MapRecord, build_map_record, emit_rdf, match_phrases
from .phrase_graph import LocationPhrase, phrases_from_edges, write_phrases
from .textual_linker import CheckpointError, LinkerModel

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("sheet_id", "source", "status", "regions", "candidates", "edges", "phrases",
                   "lat", "lng", "cluster_size", "degraded", "matched", "error")


@dataclass
class Resources:
    """Read-only state shared by every worker."""

    model: LinkerModel | None = None
    table: EmbeddingTable | None = None
    gazetteer: Gazetteer | None = None
    geocoder: Geocoder | None = None
    maps: MapProvider = surrogate_maps


def load_table(cfg: PipelineConfig) -> EmbeddingTable:
    cfg.require("embeddings")
    try:
        return load_embeddings(cfg.embeddings, cfg.embed_dim, cfg.oov)
    except EmbeddingFormatError as exc:
        raise ConfigError(str(exc)) from exc


def load_model(cfg: PipelineConfig, table: EmbeddingTable) -> LinkerModel:
    cfg.require("checkpoint")
    try:
        model = LinkerModel.load(cfg.checkpoint)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from exc
    if model.input_dim != table.dim + 5:
        raise ConfigError(f"checkpoint expects {model.input_dim - 5}-d embeddings, table has {table.dim}")
    return model


def load_gazetteer(cfg: PipelineConfig) -> Gazetteer:
    cfg.require("gazetteer")
    try:
        return Gazetteer.load(cfg.gazetteer)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def make_geocoder(cfg: PipelineConfig, gazetteer: Gazetteer | None) -> Geocoder:
    if cfg.geocoder_url:
        return HttpGeocoder(cfg.geocoder_url, rate=cfg.rate_limit, seed=cfg.seed)
    if gazetteer is None:
        raise ConfigError("geocoding needs a gazetteer or a geocoder URL")
    return GazetteerGeocoder(gazetteer)


def load_resources(cfg: PipelineConfig, link: bool = True, geo: bool = True) -> Resources:
    res = Resources()
    if link:
        res.table = load_table(cfg)
        res.model = load_model(cfg, res.table)
        if cfg.prob_maps:
            cfg.require("prob_maps")
            res.maps = DirectoryMaps(cfg.prob_maps, fallback=surrogate_maps)
    if geo:
        res.gazetteer = load_gazetteer(cfg)
        res.geocoder = make_geocoder(cfg, res.gazetteer)
    return res


# -- stages ----------------------------------------------------------------

def link_stage(sheet: MapSheet, res: Resources, cfg: PipelineConfig) -> list[LinkDecision]:
    return link_sheet(res.model, sheet, res.table, res.maps, cfg.consensus())


def phrase_stage(sheet: MapSheet, edges: Sequence[tuple[str, str]], cfg: PipelineConfig) -> list[LocationPhrase]:
    return phrases_from_edges(sheet, edges, cfg.component_mode)


def geo_stage(phrases: Sequence[LocationPhrase], res: Resources, cfg: PipelineConfig,
              reading_order: Sequence[str] | None = None) -> dict[str, GeoEstimate | None]:
    """Estimate per geocoding mode.

    ``reading_order`` is the sheet's region texts in OCR order; the
    word2paragraph baseline queries those instead of the phrase texts.
    """
    texts = [p.text for p in phrases]
    out: dict[str, GeoEstimate | None] = {}
    for mode in cfg.geo_modes:
        source = reading_order if mode == "word2paragraph" and reading_order is not None else texts
        cands = geocode_sheet(source, mode, res.geocoder)
        out[mode] = estimate_location(cands, cfg.eps_km, cfg.min_pts) if cands else None
    return out


def record_stage(sheet_id: str, phrases: Sequence[LocationPhrase], estimates: dict[str, GeoEstimate | None],
                 res: Resources, cfg: PipelineConfig) -> MapRecord:
    est = estimates.get(cfg.match_mode)
    matches = None
    if est is not None and res.gazetteer is not None:
        matches = match_phrases(phrases, est, res.gazetteer, cfg.radius_km, cfg.min_similarity)
    return build_map_record(sheet_id, phrases, est, matches)


# -- per-sheet and batch drivers -----------------------------------------

@dataclass
class SheetResult:
    source: str
    sheet_id: str = ""
    ok: bool = False
    error: str = ""
    regions: int = 0
    candidates: int = 0
    edges: int = 0
    phrases: int = 0
    estimate: GeoEstimate | None = None
    matched: int = 0
    artifacts: list[Path] = field(default_factory=list)

    def row(self) -> list[str]:
        e = self.estimate
        return [
            self.sheet_id, self.source, "ok" if self.ok else "failed",
            str(self.regions), str(self.candidates), str(self.edges), str(self.phrases),
            "" if e is None else repr(e.lat), "" if e is None else repr(e.lng),
            "" if e is None else str(e.cluster_size), "" if e is None else str(int(e.degraded)),
            str(self.matched), self.error,
        ]


def process_sheet(path: str | Path, res: Resources, cfg: PipelineConfig, out_dir: str | Path,
                  sheet: MapSheet | None = None) -> SheetResult:
    """Run every stage on one sheet file; artifacts are written only on success."""
    out = Path(out_dir)
    result = SheetResult(source=Path(path).name)
    try:
        if sheet is None:
            sheet = parse_sheet(path)
        result.sheet_id = sheet.sheet_id
        decisions = link_stage(sheet, res, cfg)
        edges = [(d.query, d.candidate) for d in decisions if d.linked]
        phrases = phrase_stage(sheet, edges, cfg)
        estimates = geo_stage(phrases, res, cfg, [r.text for r in sheet.regions])
        record = record_stage(sheet.sheet_id, phrases, estimates, res, cfg)
    except Exception as exc:  # isolate the batch from any one sheet
        log.error("sheet %s failed: %s", path, exc)
        result.error = f"{type(exc).__name__}: {exc}"
        return result

    sid = sheet.sheet_id
    write_edges(decisions, out / f"{sid}.edges")
    write_phrases(sid, phrases, out / f"{sid}.phrases")
    write_estimates(estimates, out / f"{sid}.geo")
    (out / f"{sid}.nt").write_text(emit_rdf(record), encoding="utf-8")
    result.artifacts = [out / f"{sid}{ext}" for ext in (".edges", ".phrases", ".geo", ".nt")]
    if cfg.write_candidates:
        write_edges(decisions, out / f"{sid}.candidates", linked_only=False)
        result.artifacts.append(out / f"{sid}.candidates")

    result.ok = True
    result.regions = len(sheet.regions)
    result.candidates = len(decisions)
    result.edges = len(edges)
    result.phrases = len(phrases)
    result.estimate = estimates.get(cfg.match_mode)
    result.matched = sum(f.see_also is not None for f in record.features)
    return result


def run_batch(paths: Sequence[str | Path], res: Resources, cfg: PipelineConfig,
              out_dir: str | Path) -> list[SheetResult]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # parse up front so duplicate ids fail before anything is written
    jobs: list[tuple[Path, MapSheet | None, SheetResult | None]] = []
    seen: dict[str, str] = {}
    for p in map(Path, paths):
        try:
            sheet = parse_sheet(p)
        except Exception as exc:
            log.error("sheet %s failed: %s", p, exc)
            jobs.append((p, None, SheetResult(p.name, error=f"{type(exc).__name__}: {exc}")))
            continue
        if sheet.sheet_id in seen:
            msg = f"duplicate sheet id {sheet.sheet_id!r} (also in {seen[sheet.sheet_id]})"
            log.error("sheet %s failed: %s", p, msg)
            jobs.append((p, None, SheetResult(p.name, sheet.sheet_id, error=msg)))
            continue
        seen[sheet.sheet_id] = p.name
        jobs.append((p, sheet, None))

    def run(job) -> SheetResult:
        p, sheet, done = job
        return done if done is not None else process_sheet(p, res, cfg, out, sheet)

    workers = min(cfg.n_workers(), max(1, len(jobs)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    write_summary(results, out / "summary.csv")
    return results


def write_summary(results: Sequence[SheetResult], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in results:
            w.writerow(r.row())
