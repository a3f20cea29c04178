"""Train on part of a synthetic corpus and score linkage, phrases and geolocation.

    python scripts/run_benchmark.py --n-sheets 20 --train 14 --seed 0
"""

import argparse
import dataclasses
import json
import time

from mapmeta.consensus import link_sheet
from mapmeta.evaluation import LinkageCounts, gt_edges, linkage_counts, phrase_prf
from mapmeta.features import EmbeddingTable
from mapmeta.geolocalizer import GazetteerGeocoder, estimate_location, geocode_sheet, haversine_km
from mapmeta.phrase_graph import phrases_from_edges
from mapmeta.synth import SynthConfig, generate_corpus
from mapmeta.textual_linker import LinkerConfig, LinkerModel, train


def run(n_sheets, n_train, seed, epochs, eps_km, min_pts):
    t0 = time.perf_counter()
    sheets, gazetteer, emb = generate_corpus(SynthConfig(n_sheets=n_sheets, seed=seed))
    table = EmbeddingTable(emb, 50)
    cfg = LinkerConfig(epochs=epochs, seed=seed)
    model, history = train(LinkerModel.initialize(table.dim + 5, cfg), sheets[:n_train], table, cfg)
    geocoder = GazetteerGeocoder(gazetteer)

    counts = LinkageCounts(0, 0, 0)
    pred, gt, errors = [], [], []
    for k, sheet in enumerate(sheets):
        edges = [(d.query, d.candidate) for d in link_sheet(model, sheet, table) if d.linked]
        phrases = phrases_from_edges(sheet, edges)
        cands = geocode_sheet([p.text for p in phrases], "phrase_by_phrase", geocoder)
        est = estimate_location(cands, eps_km, min_pts) if cands else None
        errors.append(None if est is None else haversine_km(sheet.gt_location, (est.lat, est.lng)))
        if k < n_train:
            continue
        c = linkage_counts(edges, gt_edges(sheet.groups))
        counts = LinkageCounts(counts.tp + c.tp, counts.fp + c.fp, counts.fn + c.fn)
        pred += [p.text for p in phrases]
        gt += [" ".join(sheet.region(i).text for i in g) for g in sheet.all_groups()]

    located = [e for e in errors if e is not None]
    return {
        "sheets": n_sheets,
        "held_out": n_sheets - n_train,
        "final_loss": history[-1] if history else None,
        "linkage": dataclasses.asdict(counts.prf()),
        "phrases_duplicate": dataclasses.asdict(phrase_prf(pred, gt, "duplicate")),
        "phrases_distinct": dataclasses.asdict(phrase_prf(pred, gt, "distinct")),
        "geo_within_10km": sum(e <= 10.0 for e in located) / len(errors),
        "geo_median_km": sorted(located)[len(located) // 2] if located else None,
        "seconds": round(time.perf_counter() - t0, 2),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-sheets", type=int, default=20)
    ap.add_argument("--train", type=int, default=14)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=LinkerConfig.epochs)
    ap.add_argument("--eps-km", type=float, default=10.0)
    ap.add_argument("--min-pts", type=int, default=3)
    args = ap.parse_args()
    if not 0 < args.train < args.n_sheets:
        ap.error("--train must leave at least one held-out sheet")
    print(json.dumps(run(args.n_sheets, args.train, args.seed, args.epochs, args.eps_km, args.min_pts), indent=2))


if __name__ == "__main__":
    main()
