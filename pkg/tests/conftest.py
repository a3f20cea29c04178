import sys
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from mapmeta.consensus import link_sheet  # noqa: E402
from mapmeta.evaluation import gt_edges, linkage_counts, LinkageCounts, phrase_prf  # noqa: E402
from mapmeta.features import EmbeddingTable, write_embeddings  # noqa: E402
from mapmeta.geolocalizer import GazetteerGeocoder, estimate_location, geocode_sheet, haversine_km  # noqa: E402
from mapmeta.phrase_graph import phrases_from_edges  # noqa: E402
from mapmeta.ingest import write_sheet  # noqa: E402
from mapmeta.synth import SynthConfig, fall_river_sheet, generate_corpus  # noqa: E402
from mapmeta.textual_linker import LinkerConfig, LinkerModel, train  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

TRAIN_SHEETS = 14


@pytest.fixture(scope="session")
def table():
    rng = np.random.default_rng(3)
    words = ["fall", "river", "burgettville", "black", "crater", "lake", "peak"]
    return EmbeddingTable({w: rng.normal(size=8) for w in words}, 8)


def sheet_text(regions, sid="s1", size=(1000, 800), header_extra="", groups=()):
    """Build sheet-file text from ``(id, x0, y0, x1, y1, text)`` boxes."""
    lines = [f"sheet {sid} {size[0]} {size[1]} {header_extra}".rstrip()]
    for rid, x0, y0, x1, y1, text in regions:
        lines.append(f"region {rid} {x0} {y0} {x1} {y0} {x1} {y1} {x0} {y1} {text}")
    for g in groups:
        lines.append("group " + " ".join(g))
    return "\n".join(lines) + "\n"


@pytest.fixture(scope="session")
def benchmark():
    """Generate the 20-sheet corpus, train on 14 sheets, score the other 6.

    Shared by the acceptance suite and the linker tests; the full run is
    timed from corpus generation to the last metric.
    """
    t0 = time.perf_counter()
    sheets, gazetteer, emb = generate_corpus(SynthConfig(n_sheets=20, seed=0))
    table = EmbeddingTable(emb, 50)
    cfg = LinkerConfig()
    model = LinkerModel.initialize(table.dim + 5, cfg)
    model, history = train(model, sheets[:TRAIN_SHEETS], table, cfg)
    held_out = sheets[TRAIN_SHEETS:]
    geocoder = GazetteerGeocoder(gazetteer)
    counts = LinkageCounts(0, 0, 0)
    pred_phrases, gt_phrases, geo_errors = [], [], []
    for k, s in enumerate(sheets):
        decisions = link_sheet(model, s, table)
        edges = [(d.query, d.candidate) for d in decisions if d.linked]
        phrases = phrases_from_edges(s, edges)
        # geolocation is untrained, so every sheet counts; linkage only held-out
        cands = geocode_sheet([p.text for p in phrases], "phrase_by_phrase", geocoder)
        est = estimate_location(cands, 10.0, 3) if cands else None
        geo_errors.append(None if est is None else haversine_km(s.gt_location, (est.lat, est.lng)))
        if k < TRAIN_SHEETS:
            continue
        c = linkage_counts(edges, gt_edges(s.groups))
        counts = LinkageCounts(counts.tp + c.tp, counts.fp + c.fp, counts.fn + c.fn)
        pred_phrases += [p.text for p in phrases]
        gt_phrases += [" ".join(s.region(i).text for i in g) for g in s.all_groups()]
    elapsed = time.perf_counter() - t0
    return {
        "sheets": sheets, "gazetteer": gazetteer, "table": table, "model": model, "history": history,
        "held_out": held_out, "linkage": counts.prf(),
        "phrases": phrase_prf(pred_phrases, gt_phrases, "duplicate"),
        "geo_errors": geo_errors, "elapsed": elapsed,
    }


@pytest.fixture(scope="session")
def workspace(benchmark, tmp_path_factory):
    """The benchmark corpus, gazetteer, embeddings and trained model on disk."""
    root = tmp_path_factory.mktemp("workspace")
    (root / "sheets").mkdir()
    for s in benchmark["sheets"]:
        write_sheet(s, root / "sheets" / f"{s.sheet_id}.sheet")
    write_sheet(fall_river_sheet(), root / "fall_river.sheet")
    benchmark["gazetteer"].dump(root / "gazetteer.tsv")
    write_embeddings(benchmark["table"].vectors, root / "embeddings.txt")
    benchmark["model"].save(root / "linker.ckpt")
    return {
        "root": root, "sheets": root / "sheets", "fall_river": root / "fall_river.sheet",
        "gazetteer": root / "gazetteer.tsv", "embeddings": root / "embeddings.txt",
        "checkpoint": root / "linker.ckpt",
    }
