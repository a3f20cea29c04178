from mapmeta.geolocalizer import haversine_km
from mapmeta.ingest import emit_sheet, parse_sheet_text
from mapmeta.synth import SynthConfig, fall_river_sheet, generate_corpus


def test_corpus_is_seeded_and_well_formed():
    a = generate_corpus(SynthConfig(n_sheets=3, seed=5))
    b = generate_corpus(SynthConfig(n_sheets=3, seed=5))
    assert [emit_sheet(s) for s in a[0]] == [emit_sheet(s) for s in b[0]]
    for s in a[0]:
        assert parse_sheet_text(emit_sheet(s)) == s
        assert s.groups and all(len(g) > 1 for g in s.groups)
        assert s.gt_location is not None and s.corners is not None


def test_planted_gazetteer_lies_on_the_sheet():
    sheets, gaz, emb = generate_corpus(SynthConfig(n_sheets=2, seed=1, decoy_rate=0.0))
    for rec in gaz:
        sid = rec.uri.split("/")[-2]
        sheet = next(s for s in sheets if s.sheet_id == sid)
        assert haversine_km(sheet.gt_location, (rec.lat, rec.lng)) < 15.0
    assert all(len(v) == 50 for v in emb.values())


def test_fall_river_layout():
    s = fall_river_sheet()
    fall, river, burg = s.region("fall"), s.region("river"), s.region("burg")
    assert fall.height == river.height > burg.height
    assert ("fall", "river") in s.groups
