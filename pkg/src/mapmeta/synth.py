"""Procedural map-sheet corpus with planted phrases, traps and geolocations.

Each sheet covers a small lat/lng square. Multi-word place names are laid
out along a shared baseline with tight word gaps; singletons and "trap"
words sit nearby in a different font size or orientation. A matching
gazetteer places every named feature at the lat/lng of its label, with some
homonym decoys elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import write_embeddings
from .geolocalizer import Gazetteer, GazetteerRecord
from .geometry import polygon_distance, rotated_box
from .ingest import MapSheet, TextRegion, write_sheet

CHAR_ASPECT = 0.55

GENERICS = {
    "River": "stream", "Creek": "stream", "Lake": "lake", "Peak": "peak",
    "Mountain": "peak", "Butte": "peak", "Crater": "peak", "Valley": "valley",
    "Springs": "spring", "Canyon": "valley", "Ridge": "ridge", "Flat": "flat",
    "Mesa": "peak", "Beds": "area", "Wash": "stream", "Hill": "peak",
}
QUALIFIERS = ["Black", "Red", "Lava", "Bear", "Pine", "Cedar", "Eagle", "Lost", "Dry", "Cold", "Twin", "Bald"]
ONSETS = ["b", "br", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "gr", "tr"]
VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "oo"]
CODAS = ["", "n", "r", "l", "d", "s", "t", "ck", "m", "nd", "rt"]
PLACE_SUFFIXES = ["ville", "ton", "burg", "field", "dale", "wood", "port", "ford"]


@dataclass(frozen=True)
class SynthConfig:
    n_sheets: int = 20
    seed: int = 0
    width: float = 2400.0
    height: float = 1800.0
    phrases: tuple[int, int] = (14, 20)
    singletons: tuple[int, int] = (4, 8)
    traps: tuple[int, int] = (2, 4)
    three_word_rate: float = 0.1
    duplicate_rate: float = 0.08
    rotated_rate: float = 0.25
    caps_rate: float = 0.15
    extent_deg: float = 0.125
    gazetteer_rate: float = 0.9
    decoy_rate: float = 0.3
    oov_rate: float = 0.1
    embed_dim: int = 50


def _name(rng: np.random.Generator, syllables: int) -> str:
    s = "".join(
        ONSETS[rng.integers(len(ONSETS))] + VOWELS[rng.integers(len(VOWELS))] + CODAS[rng.integers(len(CODAS))]
        for _ in range(syllables)
    )
    return s.capitalize()


def _phrase_words(rng: np.random.Generator, cfg: SynthConfig) -> tuple[list[str], str]:
    generic = list(GENERICS)[rng.integers(len(GENERICS))]
    if rng.random() < cfg.three_word_rate:
        return [_name(rng, 1), QUALIFIERS[rng.integers(len(QUALIFIERS))], generic], GENERICS[generic]
    if rng.random() < 0.3:
        return [QUALIFIERS[rng.integers(len(QUALIFIERS))], generic], GENERICS[generic]
    return [_name(rng, int(rng.integers(1, 3))), generic], GENERICS[generic]


def _place_name(rng: np.random.Generator) -> str:
    return _name(rng, int(rng.integers(1, 3))) + PLACE_SUFFIXES[rng.integers(len(PLACE_SUFFIXES))]


@dataclass
class _Word:
    text: str
    poly: tuple
    height: float


class _Layout:
    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.words: list[_Word] = []
        self.groups: list[list[int]] = []
        self.group_meta: list[dict] = []

    def _inside(self, poly, margin: float = 20.0) -> bool:
        return all(margin <= x <= self.cfg.width - margin and margin <= y <= self.cfg.height - margin
                   for x, y in poly)

    def _clear(self, poly, h: float, skip: set[int] = frozenset(), factor: float = 1.3) -> bool:
        for k, w in enumerate(self.words):
            if k in skip:
                continue
            if polygon_distance(poly, w.poly) < factor * max(h, w.height):
                return False
        return True

    def lay_line(self, words: list[str], h: float, angle: float, start, gaps) -> list[_Word] | None:
        u = (math.sin(math.radians(angle)), -math.cos(math.radians(angle)))
        out = []
        x, y = start
        for k, text in enumerate(words):
            hk = h * (1.0 + self.rng.uniform(-0.03, 0.03))
            width = len(text) * CHAR_ASPECT * hk
            poly = rotated_box((x, y), angle, width, hk)
            out.append(_Word(text, poly, hk))
            if k < len(gaps):
                step = width + gaps[k] * h
                x, y = x + u[0] * step, y + u[1] * step
        return out

    def place(self, words: list[str], h: float, angle: float, meta: dict, tries: int = 300) -> bool:
        rng = self.rng
        for _ in range(tries):
            start = (rng.uniform(0, self.cfg.width), rng.uniform(0, self.cfg.height))
            gaps = [rng.uniform(0.2, 0.4) for _ in words[1:]]
            laid = self.lay_line(words, h, angle, start, gaps)
            if all(self._inside(w.poly) and self._clear(w.poly, w.height) for w in laid):
                base = len(self.words)
                self.words.extend(laid)
                self.groups.append(list(range(base, base + len(laid))))
                self.group_meta.append(meta)
                return True
        return False

    def place_trap(self, text: str, target: int, meta: dict, tries: int = 200) -> bool:
        """Put ``text`` right next to word ``target`` in a clashing style."""
        rng = self.rng
        tw = self.words[target]
        xs = [p[0] for p in tw.poly]
        ys = [p[1] for p in tw.poly]
        for _ in range(tries):
            if rng.random() < 0.5:
                h = tw.height * rng.uniform(0.5, 0.6)
                angle = 90.0
            else:
                h = tw.height * rng.uniform(0.9, 1.1)
                angle = float(rng.choice([30.0, 150.0, 0.0]))
            width = len(text) * CHAR_ASPECT * h
            gap = rng.uniform(0.15, 0.4) * h
            side = rng.integers(4)
            if side == 0:    # above
                start = (rng.uniform(min(xs) - width, max(xs)), min(ys) - gap - h / 2)
            elif side == 1:  # below
                start = (rng.uniform(min(xs) - width, max(xs)), max(ys) + gap + h / 2)
            elif side == 2:  # left
                start = (min(xs) - gap - width, rng.uniform(min(ys), max(ys)))
            else:            # right
                start = (max(xs) + gap, rng.uniform(min(ys), max(ys)))
            poly = rotated_box(start, angle, width, h)
            if not self._inside(poly):
                continue
            d = polygon_distance(poly, tw.poly)
            if not (0.05 * h <= d <= 0.6 * tw.height):
                continue
            if not self._clear(poly, max(h, tw.height), skip={target}):
                continue
            self.words.append(_Word(text, poly, h))
            self.groups.append([len(self.words) - 1])
            self.group_meta.append(meta)
            return True
        return False


def generate_sheet(sheet_id: str, rng: np.random.Generator, cfg: SynthConfig = SynthConfig()):
    """One synthetic sheet plus the gazetteer records planted for it."""
    lay = _Layout(cfg, rng)
    lat = float(rng.uniform(33.0, 46.0))
    lng = float(rng.uniform(-122.0, -76.0))

    n_phr = int(rng.integers(cfg.phrases[0], cfg.phrases[1] + 1))
    seen: list[tuple[list[str], str]] = []
    for _ in range(n_phr):
        if seen and rng.random() < cfg.duplicate_rate:
            words, typ = seen[int(rng.integers(len(seen)))]
        else:
            words, typ = _phrase_words(rng, cfg)
            if rng.random() < cfg.caps_rate:
                words = [w.upper() for w in words]
            seen.append((words, typ))
        h = float(rng.uniform(18, 30))
        angle = 90.0
        if rng.random() < cfg.rotated_rate:
            angle = float(90.0 + rng.choice([-1, 1]) * rng.uniform(10, 30))
        lay.place(list(words), h, angle, {"type": typ})

    multi = [g for g in lay.groups if len(g) > 1]
    n_traps = int(rng.integers(cfg.traps[0], cfg.traps[1] + 1))
    for _ in range(n_traps):
        if not multi:
            break
        g = multi[int(rng.integers(len(multi)))]
        target = g[0] if rng.random() < 0.5 else g[-1]
        lay.place_trap(_place_name(rng), target, {"type": "populated place"})

    n_single = int(rng.integers(cfg.singletons[0], cfg.singletons[1] + 1))
    for _ in range(n_single):
        if rng.random() < 0.3:
            lay.place([str(int(rng.integers(1200, 9800)))], float(rng.uniform(14, 20)), 90.0, {"type": None})
        else:
            lay.place([_place_name(rng)], float(rng.uniform(20, 32)), 90.0, {"type": "populated place"})

    # OCR-style output order: top to bottom, then left to right
    centers = [(sum(p[1] for p in w.poly) / 4, sum(p[0] for p in w.poly) / 4) for w in lay.words]
    order = sorted(range(len(lay.words)), key=lambda k: (round(centers[k][0] / 40.0), centers[k][1]))
    rid = {k: f"r{n}" for n, k in enumerate(order)}
    regions = [TextRegion(rid[k], lay.words[k].text, lay.words[k].poly) for k in order]
    groups = [tuple(rid[k] for k in g) for g in lay.groups if len(g) > 1]

    half = cfg.extent_deg / 2
    t_min, t_max = (lat - half, lng - half), (lat + half, lng + half)
    sheet = MapSheet(sheet_id, cfg.width, cfg.height, tuple(regions), tuple(groups), (lat, lng), (t_min, t_max))

    def to_latlng(x: float, y: float) -> tuple[float, float]:
        return (t_max[0] - y / cfg.height * cfg.extent_deg, t_min[1] + x / cfg.width * cfg.extent_deg)

    records = []
    for gi, (g, meta) in enumerate(zip(lay.groups, lay.group_meta)):
        if meta["type"] is None or rng.random() >= cfg.gazetteer_rate:
            continue
        name = " ".join(lay.words[k].text for k in g)
        cx = float(np.mean([centers[k][1] for k in g]))
        cy = float(np.mean([centers[k][0] for k in g]))
        plat, plng = to_latlng(cx, cy)
        elev = float(round(rng.uniform(300, 3500))) if meta["type"] == "peak" else None
        records.append(GazetteerRecord(name.title() if name.isupper() else name, plat, plng, meta["type"],
                                       elev, f"http://example.org/gazetteer/{sheet_id}/{gi}"))
        if rng.random() < cfg.decoy_rate:
            records.append(GazetteerRecord(records[-1].name, float(rng.uniform(25, 49)),
                                           float(rng.uniform(-124, -67)), meta["type"], elev,
                                           f"http://example.org/gazetteer/{sheet_id}/{gi}-decoy"))
    return sheet, records


def build_embeddings(words: set[str], rng: np.random.Generator, cfg: SynthConfig = SynthConfig()) -> dict[str, np.ndarray]:
    generic_base = rng.normal(0.0, 0.3, cfg.embed_dim)
    out = {}
    for w in sorted(words):
        key = w.lower()
        if key in out or key.isdigit():
            continue
        if key.capitalize() in GENERICS or key.capitalize() in QUALIFIERS:
            vec = generic_base + rng.normal(0.0, 0.15, cfg.embed_dim)
        elif rng.random() < cfg.oov_rate:
            continue
        else:
            vec = rng.normal(0.0, 0.3, cfg.embed_dim)
        out[key] = np.round(vec, 6)
    return out


def generate_corpus(cfg: SynthConfig = SynthConfig()) -> tuple[list[MapSheet], Gazetteer, dict[str, np.ndarray]]:
    rng = np.random.default_rng(cfg.seed)
    sheets = []
    records: list[GazetteerRecord] = []
    for i in range(cfg.n_sheets):
        sheet, recs = generate_sheet(f"synth-{i:03d}", rng, cfg)
        sheets.append(sheet)
        records.extend(recs)
    vocab = {tok for s in sheets for r in s.regions for tok in r.text.split()}
    vocab |= {"fall", "river", "burgettville"}
    return sheets, Gazetteer(records), build_embeddings(vocab, rng, cfg)


def write_corpus(out_dir: str | Path, cfg: SynthConfig = SynthConfig()) -> dict[str, Path]:
    out = Path(out_dir)
    (out / "sheets").mkdir(parents=True, exist_ok=True)
    sheets, gaz, emb = generate_corpus(cfg)
    for s in sheets:
        write_sheet(s, out / "sheets" / f"{s.sheet_id}.sheet")
    gaz.dump(out / "gazetteer.tsv")
    write_embeddings(emb, out / "embeddings.txt")
    return {"sheets": out / "sheets", "gazetteer": out / "gazetteer.tsv", "embeddings": out / "embeddings.txt"}


def fall_river_sheet() -> MapSheet:
    """"Fall" sits closer to a small-type "Burgettville" than to its partner "River"."""
    h = 24.0
    fall = rotated_box((1000.0, 800.0), 90.0, 4 * CHAR_ASPECT * h, h)
    river_x = fall[1][0] + 0.35 * h
    river = rotated_box((river_x, 800.0), 90.0, 5 * CHAR_ASPECT * h, h)
    hs = 13.0
    burg = rotated_box((930.0, 800.0 - h / 2 - 5.0 - hs / 2), 90.0, 12 * CHAR_ASPECT * hs, hs)
    regions = [
        TextRegion("burg", "Burgettville", burg),
        TextRegion("fall", "Fall", fall),
        TextRegion("river", "River", river),
        TextRegion.from_box("lake1", "Twin", 200.0, 300.0, 200.0 + 4 * CHAR_ASPECT * 22, 322.0),
        TextRegion.from_box("lake2", "Lake", 200.0 + 4.4 * CHAR_ASPECT * 22 + 6, 300.0,
                            200.0 + 8.4 * CHAR_ASPECT * 22 + 6, 322.0),
        TextRegion.from_box("elev", "4521", 1900.0, 1400.0, 1900.0 + 4 * CHAR_ASPECT * 16, 1416.0),
        TextRegion.from_box("town", "Stonedale", 1500.0, 300.0, 1500.0 + 9 * CHAR_ASPECT * 28, 328.0),
    ]
    groups = (("fall", "river"), ("lake1", "lake2"))
    return MapSheet("fall_river", 2400.0, 1800.0, tuple(regions), groups, (41.5, -121.5),
                    ((41.4375, -121.5625), (41.5625, -121.4375)))
