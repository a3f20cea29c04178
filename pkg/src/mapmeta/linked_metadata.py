"""Entity matching and linked-data records for map sheets.

A record is a small RDF graph::

    <map>     rdf:type          :HistoricalMap
    <map>     :nearby           "lat lng"
    <map>     geo:sfOverlaps    <feature>
    <feature> rdfs:label        "phrase"
    <feature> rdfs:seeAlso      <entity>      (only when matched)
    <feature> :point            "lat lng"     (only when matched)

Feature IRIs embed the region ids of the phrase, so repeated phrase strings
from different regions stay distinct nodes.
"""

from __future__ import annotations

import logging
import os
import re
import tempfile
import threading
import urllib.parse
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence
import xml.etree.ElementTree as ET
from xml.sax.saxutils import escape, quoteattr

from .geolocalizer import Gazetteer, GazetteerRecord, GeoEstimate, haversine_km
from .phrase_graph import LocationPhrase

log = logging.getLogger(__name__)

BASE = "http://example.org/mapmeta/"
RDF = "http://www.w3.org/1999/02/22-rdf-syntax-ns#"
RDFS = "http://www.w3.org/2000/01/rdf-schema#"
GEO = "http://www.opengis.net/ont/geosparql#"

RDF_TYPE = RDF + "type"
RDFS_LABEL = RDFS + "label"
RDFS_SEE_ALSO = RDFS + "seeAlso"
GEO_SF_OVERLAPS = GEO + "sfOverlaps"
NEARBY = BASE + "ontology#nearby"
POINT = BASE + "ontology#point"
HISTORICAL_MAP = BASE + "ontology#HistoricalMap"


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def string_similarity(a: str, b: str) -> float:
    if not a or not b:
        raise ValueError("string_similarity needs non-empty strings")
    a, b = a.lower(), b.lower()
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


def match_entity(
    phrase: str,
    estimate: tuple[float, float] | GeoEstimate,
    gazetteer: Iterable[GazetteerRecord],
    radius_km: float = 50.0,
    min_similarity: float = 0.8,
) -> GazetteerRecord | None:
    """Most similar in-radius gazetteer record, or None below ``min_similarity``.

    Ties prefer the nearer record, then the lexicographically smaller URI.
    """
    where = (estimate.lat, estimate.lng) if isinstance(estimate, GeoEstimate) else estimate
    best = None
    for rec in gazetteer:
        d = haversine_km(where, (rec.lat, rec.lng))
        if d > radius_km:
            continue
        sim = string_similarity(phrase, rec.name)
        if sim < min_similarity:
            continue
        key = (-sim, d, rec.uri)
        if best is None or key < best[0]:
            best = (key, rec)
    return None if best is None else best[1]


@dataclass(frozen=True)
class Feature:
    label: str
    region_ids: tuple[str, ...]
    see_also: str | None = None
    point: tuple[float, float] | None = None


@dataclass(frozen=True)
class MapRecord:
    sheet_id: str
    nearby: tuple[float, float] | None
    features: tuple[Feature, ...] = ()
    base: str = BASE

    @property
    def uri(self) -> str:
        return f"{self.base}map/{_q(self.sheet_id)}"

    def feature_uri(self, f: Feature) -> str:
        return f"{self.uri}/feature/{','.join(_q(r) for r in f.region_ids)}"


def _q(s: str) -> str:
    return urllib.parse.quote(s, safe="-._~")


def build_map_record(
    sheet_id: str,
    phrases: Sequence[LocationPhrase],
    estimate: GeoEstimate | tuple[float, float] | None,
    matches: dict[tuple[str, ...], GazetteerRecord | None] | None = None,
    base: str = BASE,
) -> MapRecord:
    matches = matches or {}
    feats = []
    for ph in phrases:
        rec = matches.get(tuple(ph.ids))
        feats.append(Feature(ph.text, tuple(ph.ids),
                             rec.uri if rec else None,
                             (rec.lat, rec.lng) if rec else None))
    if isinstance(estimate, GeoEstimate):
        nearby = (estimate.lat, estimate.lng)
    else:
        nearby = estimate
    return MapRecord(sheet_id, nearby, tuple(feats), base)


def match_phrases(
    phrases: Sequence[LocationPhrase],
    estimate: GeoEstimate | tuple[float, float],
    gazetteer: Gazetteer,
    radius_km: float = 50.0,
    min_similarity: float = 0.8,
) -> dict[tuple[str, ...], GazetteerRecord | None]:
    return {tuple(p.ids): match_entity(p.text, estimate, gazetteer, radius_km, min_similarity) for p in phrases}


# -- triples ---------------------------------------------------------------

@dataclass(frozen=True, order=True)
class Term:
    value: str
    literal: bool = False

    def nt(self) -> str:
        if self.literal:
            return '"' + _nt_escape(self.value) + '"'
        return f"<{self.value}>"


Triple = tuple[Term, Term, Term]


def _nt_escape(s: str) -> str:
    return (s.replace("\\", "\\\\").replace('"', '\\"')
            .replace("\n", "\\n").replace("\r", "\\r").replace("\t", "\\t"))


POINT_FORMATS = ("latlng", "wkt")


def _point_literal(p: tuple[float, float], fmt: str = "latlng") -> Term:
    if fmt == "wkt":
        return Term(f"POINT({p[1]!r} {p[0]!r})", True)
    if fmt != "latlng":
        raise ValueError(f"unknown point format {fmt!r}")
    return Term(f"{p[0]!r} {p[1]!r}", True)


def _parse_point(value: str) -> tuple[float, float]:
    """Inverse of :func:`_point_literal` for either format."""
    v = value.strip()
    if v.startswith("POINT(") and v.endswith(")"):
        lng, lat = (float(t) for t in v[6:-1].split())
        return lat, lng
    lat, lng = (float(t) for t in v.split())
    return lat, lng


def record_triples(record: MapRecord, point_format: str = "latlng") -> list[Triple]:
    """Triples of one record. Points are ``"lat lng"`` or WKT ``POINT(lng lat)``."""
    m = Term(record.uri)
    out: list[Triple] = [(m, Term(RDF_TYPE), Term(HISTORICAL_MAP))]
    if record.nearby is not None:
        out.append((m, Term(NEARBY), _point_literal(record.nearby, point_format)))
    for f in record.features:
        fu = Term(record.feature_uri(f))
        out.append((m, Term(GEO_SF_OVERLAPS), fu))
        out.append((fu, Term(RDFS_LABEL), Term(f.label, True)))
        if f.see_also is not None:
            out.append((fu, Term(RDFS_SEE_ALSO), Term(f.see_also)))
            if f.point is not None:
                out.append((fu, Term(POINT), _point_literal(f.point, point_format)))
    return sorted(set(out), key=lambda t: (t[0].nt(), t[1].nt(), t[2].nt()))


def to_ntriples(triples: Iterable[Triple]) -> str:
    lines = sorted({f"{s.nt()} {p.nt()} {o.nt()} ." for s, p, o in triples})
    return "".join(line + "\n" for line in lines)


def emit_rdf(record: MapRecord, syntax: str = "ntriples", point_format: str = "latlng") -> str:
    if syntax == "ntriples":
        return to_ntriples(record_triples(record, point_format))
    if syntax == "xml":
        return to_rdfxml(record_triples(record, point_format))
    raise ValueError(f"unknown RDF syntax {syntax!r}")


_NT_LINE = re.compile(r'^(<[^>]*>)\s+(<[^>]*>)\s+(<[^>]*>|"(?:[^"\\]|\\.)*")\s*\.\s*$')
_UNESC = {"\\\\": "\\", '\\"': '"', "\\n": "\n", "\\r": "\r", "\\t": "\t"}


def _parse_term(tok: str) -> Term:
    if tok.startswith("<"):
        return Term(tok[1:-1])
    return Term(re.sub(r"\\[\\\"nrt]", lambda m: _UNESC[m.group(0)], tok[1:-1]), True)


def parse_ntriples(text: str) -> set[Triple]:
    out: set[Triple] = set()
    # split on newline only; labels may hold other separators such as \x1e
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        m = _NT_LINE.match(line)
        if m is None:
            raise ValueError(f"line {lineno}: unsupported N-Triples statement")
        out.add(tuple(_parse_term(t) for t in m.groups()))
    return out


def record_from_triples(triples: Iterable[Triple]) -> MapRecord:
    """Rebuild a record from its triples (inverse of :func:`record_triples`)."""
    triples = list(triples)
    maps = [s.value for s, p, o in triples if p.value == RDF_TYPE and o.value == HISTORICAL_MAP]
    if len(maps) != 1:
        raise ValueError(f"expected exactly one map node, found {len(maps)}")
    map_uri = maps[0]
    base, sep, sid = map_uri.rpartition("map/")
    if not sep:
        raise ValueError(f"unrecognised map IRI {map_uri}")
    props: dict[str, dict[str, str]] = {}
    nearby = None
    feature_uris = []
    for s, p, o in triples:
        if s.value == map_uri and p.value == NEARBY:
            nearby = _parse_point(o.value)
        elif s.value == map_uri and p.value == GEO_SF_OVERLAPS:
            feature_uris.append(o.value)
        elif s.value != map_uri:
            props.setdefault(s.value, {})[p.value] = o.value
    feats = []
    prefix = f"{map_uri}/feature/"
    for fu in sorted(feature_uris):
        if not fu.startswith(prefix):
            raise ValueError(f"feature IRI {fu} outside map {map_uri}")
        ids = tuple(urllib.parse.unquote(x) for x in fu[len(prefix):].split(","))
        pr = props.get(fu, {})
        pt = pr.get(POINT)
        feats.append(Feature(pr.get(RDFS_LABEL, ""), ids, pr.get(RDFS_SEE_ALSO),
                             _parse_point(pt) if pt else None))
    return MapRecord(urllib.parse.unquote(sid), nearby, tuple(feats), base)


_XML_PREFIXES = (("rdf", RDF), ("rdfs", RDFS), ("geo", GEO), ("mm", BASE + "ontology#"))


def _qname(iri: str) -> str:
    for prefix, ns in _XML_PREFIXES:
        if iri.startswith(ns):
            return f"{prefix}:{iri[len(ns):]}"
    raise ValueError(f"no XML prefix for predicate {iri}")


_XML_ENTITIES = {"\r": "&#13;"}
_XML_INVALID = re.compile("[\x00-\x08\x0b\x0c\x0e-\x1f\ufffe\uffff]")


def _xml_text(value: str) -> str:
    if _XML_INVALID.search(value):
        raise ValueError(f"{value!r} contains characters XML cannot carry")
    return value


def to_rdfxml(triples: Iterable[Triple]) -> str:
    by_subject: dict[str, list[tuple[Term, Term]]] = {}
    for s, p, o in triples:
        by_subject.setdefault(s.value, []).append((p, o))
    lines = ['<?xml version="1.0" encoding="utf-8"?>', "<rdf:RDF"]
    lines += [f'    xmlns:{prefix}="{ns}"' for prefix, ns in _XML_PREFIXES]
    lines[-1] += ">"
    for subj in sorted(by_subject):
        lines.append(f"  <rdf:Description rdf:about={quoteattr(_xml_text(subj))}>")
        for p, o in sorted(by_subject[subj], key=lambda po: (po[0].value, po[1].nt())):
            q = _qname(p.value)
            if o.literal:
                lines.append(f"    <{q}>{escape(_xml_text(o.value), _XML_ENTITIES)}</{q}>")
            else:
                lines.append(f"    <{q} rdf:resource={quoteattr(_xml_text(o.value))}/>")
        lines.append("  </rdf:Description>")
    lines.append("</rdf:RDF>")
    return "\n".join(lines) + "\n"


def parse_rdfxml(text: str) -> set[Triple]:
    """Read back the subset of RDF/XML that :func:`to_rdfxml` writes."""
    root = ET.fromstring(text.encode("utf-8"))
    about = f"{{{RDF}}}about"
    resource = f"{{{RDF}}}resource"
    out: set[Triple] = set()
    for desc in root.findall(f"{{{RDF}}}Description"):
        s = Term(desc.attrib[about])
        for el in desc:
            pred = Term(el.tag[1:].replace("}", ""))
            if resource in el.attrib:
                out.add((s, pred, Term(el.attrib[resource])))
            else:
                out.add((s, pred, Term(el.text or "", True)))
    return out


# -- record store and queries ---------------------------------------------

class RecordStore:
    """Directory of per-map N-Triples files; one writer, many readers."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def path_for(self, sheet_id: str) -> Path:
        return self.root / f"{_q(sheet_id)}.nt"

    def put(self, record: MapRecord) -> Path:
        path = self.path_for(record.sheet_id)
        data = emit_rdf(record, "ntriples")
        with self._lock:
            if path.exists():
                raise FileExistsError(f"record for {record.sheet_id} already stored")
            fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(data)
            os.replace(tmp, path)
        return path

    def records(self) -> list[MapRecord]:
        return [load_record(p) for p in sorted(self.root.glob("*.nt"))]


def load_record(path: str | Path) -> MapRecord:
    return record_from_triples(parse_ntriples(Path(path).read_text(encoding="utf-8")))


def query_maps(
    records: Iterable[MapRecord],
    gazetteer: Gazetteer,
    type: str | None = None,
    min_elevation_m: float | None = None,
) -> list[str]:
    """Names of maps overlapping a feature linked to a qualifying entity.

    Entities are filtered first, then followed back through ``seeAlso`` to
    features and through ``sfOverlaps`` to maps. Elevation bounds are
    inclusive; entities without an elevation never pass an elevation filter.
    """
    triples: set[Triple] = set()
    names: dict[str, str] = {}
    for rec in records:
        triples.update(record_triples(rec))
        names[rec.uri] = rec.sheet_id
    features_by_entity: dict[str, set[str]] = {}
    maps_by_feature: dict[str, set[str]] = {}
    for s, p, o in triples:
        if p.value == RDFS_SEE_ALSO:
            features_by_entity.setdefault(o.value, set()).add(s.value)
        elif p.value == GEO_SF_OVERLAPS:
            maps_by_feature.setdefault(o.value, set()).add(s.value)
    for uri in sorted(features_by_entity):
        if uri not in gazetteer.by_uri:
            log.warning("unresolvable entity URI %s", uri)

    hits: set[str] = set()
    for ent in gazetteer:
        if type is not None and ent.type != type:
            continue
        if min_elevation_m is not None and (ent.elevation_m is None or ent.elevation_m < min_elevation_m):
            continue
        for feat in features_by_entity.get(ent.uri, ()):
            for m in maps_by_feature.get(feat, ()):
                hits.add(names[m])
    return sorted(hits)
