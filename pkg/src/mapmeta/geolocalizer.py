"""Geocode words or phrases and cluster the candidates into a sheet location."""

from __future__ import annotations

import json
import logging
import math
import random
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
MODES = ("phrase_by_phrase", "word_by_word", "word2paragraph")


class GeocoderError(RuntimeError):
    """Transport-level failure, as opposed to an empty answer."""


@dataclass(frozen=True)
class GeoCandidate:
    source: str
    lat: float
    lng: float
    rank: int = 0

    def __post_init__(self) -> None:
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lng <= 180.0):
            raise ValueError(f"candidate coordinate out of range: {self.lat}, {self.lng}")


@dataclass(frozen=True)
class GeoEstimate:
    lat: float
    lng: float
    cluster_size: int
    total: int
    degraded: bool = False


@dataclass(frozen=True)
class GazetteerRecord:
    name: str
    lat: float
    lng: float
    type: str
    elevation_m: float | None
    uri: str


def haversine_km(g: tuple[float, float], p: tuple[float, float]) -> float:
    lat1, lng1 = math.radians(g[0]), math.radians(g[1])
    lat2, lng2 = math.radians(p[0]), math.radians(p[1])
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lng2 - lng1) / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(1.0, h)))


def haversine_matrix(lat: np.ndarray, lng: np.ndarray) -> np.ndarray:
    la = np.radians(np.asarray(lat, dtype=float))
    lo = np.radians(np.asarray(lng, dtype=float))
    dlat = la[:, None] - la[None, :]
    dlng = lo[:, None] - lo[None, :]
    h = np.sin(dlat / 2) ** 2 + np.cos(la)[:, None] * np.cos(la)[None, :] * np.sin(dlng / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(1.0, h)))


# -- gazetteer and clients -------------------------------------------------

class Gazetteer:
    def __init__(self, records: Iterable[GazetteerRecord]):
        self.records = list(records)
        self.by_uri: dict[str, GazetteerRecord] = {}
        for r in self.records:
            if not r.name:
                raise ValueError("gazetteer record with empty name")
            if r.uri in self.by_uri:
                raise ValueError(f"duplicate gazetteer URI {r.uri}")
            self.by_uri[r.uri] = r
        self._lower = [r.name.lower() for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def lookup(self, query: str) -> list[GazetteerRecord]:
        q = query.strip().lower()
        exact = [r for r, n in zip(self.records, self._lower) if n == q]
        if exact:
            return exact
        return [r for r, n in zip(self.records, self._lower) if n.startswith(q)]

    @classmethod
    def load(cls, path: str | Path) -> "Gazetteer":
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip() or line.startswith("#"):
                    continue
                cols = line.split("\t")
                if len(cols) != 6:
                    raise ValueError(f"{path}:{lineno}: expected 6 tab-separated columns")
                name, lat, lng, typ, elev, uri = cols
                try:
                    records.append(GazetteerRecord(
                        name, float(lat), float(lng), typ,
                        None if elev in ("-", "") else float(elev), uri,
                    ))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: bad numeric field") from None
        return cls(records)

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                elev = "-" if r.elevation_m is None else repr(r.elevation_m)
                fh.write(f"{r.name}\t{r.lat!r}\t{r.lng!r}\t{r.type}\t{elev}\t{r.uri}\n")


class Geocoder(Protocol):
    def geocode(self, query: str) -> list[GeoCandidate]: ...


class GazetteerGeocoder:
    """Offline geocoder: case-insensitive exact match, else prefix match."""

    def __init__(self, gazetteer: Gazetteer):
        self.gazetteer = gazetteer

    def geocode(self, query: str) -> list[GeoCandidate]:
        if not query.strip():
            raise ValueError("empty geocoding query")
        return [GeoCandidate(query, r.lat, r.lng, i) for i, r in enumerate(self.gazetteer.lookup(query))]


class RateLimiter:
    def __init__(self, rate: float | None):
        self.interval = 0.0 if not rate else 1.0 / rate
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            delay = self._next - now
            self._next = max(now, self._next) + self.interval
        if delay > 0:
            time.sleep(delay)


class HttpGeocoder:
    """``GET <url>?q=<query>`` returning a JSON array of ``{"lat", "lng"}``.

    Requests are throttled to ``rate`` per second and retried with jittered
    exponential backoff; HTTP 4xx other than 429 are not retried.
    """

    def __init__(self, url: str, rate: float | None = 10.0, attempts: int = 3,
                 timeout: float = 10.0, backoff: float = 0.5, seed: int | None = None):
        self.url = url
        self.limiter = RateLimiter(rate)
        self.attempts = attempts
        self.timeout = timeout
        self.backoff = backoff
        self._rng = random.Random(seed)

    def _request(self, query: str) -> bytes:
        sep = "&" if "?" in self.url else "?"
        url = f"{self.url}{sep}{urllib.parse.urlencode({'q': query})}"
        with urllib.request.urlopen(url, timeout=self.timeout) as resp:
            return resp.read()

    def geocode(self, query: str) -> list[GeoCandidate]:
        if not query.strip():
            raise ValueError("empty geocoding query")
        last: Exception | None = None
        for attempt in range(self.attempts):
            self.limiter.wait()
            try:
                body = self._request(query)
                break
            except urllib.error.HTTPError as exc:
                last = exc
                if 400 <= exc.code < 500 and exc.code != 429:
                    raise GeocoderError(f"geocoder rejected {query!r}: HTTP {exc.code}") from exc
            except (urllib.error.URLError, OSError) as exc:
                last = exc
            if attempt + 1 < self.attempts:
                time.sleep(self.backoff * (2 ** attempt) * (0.5 + self._rng.random()))
        else:
            raise GeocoderError(f"geocoder failed for {query!r} after {self.attempts} attempts: {last}")
        try:
            items = json.loads(body)
            return [GeoCandidate(query, float(it["lat"]), float(it["lng"]), i) for i, it in enumerate(items)]
        except (ValueError, KeyError, TypeError) as exc:
            raise GeocoderError(f"malformed geocoder response for {query!r}: {exc}") from exc


def geocode(client: Geocoder, query: str) -> list[GeoCandidate]:
    return client.geocode(query)


def geocode_queries(texts: Sequence[str], mode: str) -> list[str]:
    """The query strings each mode sends, in order."""
    if mode == "phrase_by_phrase":
        return [t for t in texts if t.strip()]
    words = [w for t in texts for w in t.split()]
    if mode == "word_by_word":
        return words
    if mode == "word2paragraph":
        return [" ".join(words)] if words else []
    raise ValueError(f"unknown geocoding mode {mode!r}")


def geocode_sheet(texts: Sequence[str], mode: str, client: Geocoder, workers: int = 1) -> list[GeoCandidate]:
    """Geocode phrase strings (or, for word modes, their words).

    Individual failures are logged and skipped; if every call fails at the
    transport level the last error is raised.
    """
    queries = geocode_queries(texts, mode)
    if not queries:
        return []

    def call(q: str):
        try:
            return client.geocode(q)
        except GeocoderError as exc:
            log.warning("geocoding %r failed: %s", q, exc)
            return exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(call, queries))
    else:
        results = [call(q) for q in queries]
    failures = [r for r in results if isinstance(r, Exception)]
    if len(failures) == len(results):
        raise GeocoderError(f"all {len(results)} geocoding calls failed") from failures[-1]
    out: list[GeoCandidate] = []
    for r in results:
        if isinstance(r, Exception):
            continue
        out.extend(r[:1] if mode == "word2paragraph" else r)
    return out


# -- clustering ------------------------------------------------------------

def dbscan(points: Sequence[tuple[float, float]], eps_km: float, min_pts: int) -> list[int]:
    """Label each point with a cluster index (0, 1, ...) or -1 for noise.

    Neighbourhoods include the point itself. Points are scanned in input
    order; a border point joins the first cluster that reaches it.
    """
    if eps_km <= 0 or min_pts < 1:
        raise ValueError("eps_km must be > 0 and min_pts >= 1")
    n = len(points)
    if n == 0:
        return []
    pts = np.asarray(points, dtype=float)
    D = haversine_matrix(pts[:, 0], pts[:, 1])
    neigh = [np.flatnonzero(D[i] <= eps_km) for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in neigh])
    labels = [-2] * n  # -2 unvisited
    cluster = -1
    for i in range(n):
        if labels[i] != -2:
            continue
        if not core[i]:
            labels[i] = -1
            continue
        cluster += 1
        labels[i] = cluster
        queue = list(neigh[i])
        while queue:
            j = int(queue.pop(0))
            if labels[j] == -1:
                labels[j] = cluster
            if labels[j] != -2:
                continue
            labels[j] = cluster
            if core[j]:
                queue.extend(neigh[j])
    return labels


def estimate_location(candidates: Sequence[GeoCandidate], eps_km: float = 10.0, min_pts: int = 3) -> GeoEstimate:
    """Centroid of the most populous DBSCAN cluster.

    Ties go to the tighter cluster (smaller mean distance to its centroid),
    then to the one formed first. With no cluster at all, the mean of every
    candidate is returned and flagged ``degraded``.
    """
    if not candidates:
        raise ValueError("no candidates to estimate from")
    pts = [(c.lat, c.lng) for c in candidates]
    labels = dbscan(pts, eps_km, min_pts)
    arr = np.asarray(pts, dtype=float)
    n_clusters = max(labels) + 1
    if n_clusters == 0:
        lat, lng = arr.mean(axis=0)
        return GeoEstimate(float(lat), float(lng), 0, len(pts), True)
    best = None
    for k in range(n_clusters):
        members = arr[[i for i, lab in enumerate(labels) if lab == k]]
        centroid = members.mean(axis=0)
        spread = float(np.mean([haversine_km(tuple(centroid), tuple(m)) for m in members]))
        key = (-len(members), spread, k)
        if best is None or key < best[0]:
            best = (key, centroid, len(members))
    _, centroid, size = best
    return GeoEstimate(float(centroid[0]), float(centroid[1]), size, len(pts), False)


def write_estimates(estimates: dict[str, GeoEstimate | None], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for mode in MODES:
            if mode not in estimates:
                continue
            e = estimates[mode]
            if e is None:
                fh.write(f"geo {mode} - - 0 0 1\n")
            else:
                fh.write(f"geo {mode} {e.lat!r} {e.lng!r} {e.cluster_size} {e.total} {int(e.degraded)}\n")


def read_estimates(path: str | Path) -> dict[str, GeoEstimate | None]:
    out: dict[str, GeoEstimate | None] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if tok[0] != "geo" or len(tok) != 7 or tok[1] not in MODES:
                raise ValueError(f"{path}:{lineno}: malformed geo record")
            if tok[2] == "-":
                out[tok[1]] = None
            else:
                out[tok[1]] = GeoEstimate(float(tok[2]), float(tok[3]), int(tok[4]), int(tok[5]), tok[6] == "1")
    return out
