"""Map-sheet annotation parsing and per-region geometry.

Sheet files are line-delimited UTF-8 text::

    sheet <id> <W> <H> [gt_lat gt_lng] [tmin_lat tmin_lng tmax_lat tmax_lng]
    region <id> <x1> <y1> <x2> <y2> <x3> <y3> <x4> <y4> <text...>
    group <id1> <id2> ...

Blank lines and lines starting with ``#`` are ignored. The header carries
2, 4 or 6 optional numbers: 2 is a ground-truth location, 4 is the plot-area
corners alone, 6 is both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

Point = tuple[float, float]
LatLng = tuple[float, float]

_AREA_EPS = 1e-9


class SheetFormatError(ValueError):
    """Malformed annotation file. Carries the offending line number."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip())


class SheetValidationError(ValueError):
    pass


class DegeneratePolygonError(SheetValidationError):
    pass


def _polygon_area(poly: Sequence[Point]) -> float:
    s = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        s += x1 * y2 - x2 * y1
    return 0.5 * s


def derive_geometry(polygon: Sequence[Point]) -> tuple[Point, float, float, float]:
    """Return ``(center, width, height, angle)`` for a 4-corner box.

    Width is the mean length of the longer pair of opposite edges, height the
    shorter pair. The angle is the direction of the long edge measured
    clockwise from screen-up (image y grows downwards), so a horizontal box is
    90 and a vertical one 0. Result is folded into [0, 180).
    """
    if len(polygon) != 4:
        raise DegeneratePolygonError(f"expected 4 corners, got {len(polygon)}")
    pts = [(float(x), float(y)) for x, y in polygon]
    if not all(math.isfinite(v) for p in pts for v in p):
        raise DegeneratePolygonError("non-finite corner coordinate")
    if abs(_polygon_area(pts)) <= _AREA_EPS:
        raise DegeneratePolygonError("polygon has zero area (collinear corners)")

    cx = sum(p[0] for p in pts) / 4.0
    cy = sum(p[1] for p in pts) / 4.0

    def edge(i: int) -> Point:
        (x1, y1), (x2, y2) = pts[i], pts[(i + 1) % 4]
        return x2 - x1, y2 - y1

    e01, e12, e23, e30 = (edge(i) for i in range(4))
    len_a = (math.hypot(*e01) + math.hypot(*e23)) / 2.0
    len_b = (math.hypot(*e12) + math.hypot(*e30)) / 2.0
    # near-square boxes keep the first edge pair so rounding can't flip the angle
    width, height = max(len_a, len_b), min(len_a, len_b)
    if len_a >= len_b * (1.0 - 1e-9):
        dx, dy = e01[0] - e23[0], e01[1] - e23[1]
    else:
        dx, dy = e12[0] - e30[0], e12[1] - e30[1]
    # opposite edges run in opposite directions around the polygon
    angle = math.degrees(math.atan2(dx, -dy)) % 180.0
    if angle >= 180.0 - 1e-9:
        angle = 0.0
    angle = round(angle, 9) % 180.0
    return (cx, cy), width, height, angle


def caps_flag(text: str) -> int:
    letters = [c for c in text if c.isalpha()]
    if not letters:
        return 0
    return int(all(c.isupper() for c in letters))


@dataclass(frozen=True)
class TextRegion:
    id: str
    text: str
    polygon: tuple[Point, Point, Point, Point]
    center: Point = field(init=False)
    width: float = field(init=False)
    height: float = field(init=False)
    angle: float = field(init=False)
    caps: int = field(init=False)

    def __post_init__(self) -> None:
        text = self.text.strip()
        if not text:
            raise SheetValidationError(f"region {self.id!r}: empty transcription")
        poly = tuple((float(x), float(y)) for x, y in self.polygon)
        try:
            center, width, height, angle = derive_geometry(poly)
        except DegeneratePolygonError as exc:
            raise DegeneratePolygonError(f"region {self.id!r}: {exc}") from None
        object.__setattr__(self, "text", text)
        object.__setattr__(self, "polygon", poly)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "width", width)
        object.__setattr__(self, "height", height)
        object.__setattr__(self, "angle", angle)
        object.__setattr__(self, "caps", caps_flag(text))

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        xs = [p[0] for p in self.polygon]
        ys = [p[1] for p in self.polygon]
        return min(xs), min(ys), max(xs), max(ys)

    @classmethod
    def from_box(cls, id: str, text: str, x0: float, y0: float, x1: float, y1: float) -> "TextRegion":
        return cls(id, text, ((x0, y0), (x1, y0), (x1, y1), (x0, y1)))


@dataclass(frozen=True)
class MapSheet:
    sheet_id: str
    width: float
    height: float
    regions: tuple[TextRegion, ...]
    groups: tuple[tuple[str, ...], ...] = ()
    gt_location: LatLng | None = None
    corners: tuple[LatLng, LatLng] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "groups", tuple(tuple(g) for g in self.groups))
        if not self.sheet_id or any(c.isspace() for c in self.sheet_id):
            raise SheetValidationError(f"invalid sheet id {self.sheet_id!r}")
        if not (self.width > 0 and self.height > 0):
            raise SheetValidationError("sheet dimensions must be positive")
        seen: set[str] = set()
        for r in self.regions:
            if r.id in seen:
                raise SheetValidationError(f"duplicate region id {r.id!r}")
            seen.add(r.id)
        grouped: set[str] = set()
        for g in self.groups:
            if not g:
                raise SheetValidationError("empty ground-truth group")
            for rid in g:
                if rid not in seen:
                    raise SheetValidationError(f"group references unknown region {rid!r}")
                if rid in grouped:
                    raise SheetValidationError(f"region {rid!r} appears in more than one group")
                grouped.add(rid)
        if self.gt_location is not None:
            _check_latlng(self.gt_location)
        if self.corners is not None:
            _check_latlng(self.corners[0])
            _check_latlng(self.corners[1])

    def region(self, rid: str) -> TextRegion:
        try:
            return self._index[rid]
        except KeyError:
            raise KeyError(f"unknown region id {rid!r} on sheet {self.sheet_id}") from None

    @property
    def _index(self) -> dict[str, TextRegion]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {r.id: r for r in self.regions}
            object.__setattr__(self, "_idx", idx)
        return idx

    def all_groups(self) -> list[tuple[str, ...]]:
        """Ground-truth groups plus a singleton for every ungrouped region."""
        grouped = {rid for g in self.groups for rid in g}
        out = [tuple(g) for g in self.groups]
        out += [(r.id,) for r in self.regions if r.id not in grouped]
        return out


def _check_latlng(p: LatLng) -> None:
    lat, lng = p
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lng <= 180.0):
        raise SheetValidationError(f"coordinate out of range: {p}")


def _floats(tokens: Sequence[str], lineno: int, what: str, source: str | None) -> list[float]:
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise SheetFormatError(f"non-numeric {what}: {' '.join(tokens)}", lineno, source) from None
    if not all(math.isfinite(v) for v in vals):
        raise SheetFormatError(f"non-finite {what}", lineno, source)
    return vals


def parse_sheet_text(text: str, source: str | None = None) -> MapSheet:
    header = None
    regions: list[TextRegion] = []
    groups: list[tuple[str, ...]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        kind = line.split(None, 1)[0]
        if kind == "sheet":
            if header is not None:
                raise SheetFormatError("second sheet header", lineno, source)
            tok = line.split()
            if len(tok) not in (4, 6, 8, 10):
                raise SheetFormatError("header needs id, W, H and 0, 2, 4 or 6 coordinates", lineno, source)
            w, h = _floats(tok[2:4], lineno, "sheet size", source)
            extra = _floats(tok[4:], lineno, "header coordinates", source)
            gt = None
            corners = None
            if len(extra) in (2, 6):
                gt = (extra[0], extra[1])
                extra = extra[2:]
            if len(extra) == 4:
                corners = ((extra[0], extra[1]), (extra[2], extra[3]))
            header = (tok[1], w, h, gt, corners)
        elif kind == "region":
            if header is None:
                raise SheetFormatError("region before sheet header", lineno, source)
            tok = line.split(None, 10)
            if len(tok) < 11:
                raise SheetFormatError("region needs id, 8 coordinates and text", lineno, source)
            c = _floats(tok[2:10], lineno, "polygon", source)
            poly = ((c[0], c[1]), (c[2], c[3]), (c[4], c[5]), (c[6], c[7]))
            try:
                regions.append(TextRegion(tok[1], tok[10], poly))
            except SheetValidationError as exc:
                raise type(exc)(f"{source or '<sheet>'}:{lineno}: {exc}") from None
        elif kind == "group":
            tok = line.split()
            if len(tok) < 2:
                raise SheetFormatError("empty group", lineno, source)
            groups.append(tuple(tok[1:]))
        else:
            raise SheetFormatError(f"unknown record type {kind!r}", lineno, source)
    if header is None:
        raise SheetFormatError("missing sheet header", None, source)
    sid, w, h, gt, corners = header
    return MapSheet(sid, w, h, tuple(regions), tuple(groups), gt, corners)


def parse_sheet(path: str | Path) -> MapSheet:
    path = Path(path)
    return parse_sheet_text(path.read_text(encoding="utf-8"), source=str(path))


def _num(v: float) -> str:
    return repr(float(v))


def emit_sheet(sheet: MapSheet) -> str:
    head = ["sheet", sheet.sheet_id, _num(sheet.width), _num(sheet.height)]
    if sheet.gt_location is not None:
        head += [_num(v) for v in sheet.gt_location]
    if sheet.corners is not None:
        head += [_num(v) for p in sheet.corners for v in p]
    lines = [" ".join(head)]
    for r in sheet.regions:
        coords = " ".join(_num(v) for p in r.polygon for v in p)
        lines.append(f"region {r.id} {coords} {r.text}")
    for g in sheet.groups:
        lines.append("group " + " ".join(g))
    return "\n".join(lines) + "\n"


def write_sheet(sheet: MapSheet, path: str | Path) -> None:
    Path(path).write_text(emit_sheet(sheet), encoding="utf-8")


def iter_sheet_files(paths: Iterable[str | Path]) -> list[Path]:
    """Expand directories to their ``*.sheet`` files, sorted by name."""
    out: list[Path] = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(sorted(p.glob("*.sheet")))
        else:
            out.append(p)
    return out
