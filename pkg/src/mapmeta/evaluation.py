"""Metrics for linkage, phrases, geolocation and error breakdowns."""

from __future__ import annotations

import csv
import statistics
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Sequence

from .consensus import read_edges
from .geolocalizer import MODES, haversine_km, read_estimates
from .ingest import iter_sheet_files, parse_sheet
from .phrase_graph import phrases_from_edges, read_phrases


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    def __iter__(self):
        return iter((self.precision, self.recall, self.f1))


def _prf(tp: float, n_pred: float, n_gt: float) -> PRF:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return PRF(p, r, f)


@dataclass(frozen=True)
class LinkageCounts:
    tp: int
    fp: int
    fn: int

    def prf(self) -> PRF:
        return _prf(self.tp, self.tp + self.fp, self.tp + self.fn)


def gt_edges(groups: Iterable[Sequence[str]], mode: str = "all_pairs") -> set[tuple[str, str]]:
    """Directed ground-truth links implied by ordered phrase groups.

    ``all_pairs`` links every ordered pair in a group; ``chain`` links only
    neighbours in reading order, both directions.
    """
    out: set[tuple[str, str]] = set()
    for g in groups:
        g = list(g)
        if mode == "all_pairs":
            out.update((a, b) for a in g for b in g if a != b)
        elif mode == "chain":
            for a, b in zip(g, g[1:]):
                out.update({(a, b), (b, a)})
        else:
            raise ValueError(f"unknown ground-truth edge mode {mode!r}")
    return out


def linkage_counts(pred_edges: Iterable[tuple[str, str]], gt: Iterable[tuple[str, str]]) -> LinkageCounts:
    pred, gold = set(pred_edges), set(gt)
    tp = len(pred & gold)
    return LinkageCounts(tp, len(pred) - tp, len(gold) - tp)


def linkage_prf(pred_edges: Iterable[tuple[str, str]], gt: Iterable[tuple[str, str]]) -> PRF:
    return linkage_counts(pred_edges, gt).prf()


def _multiset_prf(pred: Sequence[Hashable], gt: Sequence[Hashable], mode: str) -> PRF:
    if mode == "duplicate":
        cp, cg = Counter(pred), Counter(gt)
        tp = sum(min(n, cg[k]) for k, n in cp.items())
        return _prf(tp, len(pred), len(gt))
    if mode == "distinct":
        sp, sg = set(pred), set(gt)
        return _prf(len(sp & sg), len(sp), len(sg))
    raise ValueError(f"unknown phrase mode {mode!r}")


def phrase_prf(pred_phrases: Sequence[str], gt_phrases: Sequence[str], mode: str = "duplicate") -> PRF:
    """Exact-string phrase matching, with or without duplicate counting."""
    return _multiset_prf(list(pred_phrases), list(gt_phrases), mode)


def ordered_group_prf(pred_groups, gt_groups, mode: str = "duplicate") -> PRF:
    """Phrase matching on region-id sequences: same words in the same order."""
    return _multiset_prf([tuple(g) for g in pred_groups], [tuple(g) for g in gt_groups], mode)


def unordered_phrase_prf(pred_groups, gt_groups, mode: str = "duplicate") -> PRF:
    """Phrase matching on region-id sets, ignoring word order."""
    return _multiset_prf([frozenset(g) for g in pred_groups], [frozenset(g) for g in gt_groups], mode)


@dataclass(frozen=True)
class GeoError:
    err_km: float
    err_scale: float | None = None


def geo_error(gt, pred, t_min=None, t_max=None) -> GeoError:
    km = haversine_km(gt, pred)
    if t_min is None or t_max is None:
        return GeoError(km)
    diag = haversine_km(t_min, t_max)
    if diag <= 0:
        raise ValueError("plot-area corners coincide")
    return GeoError(km, km / diag)


def error_decomposition(pred_groups, gt_groups) -> tuple[int, int]:
    """Word counts missing from / added to each ground-truth group.

    Each ground-truth group is paired with the predicted group sharing the
    most region ids (ties: smaller predicted group, then earlier). Groups with
    no overlap contribute all their words as missing.
    """
    preds = [set(g) for g in pred_groups]
    n_miss = n_add = 0
    for g in gt_groups:
        g = set(g)
        best = None
        for k, p in enumerate(preds):
            ov = len(g & p)
            if ov == 0:
                continue
            key = (-ov, len(p), k)
            if best is None or key < best[0]:
                best = (key, p)
        if best is None:
            n_miss += len(g)
            continue
        p = best[1]
        n_miss += len(g - p)
        n_add += len(p - g)
    return n_miss, n_add


def error_histogram(errors: Iterable[float], edges: Sequence[float]) -> list[int]:
    """Counts per ``[e_i, e_{i+1})`` bin plus a trailing overflow bin."""
    edges = list(edges)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must be strictly increasing (at least two)")
    counts = [0] * len(edges)
    for e in errors:
        if e < edges[0]:
            raise ValueError(f"value {e} below the first bin edge {edges[0]}")
        if e >= edges[-1]:
            counts[-1] += 1
            continue
        lo, hi = 0, len(edges) - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if e >= edges[mid]:
                lo = mid
            else:
                hi = mid
        counts[lo] += 1
    return counts


def write_histogram_csv(path: str | Path, edges: Sequence[float], series: dict[str, Sequence[int]]) -> None:
    names = list(series)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo_km", "bin_hi_km", *names])
        for i in range(len(edges)):
            hi = repr(float(edges[i + 1])) if i + 1 < len(edges) else "inf"
            w.writerow([repr(float(edges[i])), hi, *(series[n][i] for n in names)])


# -- directory evaluation -------------------------------------------------

class EvalInputError(ValueError):
    pass


@dataclass
class EvalReport:
    evaluated: list[str]
    missing_gt: list[str]
    missing_pred: list[str]
    tables: dict[str, Path]
    summary: dict


DEFAULT_HIST_EDGES = (0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0)
_PRED_SUFFIXES = (".edges", ".phrases", ".geo", ".candidates")


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def evaluate_dirs(
    pred_dir: str | Path,
    gt_dir: str | Path,
    out_dir: str | Path,
    edge_mode: str = "all_pairs",
    hist_edges: Sequence[float] = DEFAULT_HIST_EDGES,
) -> EvalReport:
    """Score pipeline outputs in ``pred_dir`` against annotated ``*.sheet`` files.

    Writes ``linkage.csv``, ``phrases.csv``,
    ``geolocation.csv``, ``errors.csv`` and ``histogram.csv``.
    Sheet ids present on only one side are reported and skipped.
    """
    pred_dir, out_dir = Path(pred_dir), Path(out_dir)
    if not pred_dir.is_dir():
        raise EvalInputError(f"prediction directory not found: {pred_dir}")
    if not Path(gt_dir).is_dir():
        raise EvalInputError(f"ground-truth directory not found: {gt_dir}")
    pred_ids = sorted({p.stem for p in pred_dir.iterdir() if p.suffix in _PRED_SUFFIXES})
    if not pred_ids:
        raise EvalInputError(f"no prediction artifacts in {pred_dir}")
    gt = {}
    for path in iter_sheet_files([gt_dir]):
        s = parse_sheet(path)
        gt[s.sheet_id] = s
    if not gt:
        raise EvalInputError(f"no ground-truth sheets in {gt_dir}")
    evaluated = [i for i in pred_ids if i in gt]
    missing_gt = [i for i in pred_ids if i not in gt]
    missing_pred = sorted(i for i in gt if i not in set(pred_ids))
    if not evaluated:
        raise EvalInputError("no sheet id is shared by predictions and ground truth")

    link = {"textual": [0, 0, 0], "consensus": [0, 0, 0]}
    has_textual = has_edges = False
    groups: dict[str, tuple[list, list]] = {}  # method -> (pred id groups, gt id groups)
    texts: dict[str, list[str]] = {}
    gt_texts: list[str] = []
    gt_groups: list[tuple[str, ...]] = []
    geo_rows = []
    errors: dict[str, list[float]] = {m: [] for m in MODES}

    def add(method: str, sid: str, ph) -> None:
        texts.setdefault(method, []).extend(p.text for p in ph)
        groups.setdefault(method, ([], []))[0].extend(tuple(f"{sid}/{i}" for i in p.ids) for p in ph)

    for sid in evaluated:
        sheet = gt[sid]
        sheet_groups = sheet.all_groups()
        gold = gt_edges(sheet.groups, edge_mode)
        gt_groups.extend(tuple(f"{sid}/{i}" for i in g) for g in sheet_groups)
        gt_texts.extend(" ".join(sheet.region(i).text for i in g) for g in sheet_groups)

        cand = pred_dir / f"{sid}.candidates"
        if cand.exists():
            has_textual = True
            c = linkage_counts([(a, b) for a, b, _, _ in read_edges(cand)], gold)
            link["textual"] = [x + y for x, y in zip(link["textual"], (c.tp, c.fp, c.fn))]
        edge_path = pred_dir / f"{sid}.edges"
        if edge_path.exists():
            has_edges = True
            edges = [(a, b) for a, b, _, _ in read_edges(edge_path)]
            c = linkage_counts(edges, gold)
            link["consensus"] = [x + y for x, y in zip(link["consensus"], (c.tp, c.fp, c.fn))]
            for mode in ("scc", "wcc"):
                add(mode, sid, phrases_from_edges(sheet, edges, mode))
        phrase_path = pred_dir / f"{sid}.phrases"
        if phrase_path.exists():
            add("predicted", sid, read_phrases(phrase_path)[1])

        geo_path = pred_dir / f"{sid}.geo"
        if geo_path.exists() and sheet.gt_location is not None:
            corners = sheet.corners or (None, None)
            for mode, est in read_estimates(geo_path).items():
                if est is None:
                    geo_rows.append((sid, mode, "", ""))
                    continue
                e = geo_error(sheet.gt_location, (est.lat, est.lng), *corners)
                errors[mode].append(e.err_km)
                geo_rows.append((sid, mode, e.err_km, "" if e.err_scale is None else e.err_scale))

    out_dir.mkdir(parents=True, exist_ok=True)
    tables = {name: out_dir / f"{name}.csv" for name in
              ("linkage", "phrases", "geolocation", "errors", "histogram")}
    summary: dict = {"sheets": len(evaluated)}

    rows = []
    for method, used in (("textual", has_textual), ("consensus", has_edges)):
        if used:
            c = LinkageCounts(*link[method])
            prf = c.prf()
            rows.append((method, *prf, c.tp, c.fp, c.fn))
            summary[f"linkage_{method}_f1"] = prf.f1
    _write_rows(tables["linkage"], ("method", "precision", "recall", "f1", "tp", "fp", "fn"), rows)

    rows = []
    for method in ("predicted", "scc", "wcc"):
        if method not in texts:
            continue
        for mode in ("duplicate", "distinct"):
            prf = phrase_prf(texts[method], gt_texts, mode)
            rows.append((method, mode, *prf))
            summary[f"phrase_{method}_{mode}_f1"] = prf.f1
    _write_rows(tables["phrases"], ("method", "mode", "precision", "recall", "f1"), rows)

    _write_rows(tables["geolocation"], ("sheet_id", "mode", "err_km", "err_scale"), geo_rows)

    rows = []
    for method in ("predicted", "scc", "wcc"):
        if method not in groups:
            continue
        pred_groups = groups[method][0]
        n_miss, n_add = error_decomposition(pred_groups, gt_groups)
        rows.append((method, n_miss, n_add, *ordered_group_prf(pred_groups, gt_groups),
                     *unordered_phrase_prf(pred_groups, gt_groups)))
    _write_rows(tables["errors"],
                ("method", "n_miss", "n_add", "ordered_precision", "ordered_recall", "ordered_f1",
                 "unordered_precision", "unordered_recall", "unordered_f1"), rows)

    modes = [m for m in MODES if errors[m]]
    write_histogram_csv(tables["histogram"], hist_edges, {m: error_histogram(errors[m], hist_edges) for m in modes})
    for m in modes:
        summary[f"geo_{m}_median_km"] = float(statistics.median(errors[m]))
    return EvalReport(evaluated, missing_gt, missing_pred, tables, summary)
