"""From pairwise link decisions to ordered location phrases."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .ingest import MapSheet


@dataclass(frozen=True)
class LinkageGraph:
    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]]

    def successors(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n: [] for n in self.nodes}
        for a, b in sorted(self.edges):
            out[a].append(b)
        return out


@dataclass(frozen=True)
class LocationPhrase:
    ids: tuple[str, ...]
    text: str
    mode: str = "scc"


def build_graph(sheet: MapSheet, decisions: Iterable[tuple[str, str]]) -> LinkageGraph:
    nodes = tuple(r.id for r in sheet.regions)
    known = set(nodes)
    edges = set()
    for a, b in decisions:
        if a not in known or b not in known:
            raise KeyError(f"edge {a}->{b} references an unknown region")
        if a == b:
            raise ValueError(f"self-edge on {a!r}")
        edges.add((a, b))
    return LinkageGraph(nodes, frozenset(edges))


def _ordered(groups: Iterable[Iterable[str]]) -> list[list[str]]:
    return sorted((sorted(g) for g in groups), key=lambda g: g[0])


def strongly_connected_components(graph: LinkageGraph) -> list[list[str]]:
    """Tarjan's algorithm, iterative. Groups sorted internally and by first id."""
    succ = graph.successors()
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    groups: list[list[str]] = []
    counter = 0
    for root in graph.nodes:
        if root in index:
            continue
        work = [(root, iter(succ[root]))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(succ[w])))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                groups.append(comp)
    return _ordered(groups)


def weakly_connected_components(graph: LinkageGraph) -> list[list[str]]:
    parent = {n: n for n in graph.nodes}

    def find(x: str) -> str:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in graph.edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    comps: dict[str, list[str]] = {}
    for n in graph.nodes:
        comps.setdefault(find(n), []).append(n)
    return _ordered(comps.values())


def order_and_join(group: Sequence[str], sheet: MapSheet, mode: str = "scc") -> LocationPhrase:
    """Sort members left to right (then top to bottom, then id) and join texts."""
    if not group:
        raise ValueError("empty group")
    regions = sorted((sheet.region(rid) for rid in group), key=lambda r: (r.center[0], r.center[1], r.id))
    return LocationPhrase(tuple(r.id for r in regions), " ".join(r.text for r in regions), mode)


def phrases_from_edges(
    sheet: MapSheet,
    edges: Iterable[tuple[str, str]],
    mode: str = "scc",
) -> list[LocationPhrase]:
    graph = build_graph(sheet, edges)
    if mode == "scc":
        groups = strongly_connected_components(graph)
    elif mode == "wcc":
        groups = weakly_connected_components(graph)
    else:
        raise ValueError(f"unknown component mode {mode!r}")
    return [order_and_join(g, sheet, mode) for g in groups]


def write_phrases(sheet_id: str, phrases: Iterable[LocationPhrase], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ph in phrases:
            fh.write(f"phrase {sheet_id} {ph.text} | {','.join(ph.ids)}\n")


def read_phrases(path: str | Path) -> tuple[str | None, list[LocationPhrase]]:
    sheet_id = None
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            head, sep, ids = line.rpartition(" | ")
            tok = head.split(" ", 2)
            if not sep or len(tok) != 3 or tok[0] != "phrase" or not ids:
                raise ValueError(f"{path}:{lineno}: malformed phrase record")
            if sheet_id is None:
                sheet_id = tok[1]
            elif tok[1] != sheet_id:
                raise ValueError(f"{path}:{lineno}: mixed sheet ids in phrase file")
            out.append(LocationPhrase(tuple(ids.split(",")), tok[2]))
    return sheet_id, out
