"""Combine textual candidates with a probability map.

A candidate survives when the mean of the (binarized) map over its
rasterized footprint is strictly greater than ``theta``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .features import EmbeddingTable, sheet_features
from .ingest import MapSheet, TextRegion
from .textual_linker import LinkerModel, query_probabilities, retrieve_candidates
from .visual_linker import (
    DEFAULT_SIZE,
    FrameError,
    ProbabilityMap,
    RasterFrame,
    binarize,
    candidate_frame,
    load_probability_map,
    surrogate_probability_map,
)


@dataclass(frozen=True)
class ConsensusConfig:
    theta: float = 0.5
    binarize_p: float | None = 0.5
    text_threshold: float = 0.5
    size: int = DEFAULT_SIZE

    def __post_init__(self) -> None:
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must be in (0, 1), got {self.theta}")
        if self.binarize_p is not None and not 0.0 < self.binarize_p < 1.0:
            raise ValueError(f"binarization threshold must be in (0, 1), got {self.binarize_p}")


class MapProvider(Protocol):
    def __call__(self, sheet: MapSheet, query: TextRegion, candidates: Sequence[TextRegion],
                 frame: RasterFrame) -> ProbabilityMap: ...


def surrogate_maps(sheet: MapSheet, query: TextRegion, candidates: Sequence[TextRegion],
                   frame: RasterFrame) -> ProbabilityMap:
    return surrogate_probability_map(query, candidates, frame)


class DirectoryMaps:
    """Externally computed maps stored as ``<root>/<sheet_id>/<query_id>.{pgm,txt}``."""

    def __init__(self, root: str | Path, fallback: MapProvider | None = None):
        self.root = Path(root)
        self.fallback = fallback

    def __call__(self, sheet, query, candidates, frame):
        for ext in (".pgm", ".txt"):
            path = self.root / sheet.sheet_id / f"{query.id}{ext}"
            if path.exists():
                return load_probability_map(path, frame)
        if self.fallback is not None:
            return self.fallback(sheet, query, candidates, frame)
        raise FileNotFoundError(f"no probability map for {sheet.sheet_id}/{query.id}")


def rasterize_box(region: TextRegion, frame: RasterFrame) -> np.ndarray:
    if not frame.overlaps(region):
        raise FrameError(f"region {region.id!r} lies outside the frame")
    return frame.footprint(region)


def consensus_score(mask: np.ndarray, prob: ProbabilityMap | np.ndarray) -> float:
    grid = prob.grid if isinstance(prob, ProbabilityMap) else np.asarray(prob, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != grid.shape:
        raise ValueError(f"mask {mask.shape} and map {grid.shape} differ in size")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("empty footprint")
    return float(grid[mask].sum() / count)


def consensus_decision(score: float, theta: float) -> bool:
    return score > theta


@dataclass(frozen=True)
class LinkDecision:
    query: str
    candidate: str
    textual_p: float
    score: float
    linked: bool


def score_query(
    sheet: MapSheet,
    query_id: str,
    candidate_probs: dict[str, float],
    maps: MapProvider = surrogate_maps,
    config: ConsensusConfig = ConsensusConfig(),
    image: np.ndarray | None = None,
) -> list[LinkDecision]:
    """Consensus scores for one query's textual candidates (region order)."""
    if not candidate_probs:
        return []
    query = sheet.region(query_id)
    cands = [sheet.region(c) for c in candidate_probs]
    frame = candidate_frame(query, cands, image=image, size=config.size)
    pmap = maps(sheet, query, cands, frame)
    if config.binarize_p is not None:
        pmap = binarize(pmap, config.binarize_p)
    out = []
    for cand in cands:
        score = consensus_score(rasterize_box(cand, frame), pmap)
        out.append(LinkDecision(query_id, cand.id, candidate_probs[cand.id], score,
                                consensus_decision(score, config.theta)))
    return out


def link_query(
    model: LinkerModel,
    sheet: MapSheet,
    query_id: str,
    maps: MapProvider = surrogate_maps,
    config: ConsensusConfig = ConsensusConfig(),
    features: np.ndarray | None = None,
    table: EmbeddingTable | None = None,
    image: np.ndarray | None = None,
) -> set[str]:
    cands = retrieve_candidates(model, sheet, query_id, config.text_threshold, features, table)
    return {d.candidate for d in score_query(sheet, query_id, cands, maps, config, image) if d.linked}


def link_sheet(
    model: LinkerModel,
    sheet: MapSheet,
    table: EmbeddingTable,
    maps: MapProvider = surrogate_maps,
    config: ConsensusConfig = ConsensusConfig(),
    image: np.ndarray | None = None,
    textual: Callable[[int], np.ndarray] | None = None,
) -> list[LinkDecision]:
    """Query every region of ``sheet`` in turn; return all scored candidates.

    ``textual`` overrides the model's per-query probability row, mainly for
    tests that force the textual stage.
    """
    ids = [r.id for r in sheet.regions]
    if textual is None:
        F = sheet_features(sheet, table)
        textual = lambda qi: query_probabilities(model, F, qi)  # noqa: E731
    decisions: list[LinkDecision] = []
    for qi, qid in enumerate(ids):
        probs = textual(qi)
        cands = {rid: float(p) for k, (rid, p) in enumerate(zip(ids, probs))
                 if k != qi and p > config.text_threshold}
        decisions.extend(score_query(sheet, qid, cands, maps, config, image))
    return decisions


def write_edges(decisions: Iterable[LinkDecision], path: str | Path, linked_only: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in decisions:
            if linked_only and not d.linked:
                continue
            fh.write(f"edge {d.query} {d.candidate} {d.textual_p!r} {d.score!r}\n")


def read_edges(path: str | Path) -> list[tuple[str, str, float, float]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if tok[0] != "edge" or len(tok) != 5:
                raise ValueError(f"{path}:{lineno}: malformed edge record")
            out.append((tok[1], tok[2], float(tok[3]), float(tok[4])))
    return out
