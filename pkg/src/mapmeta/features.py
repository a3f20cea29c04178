"""Textual feature vectors for text regions.

Each region becomes ``embedding(50) + [cx, cy, angle, font_area, caps]``.
Locations and font area are min-max scaled to [-1, 1] over the sheet, the
angle is divided by 180.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .ingest import MapSheet, TextRegion

N_SCALAR = 5
ANGLE_DIVISOR = 180.0


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingTable:
    vectors: Mapping[str, np.ndarray]
    dim: int
    oov: str = "zeros"  # or "hash"

    def __post_init__(self) -> None:
        if self.oov not in ("zeros", "hash"):
            raise ValueError(f"unknown OOV policy {self.oov!r}")

    def __len__(self) -> int:
        return len(self.vectors)

    def lookup(self, token: str) -> np.ndarray:
        vec = self.vectors.get(token.lower())
        if vec is not None:
            return vec
        if self.oov == "hash":
            return _hash_unit_vector(token.lower(), self.dim)
        return np.zeros(self.dim)


def _hash_unit_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


def load_embeddings(path: str | Path, dim: int | None = None, oov: str = "zeros") -> EmbeddingTable:
    """Read a GloVe-style text file: ``token v1 ... vD`` per line.

    The dimension comes from the first line unless ``dim`` is given; every
    line must agree. Later duplicates of a token are ignored.
    """
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if not parts or parts == [""]:
                continue
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise EmbeddingFormatError(f"{path}:{lineno}: no vector values")
            if len(values) != dim:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: expected {dim} values for {token!r}, got {len(values)}"
                )
            try:
                vec = np.array([float(v) for v in values])
            except ValueError:
                raise EmbeddingFormatError(f"{path}:{lineno}: non-numeric vector value") from None
            vectors.setdefault(token.lower(), vec)
    if not vectors:
        raise EmbeddingFormatError(f"{path}: empty embedding file")
    for v in vectors.values():
        v.setflags(write=False)
    return EmbeddingTable(vectors, int(dim), oov)


def write_embeddings(vectors: Mapping[str, Iterable[float]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok, vec in vectors.items():
            fh.write(tok + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def embed_word(table: EmbeddingTable, text: str) -> np.ndarray:
    """Embedding of a transcription; multi-token text averages its tokens."""
    tokens = text.split()
    if not tokens:
        raise ValueError("cannot embed an empty token")
    if len(tokens) == 1:
        return table.lookup(tokens[0]).copy()
    return np.mean([table.lookup(t) for t in tokens], axis=0)


def font_area(region: TextRegion) -> float:
    return region.width * region.height / len(region.text)


@dataclass(frozen=True)
class NormalizationContext:
    cx: tuple[float, float]
    cy: tuple[float, float]
    font: tuple[float, float]
    angle_divisor: float = ANGLE_DIVISOR

    @classmethod
    def from_regions(cls, regions: Iterable[TextRegion]) -> "NormalizationContext":
        regions = list(regions)
        if not regions:
            raise ValueError("normalization needs at least one region")
        xs = [r.center[0] for r in regions]
        ys = [r.center[1] for r in regions]
        fs = [font_area(r) for r in regions]
        return cls((min(xs), max(xs)), (min(ys), max(ys)), (min(fs), max(fs)))

    @classmethod
    def from_sheet(cls, sheet: MapSheet) -> "NormalizationContext":
        return cls.from_regions(sheet.regions)


def minmax_norm(x: float, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    if hi <= lo:
        return 0.0
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def scalar_features(region: TextRegion, ctx: NormalizationContext) -> np.ndarray:
    return np.array([
        minmax_norm(region.center[0], ctx.cx),
        minmax_norm(region.center[1], ctx.cy),
        region.angle / ctx.angle_divisor,
        minmax_norm(font_area(region), ctx.font),
        float(region.caps),
    ])


def build_feature_vector(region: TextRegion, ctx: NormalizationContext, table: EmbeddingTable) -> np.ndarray:
    return np.concatenate([embed_word(table, region.text), scalar_features(region, ctx)])


def sheet_features(sheet: MapSheet, table: EmbeddingTable) -> np.ndarray:
    """Feature matrix for every region of ``sheet``, rows in region order."""
    if not sheet.regions:
        return np.zeros((0, table.dim + N_SCALAR))
    ctx = NormalizationContext.from_sheet(sheet)
    return np.stack([build_feature_vector(r, ctx, table) for r in sheet.regions])
