"""Raster frames and probability maps for the consensus step.

A frame is the tight box around a query and its textual candidates, padded
to a centred square of side ``L = max(P, Q)`` and scaled onto an ``N x N``
grid. The probability map on that grid comes from an external segmenter
(loaded from PGM or a text matrix) or from :func:`surrogate_probability_map`,
a fixed geometric stand-in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import font_area
from .geometry import points_in_polygon, polygon_distance
from .ingest import TextRegion

DEFAULT_SIZE = 256
DEFAULT_PAD = (128.0, 128.0, 128.0)


class FrameError(ValueError):
    pass


class ProbabilityMapError(ValueError):
    pass


@dataclass(frozen=True)
class RasterFrame:
    x0: float
    y0: float
    P: float
    Q: float
    size: int = DEFAULT_SIZE
    pad_color: tuple[float, float, float] = DEFAULT_PAD

    def __post_init__(self) -> None:
        if not (self.P > 0 and self.Q > 0):
            raise FrameError("frame extent must be positive")
        if self.size < 1:
            raise FrameError("grid size must be >= 1")

    @property
    def L(self) -> float:
        return max(self.P, self.Q)

    @property
    def scale(self) -> float:
        return self.size / self.L

    @property
    def pad_x(self) -> float:
        return (self.L - self.P) / 2.0

    @property
    def pad_y(self) -> float:
        return (self.L - self.Q) / 2.0

    def to_grid(self, x, y):
        s = self.scale
        return (np.asarray(x) - self.x0 + self.pad_x) * s, (np.asarray(y) - self.y0 + self.pad_y) * s

    def to_sheet(self, gx, gy):
        s = self.scale
        return np.asarray(gx) / s + self.x0 - self.pad_x, np.asarray(gy) / s + self.y0 - self.pad_y

    def overlaps(self, region: TextRegion) -> bool:
        bx0, by0, bx1, by1 = region.bbox
        return bx1 >= self.x0 and by1 >= self.y0 and bx0 <= self.x0 + self.P and by0 <= self.y0 + self.Q

    def footprint(self, region: TextRegion) -> np.ndarray:
        """Cells whose centre lies inside the region polygon.

        A region too thin to contain any cell centre keeps the single cell
        under its own centre, so the mask is never empty.
        """
        n = self.size
        mask = np.zeros((n, n), dtype=bool)
        gx, gy = self.to_grid([p[0] for p in region.polygon], [p[1] for p in region.polygon])
        c0 = max(0, int(math.floor(gx.min() - 0.5)))
        c1 = min(n - 1, int(math.ceil(gx.max() - 0.5)))
        r0 = max(0, int(math.floor(gy.min() - 0.5)))
        r1 = min(n - 1, int(math.ceil(gy.max() - 0.5)))
        if c0 <= c1 and r0 <= r1:
            cols = np.arange(c0, c1 + 1) + 0.5
            rows = np.arange(r0, r1 + 1) + 0.5
            CX, CY = np.meshgrid(cols, rows)
            sx, sy = self.to_sheet(CX, CY)
            mask[r0:r1 + 1, c0:c1 + 1] = points_in_polygon(sx, sy, region.polygon)
        if not mask.any():
            cx, cy = self.to_grid(*region.center)
            mask[min(n - 1, max(0, int(cy))), min(n - 1, max(0, int(cx)))] = True
        return mask

    def render(self, image: np.ndarray) -> np.ndarray:
        """Crop ``image`` to the frame, pad with ``pad_color`` and resize to N x N."""
        img = _as_hwc(image)
        side = max(1, int(math.ceil(self.L)))
        canvas = np.empty((side, side, img.shape[2]))
        canvas[:] = np.asarray(self.pad_color[: img.shape[2]], dtype=float)
        ys0, xs0 = int(math.floor(self.y0)), int(math.floor(self.x0))
        crop = img[max(0, ys0):max(0, int(math.ceil(self.y0 + self.Q))),
                   max(0, xs0):max(0, int(math.ceil(self.x0 + self.P)))]
        oy = int(round(self.pad_y + max(0, ys0) - self.y0))
        ox = int(round(self.pad_x + max(0, xs0) - self.x0))
        h = min(crop.shape[0], side - max(oy, 0))
        w = min(crop.shape[1], side - max(ox, 0))
        if h > 0 and w > 0:
            canvas[max(oy, 0):max(oy, 0) + h, max(ox, 0):max(ox, 0) + w] = crop[:h, :w]
        return resize_area(canvas, self.size, self.size)


def _as_hwc(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError("image must be H x W or H x W x C")
    return img


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix spreading ``n_in`` unit cells over ``n_out`` cells."""
    edges_out = np.linspace(0.0, n_in, n_out + 1)
    W = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges_out[i], edges_out[i + 1]
        j0, j1 = int(math.floor(lo)), min(n_in, int(math.ceil(hi)))
        for j in range(j0, j1):
            W[i, j] = max(0.0, min(hi, j + 1) - max(lo, j))
        W[i] /= W[i].sum()
    return W


def resize_area(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-weighted resize of a 2-D or H x W x C array.

    Output values are clipped to the input's range, which keeps constant maps
    exactly constant through any chain of resizes.
    """
    a = np.asarray(arr, dtype=float)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    Wy = _area_weights(a.shape[0], out_h)
    Wx = _area_weights(a.shape[1], out_w)
    out = np.einsum("ij,jkc,lk->ilc", Wy, a, Wx)
    out = np.clip(out, a.min(), a.max())
    return out[:, :, 0] if squeeze else out


def candidate_frame(
    query: TextRegion,
    candidates: Sequence[TextRegion],
    image: np.ndarray | None = None,
    size: int = DEFAULT_SIZE,
) -> RasterFrame:
    if not candidates:
        raise FrameError("cannot frame an empty candidate set")
    boxes = [query.bbox] + [c.bbox for c in candidates]
    x0 = min(b[0] for b in boxes)
    y0 = min(b[1] for b in boxes)
    x1 = max(b[2] for b in boxes)
    y1 = max(b[3] for b in boxes)
    pad = DEFAULT_PAD
    if image is not None:
        img = _as_hwc(image)
        crop = img[max(0, int(math.floor(y0))):max(0, int(math.ceil(y1))),
                   max(0, int(math.floor(x0))):max(0, int(math.ceil(x1)))]
        if crop.size:
            means = crop.reshape(-1, crop.shape[2]).mean(axis=0)
            if means.size == 1:
                means = np.repeat(means, 3)
            pad = tuple(float(v) for v in means[:3])
    return RasterFrame(x0, y0, x1 - x0, y1 - y0, size, pad)


@dataclass(frozen=True)
class ProbabilityMap:
    grid: np.ndarray
    frame: RasterFrame

    def __post_init__(self) -> None:
        g = np.array(self.grid, dtype=float)
        n = self.frame.size
        if g.shape != (n, n):
            raise ProbabilityMapError(f"probability map is {g.shape}, frame expects {(n, n)}")
        if not np.all(np.isfinite(g)) or g.min() < 0.0 or g.max() > 1.0:
            raise ProbabilityMapError("probability values must lie in [0, 1]")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)


def compatibility(query: TextRegion, cand: TextRegion) -> float:
    """``exp(-gap / mean_height) * cos^2(delta_angle) * font_ratio``, in [0, 1]."""
    gap = polygon_distance(query.polygon, cand.polygon)
    mean_h = 0.5 * (query.height + cand.height)
    d_angle = math.radians(query.angle - cand.angle)
    fq, fc = font_area(query), font_area(cand)
    ratio = min(fq, fc) / max(fq, fc)
    return math.exp(-gap / mean_h) * math.cos(d_angle) ** 2 * ratio


def surrogate_probability_map(
    query: TextRegion,
    candidates: Sequence[TextRegion],
    frame: RasterFrame,
) -> ProbabilityMap:
    """Fill each candidate's footprint with its compatibility to the query.

    Overlapping footprints keep the larger score, which makes the map
    independent of candidate order. Everything else is 0.
    """
    grid = np.zeros((frame.size, frame.size))
    for cand in candidates:
        score = compatibility(query, cand)
        np.maximum(grid, np.where(frame.footprint(cand), score, 0.0), out=grid)
    return ProbabilityMap(grid, frame)


def binarize(pmap: ProbabilityMap, p: float = 0.5) -> ProbabilityMap:
    if not 0.0 < p < 1.0:
        raise ValueError(f"binarization threshold must be in (0, 1), got {p}")
    return ProbabilityMap((pmap.grid > p).astype(float), pmap.frame)


# -- file formats ----------------------------------------------------------

def _netpbm_header(data: bytes) -> tuple[bytes, int, int, int, int]:
    """Parse ``magic w h maxval``; return them and the offset of the raster."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ProbabilityMapError("truncated netpbm header")
        tokens.append(data[start:pos])
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise ProbabilityMapError("non-numeric netpbm header") from None
    # exactly one whitespace byte separates the header from a binary raster
    return tokens[0], w, h, maxval, pos + 1


def _read_pgm(data: bytes) -> np.ndarray:
    magic, w, h, maxval, pos = _netpbm_header(data)
    if maxval < 1 or maxval > 255:
        raise ProbabilityMapError(f"unsupported PGM maxval {maxval}")
    if magic == b"P5":
        body = data[pos:pos + w * h]
        if len(body) != w * h:
            raise ProbabilityMapError("truncated PGM raster")
        vals = np.frombuffer(body, dtype=np.uint8).astype(float)
    elif magic == b"P2":
        vals = np.array([float(t) for t in data[pos - 1:].split()])
        if vals.size != w * h:
            raise ProbabilityMapError("PGM raster size mismatch")
    else:
        raise ProbabilityMapError(f"not a graymap: {magic!r}")
    if vals.max(initial=0) > maxval:
        raise ProbabilityMapError("PGM value above maxval")
    return vals.reshape(h, w) / maxval


def load_probability_map(path: str | Path, frame: RasterFrame) -> ProbabilityMap:
    """Read a PGM (P5/P2) or whitespace text matrix into a map on ``frame``."""
    data = Path(path).read_bytes()
    if data[:2] in (b"P5", b"P2"):
        grid = _read_pgm(data)
    else:
        try:
            rows = [[float(v) for v in line.split()] for line in data.decode("utf-8").splitlines() if line.strip()]
        except ValueError:
            raise ProbabilityMapError(f"{path}: non-numeric matrix entry") from None
        if not rows or len({len(r) for r in rows}) != 1:
            raise ProbabilityMapError(f"{path}: ragged or empty matrix")
        grid = np.array(rows)
    n = frame.size
    if grid.shape != (n, n):
        raise ProbabilityMapError(f"{path}: map is {grid.shape[0]}x{grid.shape[1]}, expected {n}x{n}")
    if grid.min() < 0.0 or grid.max() > 1.0:
        raise ProbabilityMapError(f"{path}: values outside [0, 1]")
    return ProbabilityMap(grid, frame)


def save_pgm(grid: np.ndarray, path: str | Path) -> None:
    g = np.asarray(grid, dtype=float)
    h, w = g.shape
    raw = np.round(np.clip(g, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raw.tobytes())


def load_image(path: str | Path) -> np.ndarray:
    """Read a PPM/PGM (binary) or, with Pillow installed, any raster Pillow reads."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P6", b"P5"):
        channels = 3 if data[:2] == b"P6" else 1
        _, w, h, maxval, pos = _netpbm_header(data)
        if not 1 <= maxval <= 255:
            raise ValueError(f"{path}: only 8-bit netpbm supported")
        body = data[pos:pos + w * h * channels]
        if len(body) != w * h * channels:
            raise ValueError(f"{path}: truncated raster")
        img = np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)
        return img.astype(float) * (255.0 / maxval)
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover - depends on environment
        raise ValueError(f"{path}: only PPM/PGM supported without Pillow") from None
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float)
