"""Importance maps, masked probabilistic cell sampling and the running description embedding.

Cells are addressed as ``(i, j)`` = (row, column) on a ``G x G`` grid laid over
the 512x512 thumbnail.  Flattened orderings are always row-major.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import slide_io
from .errors import DataError, ProtocolError

GRID_SIDE = 16
HEATMAP_SIZE = slide_io.THUMBNAIL_SIZE


class SamplerKind(str, Enum):
    TEXT_CONDITIONED = "text_conditioned"
    VISION_ONLY = "vision_only"
    IMITATED = "imitated"
    EXHAUSTIVE = "exhaustive"


@dataclass(eq=False)
class ImportanceMap:
    scores: np.ndarray
    masked: Optional[np.ndarray] = None

    def __post_init__(self):
        self.scores = np.array(self.scores, dtype=np.float64)
        g = self.scores.shape[0]
        if self.scores.shape != (g, g) or g < 1:
            raise ValueError(f"scores must be a square grid, got shape {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ValueError("scores must be finite and non-negative")
        if self.masked is None:
            self.masked = np.zeros((g, g), dtype=bool)
        else:
            self.masked = np.array(self.masked, dtype=bool)
            if self.masked.shape != (g, g):
                raise ValueError("mask shape must match scores")

    @property
    def grid_side(self) -> int:
        return self.scores.shape[0]

    def unmasked_count(self) -> int:
        return int((~self.masked).sum())


@dataclass(eq=False)
class ProbabilityGrid:
    probs: np.ndarray

    @property
    def grid_side(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True, eq=False)
class EmbeddingState:
    mean: np.ndarray
    count: int = 0

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def conditioned(self) -> bool:
        return self.count > 0

    def conditioning(self) -> Optional[np.ndarray]:
        """The vector to send to the navigator, or None before any description exists."""
        return self.mean.copy() if self.count > 0 else None


@dataclass(frozen=True)
class ViewportRecord:
    case_id: str
    x: float
    y: float
    width: float
    height: float
    zoom: float
    t_start: float
    t_end: float

    def __post_init__(self):
        if self.t_end < self.t_start:
            raise ValueError(f"viewport record ends before it starts: {self}")
        if self.width < 0 or self.height < 0:
            raise ValueError(f"negative viewport size: {self}")

    @property
    def dwell(self) -> float:
        return self.t_end - self.t_start

    @classmethod
    def from_dict(cls, d: dict) -> "ViewportRecord":
        return cls(str(d["case_id"]), *(float(d[k]) for k in
                                         ("x", "y", "width", "height", "zoom", "t_start", "t_end")))


def read_viewport_log(path) -> list:
    records = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(ViewportRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{n}: bad viewport record ({exc})") from None
    return records


# ---------------------------------------------------------------------------
# Maps and sampling


def normalize_map(imap: ImportanceMap) -> ProbabilityGrid:
    free = ~imap.masked
    if not free.any():
        raise ValueError("every cell is masked")
    scores = np.where(free, imap.scores, 0.0)
    total = scores.sum()
    if total > 0:
        probs = scores / total
    else:
        # Blank navigator output: fall back to uniform over what is left.
        probs = free / free.sum()
    probs[imap.masked] = 0.0
    return ProbabilityGrid(probs)


def _inverse_cdf(flat_probs: np.ndarray, u) -> np.ndarray:
    cdf = np.cumsum(flat_probs)
    idx = np.searchsorted(cdf, u, side="right")
    # u can land above a cdf total of 1 - eps; give those draws to the last live cell.
    last = np.flatnonzero(flat_probs > 0)[-1]
    return np.minimum(idx, last)


def sample_cell(probs: ProbabilityGrid, rng) -> tuple:
    """Draw one cell by inverse CDF over row-major order (one uniform variate per draw)."""
    g = probs.grid_side
    k = int(_inverse_cdf(probs.probs.ravel(), rng.random()))
    return divmod(k, g)


def sample_cells(probs: ProbabilityGrid, rng, size: int) -> np.ndarray:
    """Vectorised ``sample_cell`` with replacement; returns flat row-major indices."""
    return _inverse_cdf(probs.probs.ravel(), rng.random(size))


def mask_cell(imap: ImportanceMap, cell) -> ImportanceMap:
    i, j = cell
    g = imap.grid_side
    if not (0 <= i < g and 0 <= j < g):
        raise IndexError(f"cell {cell} outside {g}x{g} grid")
    masked = imap.masked.copy()
    masked[i, j] = True
    return ImportanceMap(imap.scores, masked)


def draw_without_replacement(imap: ImportanceMap, k: int, rng) -> list:
    """k draws, masking and renormalising after each one."""
    if k > imap.unmasked_count():
        raise ValueError(f"cannot draw {k} cells, only {imap.unmasked_count()} available")
    cells = []
    for _ in range(k):
        cell = sample_cell(normalize_map(imap), rng)
        imap = mask_cell(imap, cell)
        cells.append(cell)
    return cells


def init_embedding(dim: int) -> EmbeddingState:
    if dim < 1:
        raise ValueError("embedding dimension must be at least 1")
    return EmbeddingState(np.zeros(dim), 0)


def update_embedding(state: EmbeddingState, new_vec) -> EmbeddingState:
    v = np.asarray(new_vec, dtype=np.float64)
    if v.shape != state.mean.shape:
        raise ValueError(f"embedding of shape {v.shape} does not match state dimension {state.dim}")
    n = state.count
    return EmbeddingState((state.mean * n + v) / (n + 1), n + 1)


def scores_from_heatmap(heatmap, grid_side=GRID_SIDE) -> ImportanceMap:
    h = np.asarray(heatmap, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] % grid_side or h.shape[1] % grid_side:
        raise ValueError(f"heatmap of shape {h.shape} does not divide into a {grid_side}x{grid_side} grid")
    by, bx = h.shape[0] // grid_side, h.shape[1] // grid_side
    return ImportanceMap(h.reshape(grid_side, by, grid_side, bx).mean(axis=(1, 3)))


def imitated_weights(records, slide, grid_side=GRID_SIDE) -> ImportanceMap:
    """Accumulate viewport dwell time on the grid, split by overlap area.

    Records are in base-level pixels; parts outside the slide are clipped.
    Records belonging to other cases are ignored.
    """
    records = [r for r in records if r.case_id == slide.slide_id]
    if not records:
        raise ValueError(f"no viewport records for case {slide.slide_id!r}")
    w, h = slide.levels[0].width, slide.levels[0].height
    xe = np.arange(grid_side + 1) * (w / grid_side)
    ye = np.arange(grid_side + 1) * (h / grid_side)
    scores = np.zeros((grid_side, grid_side))
    for r in records:
        x0, x1 = max(r.x, 0.0), min(r.x + r.width, w)
        y0, y1 = max(r.y, 0.0), min(r.y + r.height, h)
        if x1 <= x0 or y1 <= y0:
            continue
        ox = np.clip(np.minimum(x1, xe[1:]) - np.maximum(x0, xe[:-1]), 0, None)
        oy = np.clip(np.minimum(y1, ye[1:]) - np.maximum(y0, ye[:-1]), 0, None)
        scores += r.dwell * np.outer(oy, ox) / ((x1 - x0) * (y1 - y0))
    return ImportanceMap(scores)


# ---------------------------------------------------------------------------
# Navigator requests


def masked_thumbnail(thumbnail: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Copy of the thumbnail with the masked cells blacked out."""
    g = mask.shape[0]
    h, w = thumbnail.shape[:2]
    if h % g or w % g:
        raise ValueError(f"thumbnail {w}x{h} does not divide into a {g}x{g} grid")
    out = np.array(thumbnail, copy=True)
    rows, cols = np.nonzero(mask)
    if rows.size:
        # View as (g, cell_h, g, cell_w, channels) and zero whole cells at once.
        cells = out.reshape(g, h // g, g, w // g, -1)
        cells[rows, :, cols] = 0
    return out


def check_heatmap(heatmap, shape=(HEATMAP_SIZE, HEATMAP_SIZE)) -> np.ndarray:
    h = np.asarray(heatmap)
    if h.shape != tuple(shape):
        raise ProtocolError(f"heatmap has shape {h.shape}, expected {tuple(shape)}")
    if not np.issubdtype(h.dtype, np.floating) and not np.issubdtype(h.dtype, np.integer):
        raise ProtocolError(f"heatmap has non-numeric dtype {h.dtype}")
    # min/max propagate NaN, so two reductions cover every check.
    lo, hi = h.min(), h.max()
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ProtocolError("heatmap contains NaN or infinite values")
    if lo < 0:
        raise ProtocolError("heatmap contains negative values")
    return h


def request_map(navigator, slide, imap_mask, state: EmbeddingState, grid_side=GRID_SIDE) -> ImportanceMap:
    """One navigator call on the masked thumbnail, returned as a masked importance map."""
    thumb = masked_thumbnail(slide.thumbnail.pixels, imap_mask)
    heat = check_heatmap(navigator.navigate(thumb, imap_mask.copy(), state.conditioning()))
    imap = scores_from_heatmap(heat, grid_side)
    imap.masked = np.array(imap_mask, dtype=bool)
    return imap


def run_sampler(kind, slide, state, backends, k, rng, *, grid_side=GRID_SIDE, records=None) -> list:
    """Pick cells with one of the four strategies.

    ``text_conditioned`` runs the full describe-and-condition loop (one
    navigator call per pick); ``vision_only`` calls the navigator once and
    draws ``k`` cells from that fixed map; ``imitated`` draws from viewport
    dwell time; ``exhaustive`` ignores ``k`` and returns every foreground cell.
    """
    kind = SamplerKind(kind)
    if kind is SamplerKind.TEXT_CONDITIONED:
        from .trajectory import generate_trajectory

        traj = generate_trajectory(slide, backends, length=k, rng=rng, grid_side=grid_side,
                                   state=state, rephrase=False)
        return [s.cell for s in traj.steps]
    if kind is SamplerKind.VISION_ONLY:
        mask = np.zeros((grid_side, grid_side), dtype=bool)
        imap = request_map(backends.navigator, slide, mask, init_embedding(state.dim), grid_side)
        return draw_without_replacement(imap, k, rng)
    if kind is SamplerKind.IMITATED:
        if records is None:
            raise ValueError("the imitated sampler needs viewport records")
        return draw_without_replacement(imitated_weights(records, slide, grid_side), k, rng)

    from .trajectory import cell_to_patch

    cells = [(i, j) for i in range(grid_side) for j in range(grid_side)]
    coords = [cell_to_patch(c, slide, grid_side) for c in cells]
    keep = set(slide_io.filter_background(slide, coords))
    return [c for c, coord in zip(cells, coords) if coord in keep]


def heatmap_to_pgm_values(imap: ImportanceMap) -> np.ndarray:
    """Scores scaled so the maximum maps to 255 (all-zero maps stay zero)."""
    top = imap.scores.max()
    if top <= 0:
        return np.zeros(imap.scores.shape, dtype=np.uint8)
    return np.floor(imap.scores / top * 255.0 + 0.5).astype(np.uint8)

