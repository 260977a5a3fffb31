"""Triage input assembly (patch features on a square grid) and the benign/risky gate."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import slide_io
from .errors import ProtocolError

DECISION_THRESHOLD = 0.5
TRIAGE_MAGNIFICATION = 10.0


@dataclass(frozen=True)
class GridDims:
    H: int
    M: int


@dataclass(eq=False)
class FeatureMatrix:
    rows: np.ndarray
    coords: list

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise ValueError("feature matrix needs at least one row of features")
        if len(self.coords) != self.rows.shape[0]:
            raise ValueError("coords must align with rows")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass(eq=False)
class PaddedGrid:
    side: int
    rows: np.ndarray
    pad_count: int

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] != self.side * self.side:
            raise ValueError(f"grid of side {self.side} needs {self.side ** 2} rows")
        if not 0 <= self.pad_count < self.rows.shape[0] + 1:
            raise ValueError("invalid pad count")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def unpadded(self) -> np.ndarray:
        return self.rows[: self.rows.shape[0] - self.pad_count]


@dataclass(frozen=True)
class TriageVerdict:
    risky: bool
    score: float


def grid_dims(n: int) -> GridDims:
    """Smallest square side H with H*H >= n, and the pad count H*H - n."""
    if n < 1:
        raise ValueError("N must be at least 1")
    h = math.isqrt(n - 1) + 1
    return GridDims(h, h * h - n)


def pad_features(features: FeatureMatrix) -> PaddedGrid:
    # Pad by repeating the first M rows in order.
    dims = grid_dims(features.n)
    rows = features.rows
    if dims.M:
        reps = -(-dims.M // features.n)
        rows = np.concatenate([rows, np.tile(rows, (reps, 1))[: dims.M]])
    return PaddedGrid(dims.H, np.array(rows, copy=True), dims.M)


def prepare_triage_input(slide, embedder, rng=None, *, patch_size=slide_io.PATCH_SIZE,
                         threshold=slide_io.SATURATION_THRESHOLD, minimum=slide_io.MIN_PATCHES,
                         magnification=TRIAGE_MAGNIFICATION, workers=1) -> PaddedGrid:
    """Tile, filter, top up, sort and embed the slide's patches, then pad to a square grid."""
    level = slide.level_at(magnification)
    coords = slide_io.tile_slide(slide, level, patch_size)
    kept = slide_io.filter_background(slide, coords, threshold)
    kept = slide_io.ensure_min_patches(slide, kept, minimum, rng, level_index=level,
                                       patch_size=patch_size, threshold=threshold)
    kept = slide_io.sort_spatial(kept)

    def embed(coord):
        return np.asarray(embedder.embed_patch(slide_io.extract_patch(slide, coord)), dtype=np.float64)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            vectors = list(pool.map(embed, kept))
    else:
        vectors = [embed(c) for c in kept]
    dims = {v.shape for v in vectors}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ProtocolError(f"embedder returned inconsistent vector shapes {sorted(dims)}")
    return pad_features(FeatureMatrix(np.stack(vectors), kept))


def run_triage(grid: PaddedGrid, backend, threshold=DECISION_THRESHOLD) -> TriageVerdict:
    score = float(backend.score(grid))
    if not (0.0 <= score <= 1.0):
        raise ProtocolError(f"triage score {score!r} is outside [0, 1]")
    return TriageVerdict(score >= threshold, score)
