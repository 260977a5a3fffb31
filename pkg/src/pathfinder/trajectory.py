"""Trajectory generation: navigate, crop, describe, mask, aggregate; plus JSONL persistence."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import navigator as nav
from .errors import BackendError, ProtocolError, TrajectoryAborted, TrajectoryFormatError
from .slide_io import PatchCoord, extract_patch

log = logging.getLogger(__name__)

DEFAULT_LENGTH = 10
DETAIL_MAGNIFICATION = 10.0
_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class TrajectoryStep:
    iteration: int
    cell: tuple
    patch: PatchCoord
    description: str
    rephrased: Optional[str] = None


@dataclass
class Trajectory:
    slide_id: str
    seed: int
    steps: list = field(default_factory=list)

    @property
    def cells(self) -> list:
        return [s.cell for s in self.steps]

    @property
    def descriptions(self) -> list:
        return [s.description for s in self.steps]


@dataclass
class TrajectorySet:
    slide_id: str
    trajectories: list = field(default_factory=list)


def trajectory_seed(base_seed: int, k: int) -> int:
    """Seed of the k-th trajectory in a set: ``base_seed XOR k`` as an unsigned 64-bit value."""
    return (int(base_seed) ^ int(k)) & _U64


def cell_to_patch(cell, slide, grid_side=nav.GRID_SIDE, magnification=DETAIL_MAGNIFICATION) -> PatchCoord:
    """Map a thumbnail grid cell onto a square patch of the 10x level.

    The top-left corner scales proportionally; the side is the smaller level
    dimension divided by the grid side, so non-square slides get square
    patches that start at the cell's corner and are clamped into bounds.
    """
    i, j = cell
    if not (0 <= i < grid_side and 0 <= j < grid_side):
        raise IndexError(f"cell {cell} outside {grid_side}x{grid_side} grid")
    level = slide.level_at(magnification)
    lvl = slide.levels[level]
    w, h = lvl.width, lvl.height
    size = min(w, h) // grid_side
    if size < 1:
        raise ValueError(f"{w}x{h} level is too small for a {grid_side}x{grid_side} grid")
    x = min(math.floor(j * w / grid_side + 0.5), w - size)
    y = min(math.floor(i * h / grid_side + 0.5), h - size)
    return PatchCoord(level, x, y, size)


def _describe(backends, slide, cell, grid_side, rephrase):
    coord = cell_to_patch(cell, slide, grid_side)
    text = backends.describer.describe(extract_patch(slide, coord))
    if not isinstance(text, str) or not text.strip():
        raise ProtocolError("describer returned an empty description")
    rephrased = None
    if rephrase and backends.rephraser is not None:
        rephrased = backends.rephraser.rephrase(text)
        if not isinstance(rephrased, str) or not rephrased.strip():
            raise ProtocolError("rephraser returned empty text")
    return coord, text, rephrased


def generate_trajectory(slide, backends, length=DEFAULT_LENGTH, seed=0, *, rng=None,
                        grid_side=nav.GRID_SIDE, state=None, rephrase=True) -> Trajectory:
    """Run the text-conditioned navigation loop for ``length`` iterations.

    Iteration t sends the thumbnail with the t-1 earlier picks blacked out and,
    from t=2 on, the running mean of the earlier description embeddings.  The
    original (not rephrased) description is what gets embedded.
    """
    if not 1 <= length <= grid_side * grid_side:
        raise ValueError(f"trajectory length must be in 1..{grid_side * grid_side}")
    if rng is None:
        rng = np.random.default_rng(seed)
    if state is None:
        state = nav.init_embedding(backends.embedding_dim)
    mask = np.zeros((grid_side, grid_side), dtype=bool)
    traj = Trajectory(slide.slide_id, int(seed))

    for t in range(1, length + 1):
        try:
            imap = nav.request_map(backends.navigator, slide, mask, state, grid_side)
            cell = nav.sample_cell(nav.normalize_map(imap), rng)
            coord, text, rephrased = _describe(backends, slide, cell, grid_side, rephrase)
            mask[cell] = True
            state = nav.update_embedding(state, backends.embedder.embed_text(text))
        except BackendError as exc:
            raise TrajectoryAborted(
                f"trajectory {seed} on {slide.slide_id!r} aborted at iteration {t}: {exc}", traj
            ) from exc
        traj.steps.append(TrajectoryStep(t, (int(cell[0]), int(cell[1])), coord, text, rephrased))
    return traj


def trajectory_from_cells(slide, cells, backends, seed=0, *, grid_side=nav.GRID_SIDE,
                          rephrase=True) -> Trajectory:
    """Describe a pre-selected sequence of cells (used by the non-iterative samplers)."""
    traj = Trajectory(slide.slide_id, int(seed))
    for t, cell in enumerate(cells, 1):
        try:
            coord, text, rephrased = _describe(backends, slide, cell, grid_side, rephrase)
        except BackendError as exc:
            raise TrajectoryAborted(
                f"trajectory {seed} on {slide.slide_id!r} aborted at iteration {t}: {exc}", traj
            ) from exc
        traj.steps.append(TrajectoryStep(t, (int(cell[0]), int(cell[1])), coord, text, rephrased))
    return traj


def generate_set(slide, n, length, backends, base_seed=0, *,
                 sampler=nav.SamplerKind.TEXT_CONDITIONED, records=None,
                 grid_side=nav.GRID_SIDE, rephrase=True, workers=1) -> TrajectorySet:
    if n < 1:
        raise ValueError("a trajectory set needs n >= 1")
    sampler = nav.SamplerKind(sampler)

    def one(k):
        seed = trajectory_seed(base_seed, k)
        if sampler is nav.SamplerKind.TEXT_CONDITIONED:
            return generate_trajectory(slide, backends, length, seed, grid_side=grid_side,
                                       rephrase=rephrase)
        rng = np.random.default_rng(seed)
        cells = nav.run_sampler(sampler, slide, nav.init_embedding(backends.embedding_dim),
                                backends, length, rng, grid_side=grid_side, records=records)
        if not cells:
            raise ValueError(f"{sampler.value} sampler found no cells on {slide.slide_id!r}")
        return trajectory_from_cells(slide, cells, backends, seed, grid_side=grid_side,
                                     rephrase=rephrase)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trajectories = list(pool.map(one, range(n)))
    else:
        trajectories = [one(k) for k in range(n)]
    return TrajectorySet(slide.slide_id, trajectories)


# ---------------------------------------------------------------------------
# JSONL persistence: one step per line.

_FIELDS = ("slide_id", "traj_seed", "iteration", "cell", "patch", "description", "rephrased")


def step_record(slide_id, seed, step: TrajectoryStep) -> dict:
    return {
        "slide_id": slide_id,
        "traj_seed": seed,
        "iteration": step.iteration,
        "cell": [step.cell[0], step.cell[1]],
        "patch": step.patch.to_dict(),
        "description": step.description,
        "rephrased": step.rephrased,
    }


def dumps_trajectories(tset: TrajectorySet) -> str:
    lines = [
        json.dumps(step_record(tset.slide_id, traj.seed, step))
        for traj in tset.trajectories
        for step in traj.steps
    ]
    return "".join(line + "\n" for line in lines)


def write_trajectories(tset: TrajectorySet, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_trajectories(tset))


def _parse_step(line, n):
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TrajectoryFormatError(f"malformed JSON ({exc.msg})", n) from None
    if not isinstance(rec, dict):
        raise TrajectoryFormatError("expected a JSON object", n)
    missing = [f for f in _FIELDS if f not in rec]
    if missing:
        raise TrajectoryFormatError(f"missing fields {missing}", n)
    try:
        cell = tuple(int(v) for v in rec["cell"])
        if len(cell) != 2:
            raise ValueError("cell needs two indices")
        step = TrajectoryStep(int(rec["iteration"]), cell, PatchCoord.from_dict(rec["patch"]),
                              str(rec["description"]),
                              None if rec["rephrased"] is None else str(rec["rephrased"]))
        return str(rec["slide_id"]), int(rec["traj_seed"]), step
    except (ValueError, KeyError, TypeError) as exc:
        raise TrajectoryFormatError(f"bad field value ({exc})", n) from None


def read_trajectories(path) -> TrajectorySet:
    slide_id = None
    trajectories = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            sid, seed, step = _parse_step(line, n)
            if slide_id is None:
                slide_id = sid
            elif sid != slide_id:
                raise TrajectoryFormatError(f"slide_id {sid!r} differs from {slide_id!r}", n)
            if not trajectories or trajectories[-1].seed != seed:
                if any(t.seed == seed for t in trajectories):
                    raise TrajectoryFormatError(f"steps of trajectory {seed} are not contiguous", n)
                trajectories.append(Trajectory(sid, seed))
            traj = trajectories[-1]
            if traj.steps and step.iteration <= traj.steps[-1].iteration:
                raise TrajectoryFormatError("iterations must increase within a trajectory", n)
            if step.cell in traj.cells:
                raise TrajectoryFormatError(f"cell {step.cell} repeats within trajectory {seed}", n)
            traj.steps.append(step)
    return TrajectorySet(slide_id or "", trajectories)
