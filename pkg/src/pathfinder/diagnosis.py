"""Diagnosis prompt, per-trajectory predictions, majority voting, the full pipeline and evaluation."""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Optional

import numpy as np

from . import navigator as nav
from . import slide_io, trajectory, triage
from .errors import UnmappableResponseError

log = logging.getLogger(__name__)

_U64 = (1 << 64) - 1


class DiagnosisClass(IntEnum):
    """Diagnostic classes ordered by severity."""

    I = 1  # noqa: E741
    II = 2
    III = 3
    IV = 4

    @property
    def display(self) -> str:
        return _DISPLAY[self]

    @property
    def option_text(self) -> str:
        return f"diagnosis: ({self.name}) {self.display}"

    @classmethod
    def parse(cls, name) -> "DiagnosisClass":
        if isinstance(name, cls):
            return name
        try:
            return cls[str(name).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown diagnosis class {name!r}") from None


_DISPLAY = {
    DiagnosisClass.I: "mildly dysplastic nevi, moderately dysplastic nevi",
    DiagnosisClass.II: "melanoma in situ and severely dysplastic nevi",
    DiagnosisClass.III: "invasive melanoma stage pT1a",
    DiagnosisClass.IV: "advanced invasive melanoma stage ≥ pT1b",
}

POST_TRIAGE_CLASSES = (DiagnosisClass.II, DiagnosisClass.III, DiagnosisClass.IV)

PROMPT_HEAD = (
    "Answer the following question related to skin cancer. "
    "Only use one of the four options given at the end.\n"
    "The image descriptions below are extracted from different patches from the same "
    "whole slide image (WSI), please tell me which class the image belongs to:\n"
)
PROMPT_OPTIONS = "The options are:\n" + "".join(f'"{c.option_text}"\n' for c in DiagnosisClass)
PROMPT_TAIL = "Only output the complete text of the option you choose. Don't add any more words."


def assemble_prompt(descriptions) -> str:
    descriptions = list(descriptions)
    if not descriptions:
        raise ValueError("the prompt needs at least one description")
    body = "".join(f"- {d}\n" for d in descriptions)
    return PROMPT_HEAD + body + PROMPT_OPTIONS + PROMPT_TAIL


def descriptions_from_prompt(prompt: str) -> list:
    """Inverse of :func:`assemble_prompt` for the description lines."""
    start = prompt.find(PROMPT_HEAD)
    end = prompt.rfind(PROMPT_OPTIONS)
    if start < 0 or end < 0:
        return [prompt]
    body = prompt[start + len(PROMPT_HEAD):end]
    return [line[2:] if line.startswith("- ") else line for line in body.splitlines()]


def parse_option(text, allowed=POST_TRIAGE_CLASSES) -> DiagnosisClass:
    cleaned = str(text).strip().strip('"').strip()
    for cls in allowed:
        if cleaned == cls.option_text:
            return cls
    raise UnmappableResponseError(f"diagnoser response {str(text)[:80]!r} is not one of the options")


@dataclass(frozen=True)
class Prediction:
    trajectory_seed: int
    label: DiagnosisClass


@dataclass
class VoteResult:
    label: DiagnosisClass
    tally: dict
    tie_broken: bool

    def to_dict(self) -> dict:
        return {
            "label": self.label.name,
            "tally": {c.name: n for c, n in sorted(self.tally.items())},
            "tie_broken": self.tie_broken,
        }


def diagnose_trajectory(traj, backend) -> Prediction:
    prompt = assemble_prompt(traj.descriptions)
    return Prediction(traj.seed, parse_option(backend.diagnose(prompt)))


def majority_vote(preds) -> VoteResult:
    """Most frequent label; ties go to the most severe of the tied classes."""
    labels = [p.label if isinstance(p, Prediction) else DiagnosisClass(p) for p in preds]
    if not labels:
        raise ValueError("cannot vote on an empty prediction list")
    tally = Counter(labels)
    top = max(tally.values())
    winners = [c for c, n in tally.items() if n == top]
    return VoteResult(max(winners), dict(tally), len(winners) > 1)


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class PipelineConfig:
    n: int = 5
    length: int = trajectory.DEFAULT_LENGTH
    seed: int = 0
    threshold: float = triage.DECISION_THRESHOLD
    grid_side: int = nav.GRID_SIDE
    sampler: str = nav.SamplerKind.TEXT_CONDITIONED.value
    patch_size: int = slide_io.PATCH_SIZE
    min_patches: int = slide_io.MIN_PATCHES
    saturation_threshold: float = slide_io.SATURATION_THRESHOLD
    rephrase: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Provenance:
    slide_id: str
    triage: triage.TriageVerdict
    trajectories: Optional[trajectory.TrajectorySet] = None
    predictions: list = field(default_factory=list)
    vote: Optional[VoteResult] = None

    def to_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "triage": {"risky": self.triage.risky, "score": self.triage.score},
            "predictions": [{"trajectory_seed": p.trajectory_seed, "label": p.label.name}
                            for p in self.predictions],
            "vote": self.vote.to_dict() if self.vote else None,
        }


def triage_rng(seed):
    return np.random.default_rng([int(seed) & _U64, 1])


def run_triage_stage(slide, backends, config: PipelineConfig) -> triage.TriageVerdict:
    grid = triage.prepare_triage_input(
        slide, backends.embedder, triage_rng(config.seed), patch_size=config.patch_size,
        threshold=config.saturation_threshold, minimum=config.min_patches,
    )
    return triage.run_triage(grid, backends.triage, config.threshold)


def run_pipeline(slide, backends, config: Optional[PipelineConfig] = None, *, records=None):
    """Triage-gated diagnosis of one slide; returns ``(label, provenance)``.

    Benign slides stop at triage with class I and no further backend calls.
    """
    config = config or PipelineConfig()
    verdict = run_triage_stage(slide, backends, config)
    prov = Provenance(slide.slide_id, verdict)
    if not verdict.risky:
        return DiagnosisClass.I, prov
    prov.trajectories = trajectory.generate_set(
        slide, config.n, config.length, backends, config.seed, sampler=config.sampler,
        records=records, grid_side=config.grid_side, rephrase=config.rephrase,
    )
    prov.predictions = [diagnose_trajectory(t, backends.diagnoser) for t in prov.trajectories.trajectories]
    prov.vote = majority_vote(prov.predictions)
    return prov.vote.label, prov


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalReport:
    run_accuracies: list
    mean_accuracy: float
    std_accuracy: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    confusion: list
    n_slides: int
    runs: int
    subset: int
    pool: int
    triage_negative: int
    note: str = ("triage-negative slides are counted as class I predictions; "
                 "micro metrics pool every run's predictions")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def slide_seed(seed, index) -> int:
    """Per-slide seed: independent of worker scheduling and of the other slides."""
    return (int(seed) ^ (int(index) << 32)) & _U64


def _slide_pool(index, slide, backends, config: PipelineConfig, pool, records):
    if isinstance(slide, (str, Path)):
        slide = slide_io.load_slide(slide)
    cfg = PipelineConfig(**{**config.to_dict(), "seed": slide_seed(config.seed, index), "n": pool})
    label, prov = run_pipeline(slide, backends, cfg, records=records)
    for lvl in slide.levels:
        lvl.drop_cache()
    if not prov.triage.risky:
        return None
    return [p.label for p in prov.predictions]


def evaluate(dataset, backends, runs=10, subset=5, pool=20, seed=0, *,
             config: Optional[PipelineConfig] = None, workers=1, records=None) -> EvalReport:
    """Repeated random-subset majority-vote evaluation.

    ``dataset`` is a list of ``(slide, true_label)`` where ``slide`` is a
    :class:`SlideRaster` or a slide directory.  Each slide gets a pool of
    ``pool`` trajectory predictions once; each of the ``runs`` runs then votes
    over ``subset`` of them drawn without replacement.
    """
    if subset < 1 or pool < subset:
        raise ValueError(f"need 1 <= subset <= pool, got subset={subset}, pool={pool}")
    if runs < 1:
        raise ValueError("runs must be at least 1")
    config = config or PipelineConfig()
    config = PipelineConfig(**{**config.to_dict(), "seed": seed})
    truths = [DiagnosisClass.parse(label) for _, label in dataset]

    def job(i):
        return _slide_pool(i, dataset[i][0], backends, config, pool, records)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            pools = list(ex.map(job, range(len(dataset))))
    else:
        pools = [job(i) for i in range(len(dataset))]

    rng = np.random.default_rng([int(seed) & _U64, 2])
    confusion = np.zeros((4, 4), dtype=np.int64)
    run_correct = []
    for _ in range(runs):
        correct = 0
        for truth, preds in zip(truths, pools):
            if preds is None:
                label = DiagnosisClass.I
            else:
                picks = rng.choice(pool, size=subset, replace=False)
                label = majority_vote([preds[k] for k in picks]).label
            confusion[truth - 1, label - 1] += 1
            correct += int(label == truth)
        run_correct.append(correct)

    n = len(dataset)
    total = n * runs
    hits = int(np.trace(confusion))
    run_acc = [c / n for c in run_correct] if n else [0.0] * runs
    # Single-label micro averaging: every miss is one FP and one FN, so all
    # three metrics reduce to hits / total.  Computed from counts to stay exact.
    tp, fp, fn = hits, total - hits, total - hits
    precision = tp / (tp + fp) if total else 0.0
    recall = tp / (tp + fn) if total else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if total else 0.0
    return EvalReport(
        run_accuracies=run_acc,
        mean_accuracy=hits / total if total else 0.0,
        std_accuracy=float(np.std(run_acc)) if n else 0.0,
        micro_precision=precision,
        micro_recall=recall,
        micro_f1=f1,
        confusion=confusion.tolist(),
        n_slides=n,
        runs=runs,
        subset=subset,
        pool=pool,
        triage_negative=sum(p is None for p in pools),
    )
