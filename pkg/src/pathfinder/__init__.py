"""Triage-gated, text-conditioned navigation of whole-slide images with majority-vote diagnosis.

Model inference sits behind pluggable backends (:mod:`pathfinder.backends`):
deterministic in-process mocks for desk-scale runs, or HTTP clients for real
model servers.
"""

from .diagnosis import (
    DiagnosisClass,
    EvalReport,
    PipelineConfig,
    Prediction,
    VoteResult,
    assemble_prompt,
    diagnose_trajectory,
    evaluate,
    majority_vote,
    run_pipeline,
)
from .navigator import (
    EmbeddingState,
    ImportanceMap,
    ProbabilityGrid,
    SamplerKind,
    ViewportRecord,
    imitated_weights,
    init_embedding,
    mask_cell,
    normalize_map,
    run_sampler,
    sample_cell,
    scores_from_heatmap,
    update_embedding,
)
from .slide_io import (
    LesionRect,
    LevelRaster,
    PatchCoord,
    PatchPixels,
    SlideRaster,
    ensure_min_patches,
    extract_patch,
    filter_background,
    load_slide,
    saturation,
    sort_spatial,
    synth_case,
    synth_slide,
    tile_slide,
    write_slide,
)
from .trajectory import (
    Trajectory,
    TrajectorySet,
    TrajectoryStep,
    cell_to_patch,
    generate_set,
    generate_trajectory,
    read_trajectories,
    write_trajectories,
)
from .triage import FeatureMatrix, GridDims, PaddedGrid, TriageVerdict, grid_dims, pad_features, \
    prepare_triage_input, run_triage

__version__ = "0.1.0"
