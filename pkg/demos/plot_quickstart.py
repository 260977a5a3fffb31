"""
Diagnosing a synthetic slide with the mock agents
=================================================

Build a slide with one planted lesion, run triage, then walk a few
trajectories and let the diagnoser vote.
"""

import numpy as np

from pathfinder import diagnosis, slide_io, trajectory
from pathfinder.backends import mock_backends

# A class IV case: synth_case plants lesions whose stain matches the label.
slide, lesions = slide_io.synth_case("IV", seed=7, slide_id="demo-iv")
print(slide.slide_id, [lvl.pixels.shape for lvl in slide.levels])
print("planted:", lesions)

backends = mock_backends(embedding_dim=16)

# Triage first; a benign verdict ends the pipeline at class I.
verdict = diagnosis.run_triage_stage(slide, backends, diagnosis.PipelineConfig())
print("triage score %.3f risky=%s" % (verdict.score, verdict.risky))

# One trajectory: each step shows the navigator where we have already been.
traj = trajectory.generate_trajectory(slide, backends, length=6, seed=3)
for step in traj.steps:
    print(step.iteration, step.cell, step.description)

# The full pipeline: 5 trajectories, one prediction each, majority vote.
label, prov = diagnosis.run_pipeline(slide, backends, diagnosis.PipelineConfig(n=5, length=10))
print("label:", label.name, "tally:", {k.name: v for k, v in prov.vote.tally.items()})

cells = np.array([s.cell for t in prov.trajectories.trajectories for s in t.steps])
print("visited cells per row:", np.bincount(cells[:, 0], minlength=16))
