"""
How much does the navigator matter?
===================================

Compare the stain-density navigator against uniform cell choice on a small
balanced synthetic set, and look at where each sampler spends its steps.
"""

import numpy as np

from pathfinder import diagnosis, navigator, slide_io, trajectory
from pathfinder.backends import mock_backends

dataset = [(slide_io.synth_case(label, 500 + k, slide_id=f"cmp-{label}-{k}")[0], label)
           for k in range(3) for label in ("I", "II", "III", "IV")]

cfg = diagnosis.PipelineConfig(n=5, length=10)
for nav_kind in ("stain_density", "uniform"):
    rep = diagnosis.evaluate(dataset, mock_backends(16, navigator=nav_kind), runs=5, subset=5,
                             pool=10, seed=1, config=cfg)
    print(f"{nav_kind:14s} accuracy {rep.mean_accuracy:.3f} +/- {rep.std_accuracy:.3f}")

# First-iteration heatmap of a class III slide, reduced to the 16x16 grid.
slide, lesions = slide_io.synth_case("III", seed=42)
b = mock_backends(16)
imap = navigator.request_map(b.navigator, slide, np.zeros((16, 16), bool), navigator.init_embedding(16))
print(np.round(imap.scores / imap.scores.max(), 1))

# Cells picked by each sampler for the same slide and seed.
for kind in ("text_conditioned", "vision_only", "exhaustive"):
    tset = trajectory.generate_set(slide, 1, 8, b, base_seed=0, sampler=kind)
    print(kind, [s.cell for s in tset.trajectories[0].steps][:8])
