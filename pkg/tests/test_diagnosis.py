import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import precision_recall_fscore_support

from pathfinder import diagnosis as dx
from pathfinder.backends import mock_backends
from pathfinder.backends.mock import Recorder
from pathfinder.diagnosis import DiagnosisClass as C
from pathfinder.diagnosis import PipelineConfig, Prediction
from pathfinder.errors import UnmappableResponseError
from pathfinder.trajectory import Trajectory, TrajectoryStep
from pathfinder.slide_io import PatchCoord


class Constant:
    def __init__(self, label):
        self.text = label.option_text

    def diagnose(self, prompt):
        return self.text


class Reply:
    def __init__(self, text):
        self.text = text

    def diagnose(self, prompt):
        return self.text


class FixedScore:
    def __init__(self, score):
        self.value = score

    def score(self, grid):
        return self.value


def traj(*texts, seed=0):
    steps = [TrajectoryStep(k + 1, (0, k), PatchCoord(0, 0, 0, 1), t) for k, t in enumerate(texts)]
    return Trajectory("s", seed, steps)


def recorded(b):
    return b.replace(**{k: Recorder(getattr(b, k)) for k in ("navigator", "describer", "diagnoser")})


# --- prompt ----------------------------------------------------------------

EXPECTED_PROMPT = (
    "Answer the following question related to skin cancer. Only use one of the four options given at the end.\n"
    "The image descriptions below are extracted from different patches from the same whole slide image (WSI), "
    "please tell me which class the image belongs to:\n"
    "- epidermis unremarkable\n"
    "The options are:\n"
    '"diagnosis: (I) mildly dysplastic nevi, moderately dysplastic nevi"\n'
    '"diagnosis: (II) melanoma in situ and severely dysplastic nevi"\n'
    '"diagnosis: (III) invasive melanoma stage pT1a"\n'
    '"diagnosis: (IV) advanced invasive melanoma stage ≥ pT1b"\n'
    "Only output the complete text of the option you choose. Don't add any more words."
)


def test_prompt_template_exact():
    prompt = dx.assemble_prompt(["epidermis unremarkable"])
    assert prompt == EXPECTED_PROMPT
    assert prompt.count("epidermis unremarkable") == 1


def test_prompt_keeps_duplicates_and_is_stable():
    p = dx.assemble_prompt(["a b", "a b"])
    assert p.count("- a b\n") == 2
    assert p == dx.assemble_prompt(["a b", "a b"])
    assert dx.descriptions_from_prompt(p) == ["a b", "a b"]


def test_prompt_empty():
    with pytest.raises(ValueError):
        dx.assemble_prompt([])


# --- per-trajectory diagnosis -----------------------------------------------

def test_keyword_mock_invasive():
    pred = dx.diagnose_trajectory(traj("nests", "invasive melanoma cells", seed=4), mock_backends(8).diagnoser)
    assert pred == Prediction(4, C.III)


@pytest.mark.parametrize("texts,label", [
    (("advanced invasive melanoma",), C.IV),
    (("bland nevus", "benign-appearing nevus"), C.II),
    (("melanoma in situ",), C.II),
])
def test_keyword_mock_priority(texts, label):
    assert dx.diagnose_trajectory(traj(*texts), mock_backends(8).diagnoser).label == label


def test_backend_option_text_maps():
    assert dx.diagnose_trajectory(traj("x"), Constant(C.II)).label == C.II
    assert dx.parse_option(f'  "{C.III.option_text}"\n') == C.III


@pytest.mark.parametrize("reply", ["unsure", C.I.option_text, "", "diagnosis: (V) something"])
def test_unmappable(reply):
    with pytest.raises(UnmappableResponseError):
        dx.diagnose_trajectory(traj("x"), Reply(reply))


def test_diagnosis_class_parse():
    assert C.parse("iv") is C.IV and C.parse(C.II) is C.II
    with pytest.raises(ValueError):
        C.parse("V")


# --- voting ----------------------------------------------------------------

def test_vote_strict_majority():
    v = dx.majority_vote([Prediction(k, c) for k, c in enumerate([C.II, C.II, C.III, C.IV, C.II])])
    assert v.label == C.II and v.tally == {C.II: 3, C.III: 1, C.IV: 1} and not v.tie_broken


def test_vote_tie_goes_severe():
    v = dx.majority_vote([Prediction(0, C.II), Prediction(1, C.III)])
    assert v.label == C.III and v.tie_broken


def test_vote_empty():
    with pytest.raises(ValueError):
        dx.majority_vote([])


def test_vote_exhaustive_length_five():
    for combo in itertools.product((C.II, C.III, C.IV), repeat=5):
        v = dx.majority_vote([Prediction(k, c) for k, c in enumerate(combo)])
        counts = Counter(combo)
        top = max(counts.values())
        tied = sorted(c for c, n in counts.items() if n == top)
        assert v.label == tied[-1]
        assert v.tie_broken == (len(tied) > 1)
        assert sum(v.tally.values()) == 5


@given(st.lists(st.sampled_from([C.II, C.III, C.IV]), min_size=1, max_size=12), st.randoms())
def test_vote_permutation_invariant(labels, rnd):
    a = dx.majority_vote(labels)
    shuffled = list(labels)
    rnd.shuffle(shuffled)
    b = dx.majority_vote(shuffled)
    assert (a.label, a.tally, a.tie_broken) == (b.label, b.tally, b.tie_broken)


# --- pipeline --------------------------------------------------------------

def test_benign_slide_stops_at_triage(lesion_slide):
    slide, _ = lesion_slide
    b = recorded(mock_backends(8).replace(triage=FixedScore(0.1)))
    label, prov = dx.run_pipeline(slide, b, PipelineConfig(n=3))
    assert label == C.I and prov.triage.score == 0.1 and prov.trajectories is None
    assert b.navigator.calls == [] and b.describer.calls == [] and b.diagnoser.calls == []


def test_constant_diagnoser_tally(lesion_slide):
    slide, _ = lesion_slide
    b = mock_backends(8).replace(triage=FixedScore(0.9), diagnoser=Constant(C.III))
    label, prov = dx.run_pipeline(slide, b, PipelineConfig(n=4, length=3))
    assert label == C.III and prov.vote.tally == {C.III: 4}
    assert len(prov.trajectories.trajectories) == 4
    assert prov.to_dict()["vote"] == {"label": "III", "tally": {"III": 4}, "tie_broken": False}


def test_planted_lesions_end_to_end(class_slides):
    b = mock_backends(16)
    for label, (slide, _) in class_slides.items():
        got, _ = dx.run_pipeline(slide, b, PipelineConfig(n=5, length=10, seed=3))
        assert got == C.parse(label)


# --- evaluation ------------------------------------------------------------

@pytest.fixture(scope="module")
def small_dataset(class_slides):
    return [(slide, label) for label, (slide, _) in class_slides.items()]


def test_evaluate_perfect(small_dataset):
    rep = dx.evaluate(small_dataset, mock_backends(16), runs=3, subset=3, pool=5, seed=1,
                      config=PipelineConfig(length=10))
    assert rep.mean_accuracy == 1.0 and rep.std_accuracy == 0.0
    assert rep.run_accuracies == [1.0] * 3
    assert rep.triage_negative == 1
    assert np.trace(rep.confusion) == 12


def test_evaluate_subset_equals_pool(small_dataset):
    b = mock_backends(16, navigator="uniform")
    rep = dx.evaluate(small_dataset, b, runs=4, subset=3, pool=3, seed=2, config=PipelineConfig(length=4))
    assert len(set(rep.run_accuracies)) == 1 and rep.std_accuracy == 0.0


def test_evaluate_micro_metrics_match_sklearn(small_dataset):
    b = mock_backends(16, navigator="uniform")
    rep = dx.evaluate(small_dataset, b, runs=6, subset=3, pool=6, seed=5, config=PipelineConfig(length=3))
    y_true, y_pred = [], []
    for t, row in enumerate(rep.confusion):
        for p, count in enumerate(row):
            y_true += [t] * count
            y_pred += [p] * count
    p, r, f, _ = precision_recall_fscore_support(y_true, y_pred, average="micro")
    assert rep.micro_precision == pytest.approx(p, abs=1e-12)
    assert rep.micro_recall == pytest.approx(r, abs=1e-12)
    assert rep.micro_f1 == pytest.approx(f, abs=1e-12)
    assert rep.mean_accuracy == pytest.approx(np.mean(rep.run_accuracies), abs=1e-12)
    assert rep.micro_f1 == rep.micro_precision == rep.micro_recall == rep.mean_accuracy


def test_evaluate_reproducible(small_dataset):
    b = mock_backends(16, navigator="uniform")
    kw = dict(runs=3, subset=2, pool=4, seed=8, config=PipelineConfig(length=3))
    assert dx.evaluate(small_dataset, b, **kw) == dx.evaluate(small_dataset, b, workers=3, **kw)


def test_evaluate_rejects_small_pool(small_dataset):
    with pytest.raises(ValueError):
        dx.evaluate(small_dataset, mock_backends(16), subset=5, pool=4)


def test_slide_seed_independent_per_index():
    seeds = {dx.slide_seed(7, i) for i in range(100)}
    assert len(seeds) == 100 and dx.slide_seed(7, 0) == 7
