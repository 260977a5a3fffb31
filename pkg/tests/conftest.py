import numpy as np
import pytest

from pathfinder import slide_io
from pathfinder.backends import mock_backends
from pathfinder.backends.server import running_server

ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record_criterion():
    def record(number, ok, detail=""):
        ACCEPTANCE_RESULTS[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")

    return record


def solid_slide(color, width=64, height=64, slide_id="solid"):
    px = np.empty((height, width, 3), dtype=np.uint8)
    px[...] = color
    return slide_io.SlideRaster(slide_id, [slide_io.LevelRaster(px)], [10.0])


@pytest.fixture
def white_slide():
    return solid_slide((255, 255, 255), 1024, 1024, "white")


@pytest.fixture(scope="session")
def lesion_slide():
    """1024x1024 slide with one class-IV focus; returns (slide, rects)."""
    rects = [slide_io.LesionRect(400, 300, 192, 160, "IV")]
    return slide_io.synth_slide(1024, 1024, rects, seed=11, slide_id="lesion"), rects


@pytest.fixture(scope="session")
def class_slides():
    return {label: slide_io.synth_case(label, 100 + k, slide_id=f"case-{label}")
            for k, label in enumerate(("I", "II", "III", "IV"))}


@pytest.fixture
def mocks():
    return mock_backends(embedding_dim=16)


@pytest.fixture(scope="session")
def stub_server():
    with running_server(mock_backends(embedding_dim=16)) as server:
        yield server
