
import numpy as np
import pytest
from hypothesis import settings

from ablate_eval.phantom import PhantomConfig, make_case
from ablate_eval.volume import GridMeta, Mask, Volume

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

SMALL = dict(dims=(48, 48, 48), spacing=(2.5, 2.5, 2.5))


@pytest.fixture(scope="session")
def small_case():
    """Coarse phantom pair with a small rigid offset and a 6 mm field."""
    return make_case(PhantomConfig(seed=3, tumor_radius_mm=8.0, **SMALL), peak_mm=6.0,
                     rigid_pose=(0.0, 0.0, np.deg2rad(2.0), 2.5, -2.5, 0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_volume(rng, shape=(8, 8, 8), spacing=(1.0, 1.0, 1.0)):
    return Volume(rng.normal(size=shape) * 100.0, GridMeta(shape[::-1], spacing))


def random_mask(rng, shape=(8, 8, 8), p=0.4, spacing=(1.0, 1.0, 1.0)):
    return Mask(rng.random(shape) < p, GridMeta(shape[::-1], spacing))


# acceptance results, printed once at the end of the run
CRITERIA = {}


@pytest.fixture
def criterion():
    def record(number, ok, detail=""):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        CRITERIA[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
