import numpy as np
import pytest
from hypothesis import settings

from bevdistill.featprov import ProceduralFeatureProvider
from bevdistill.scene import generate_scene

settings.register_profile("repo", max_examples=40, deadline=None)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def scene():
    return generate_scene(0, n_frames=3, n_objects=3, n_cameras=6)


@pytest.fixture(scope="session")
def provider():
    return ProceduralFeatureProvider(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        ok, detail = RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} - {detail}")
