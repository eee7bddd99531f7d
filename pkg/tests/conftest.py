import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")

DATA = Path(__file__).parent / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fixture_small():
    """3 objects, 4 views: quick end-to-end checks."""
    from splatembed.synthetic import generate_fixture

    return generate_fixture(objects=3, gaussians_per_object=60, views=4, resolution=64, seed=3, dim=64)


@pytest.fixture(scope="session")
def fixture_reference():
    from splatembed.synthetic import generate_fixture

    return generate_fixture()


@pytest.fixture(scope="session")
def reference_dir(tmp_path_factory, fixture_reference):
    out = tmp_path_factory.mktemp("reference")
    fixture_reference.write(out)
    return out


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
