import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from depthbench.synthetic import make_eval_fixture


@pytest.fixture(scope="session")
def fixture_paths(tmp_path_factory):
    """Deterministic 8-image evaluation fixture: GT + two prediction dirs."""
    root = tmp_path_factory.mktemp("evalfix")
    return make_eval_fixture(root, n=8, seed=7)
