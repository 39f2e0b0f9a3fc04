from __future__ import annotations

import pytest

from helpers import FIXTURE_CONFIG
from hierfig.cli import main


def run_fixture_pipeline(work_dir) -> int:
    return main(["all", "-c", str(FIXTURE_CONFIG), "--work-dir", str(work_dir)])


@pytest.fixture(scope="session")
def fixture_runs(tmp_path_factory):
    """Two independent full mock-mode runs over the bundled fixture set."""
    dirs = []
    for i in range(2):
        d = tmp_path_factory.mktemp(f"fixture_run{i}")
        assert run_fixture_pipeline(d) == 0
        dirs.append(d)
    return dirs


@pytest.fixture(scope="session")
def fixture_run(fixture_runs):
    return fixture_runs[0]
