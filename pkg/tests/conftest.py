import os
from pathlib import Path

import pytest

ACCEPTANCE_LINES = []
RESULTS_FILE = Path(__file__).resolve().parent.parent / "acceptance_results.txt"


def pytest_addoption(parser):
    parser.addoption("--rerun-acceptance", action="store_true",
                     help="retrain acceptance runs instead of reusing cached ones")
    parser.addoption("--skip-acceptance", action="store_true",
                     help="skip the long-running acceptance criteria")


def pytest_collection_modifyitems(config, items):
    if not config.getoption("--skip-acceptance"):
        return
    skip = pytest.mark.skip(reason="--skip-acceptance given")
    for item in items:
        if "acceptance" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
    RESULTS_FILE.write_text("\n".join(ACCEPTANCE_LINES) + "\n")


@pytest.fixture(scope="session")
def acceptance_root():
    root = os.environ.get("SAFEMR_ACCEPTANCE_ROOT")
    path = Path(root) if root else Path(__file__).resolve().parent.parent / "acceptance_runs"
    path.mkdir(parents=True, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def rerun(request):
    return request.config.getoption("--rerun-acceptance")


def report(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


TINY_INI = """
[preset]
name = desk-pillars-0.15-goal

[env]
horizon = 50

[agent]
hidden = 8, 8
multiplier_hidden = 8
batch_size = 16

[run]
total_env_steps = 300
warmup_steps = 100
eval_interval = 50
eval_episodes = 2
checkpoint_interval = 100
"""


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path
