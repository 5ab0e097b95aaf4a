import hashlib
import sys
import time
from pathlib import Path

import pytest

from regforge.cli import main

C6_TRAIN_N, C6_TEST_N = 64, 16
C6_TRAIN_COHORT_SEED, C6_TEST_COHORT_SEED, C6_RUN_SEED = 1, 2, 0

# one "criterion N: PASS|FAIL - details" line per acceptance test, printed after the run
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


def tree_hash(root, exclude=("run_manifest.json",)) -> str:
    """Hash of every file's relative path and bytes (the wall-clock manifest excluded)."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in exclude:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class OpenRecorder:
    """Records every path opened in this process while active (via an audit hook)."""

    _installed = False
    _active = None

    def __init__(self):
        self.paths: list[str] = []
        if not OpenRecorder._installed:
            sys.addaudithook(OpenRecorder._hook)
            OpenRecorder._installed = True

    @staticmethod
    def _hook(event, args):
        rec = OpenRecorder._active
        if rec is not None and event == "open" and args and isinstance(args[0], (str, bytes, Path)):
            rec.paths.append(str(args[0]))

    def __enter__(self):
        OpenRecorder._active = self
        return self

    def __exit__(self, *exc):
        OpenRecorder._active = None
        return False


@pytest.fixture
def open_recorder():
    return OpenRecorder()


@pytest.fixture(scope="session")
def c6_cohorts(tmp_path_factory):
    root = tmp_path_factory.mktemp("c6_data")
    assert run_cli("gen-phantoms", "--n", C6_TRAIN_N, "--seed", C6_TRAIN_COHORT_SEED, "--out", root / "train") == 0
    assert run_cli("gen-phantoms", "--n", C6_TEST_N, "--seed", C6_TEST_COHORT_SEED, "--out", root / "test") == 0
    return root / "train", root / "test"


def train_and_evaluate(cohorts, out):
    train_dir, test_dir = cohorts
    t0 = time.time()
    # no schedule flags: the defaults are lr 0.001, decay 0.9, batch 1, 50 epochs at 64x64
    assert run_cli("train", "--data", train_dir, "--out", out / "model", "--seed", C6_RUN_SEED) == 0
    assert run_cli("evaluate", "--data", test_dir, "--out", out / "eval", "--model", out / "model" / "model.rgfn") == 0
    return {"model": out / "model", "eval": out / "eval", "seconds": time.time() - t0}


@pytest.fixture(scope="session")
def c6_run(c6_cohorts, tmp_path_factory):
    return train_and_evaluate(c6_cohorts, tmp_path_factory.mktemp("c6_run"))


@pytest.fixture(scope="session")
def quick_model(tmp_path_factory):
    root = tmp_path_factory.mktemp("quick")
    assert run_cli("gen-phantoms", "--n", 4, "--seed", 3, "--out", root / "data") == 0
    assert run_cli("train", "--data", root / "data", "--out", root / "model", "--epochs", 1, "--seed", 0) == 0
    return root
