import json
import time
from collections import OrderedDict
from pathlib import Path

import numpy as np
import pytest

from nmtkit.hparams import HParams

CRITERIA = OrderedDict([
    (1, "gradient integrity"),
    (2, "decoder causality"),
    (3, "padding invariance"),
    (4, "beam search oracle"),
    (5, "inference defaults"),
    (6, "checkpoint averaging"),
    (7, "end-to-end regression"),
    (8, "determinism"),
    (9, "complexity bench"),
    (10, "subword round trip and BLEU"),
])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion this test covers")
    config.addinivalue_line("markers", "slow: multi-minute end-to-end training")
    config._criteria = {n: [] for n in CRITERIA}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        item.config._criteria[marker.args[0]].append((item.name, rep.passed, rep.duration))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_criteria", {})
    if not any(results.values()):
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        runs = results.get(n, [])
        if not runs:
            terminalreporter.write_line(f"criterion {n:2d} {title}: NOT RUN")
            continue
        ok = all(passed for _, passed, _ in runs)
        secs = sum(d for _, _, d in runs)
        terminalreporter.write_line(
            f"criterion {n:2d} {title}: {'PASS' if ok else 'FAIL'} ({len(runs)} checks, {secs:.1f}s)")


def tiny_hparams(**kw) -> HParams:
    """The small model used for gradient and property checks."""
    base = dict(set_name="test_tiny", num_layers=2, d_model=8, num_heads=2, d_ff=16, max_length=32)
    base.update(kw)
    return HParams(**base)


def small_data_hparams(**kw) -> HParams:
    base = dict(set_name="test_small", num_layers=1, d_model=16, num_heads=2, d_ff=32,
                batch_size=64, num_train_examples=60, num_dev_examples=12, max_seq_len=5,
                lexicon_size=6, warmup_steps=10, max_length=32)
    base.update(kw)
    return HParams(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def regression_runs(tmp_path_factory):
    """Both pinned regression runs, trained once per session."""
    from nmtkit.training import PINNED_SPECS, regression_suite

    work = tmp_path_factory.mktemp("regression")
    t0 = time.perf_counter()
    report = regression_suite(PINNED_SPECS, work, work / "report.json")
    return {"work": work, "report": report, "seconds": time.perf_counter() - t0,
            "saved": json.loads((work / "report.json").read_text())}


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]
