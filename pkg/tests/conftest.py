import hashlib
import re
import time

import pytest

from tokentts.config import TrainConfig, get_preset
from tokentts.dsp import build_synthetic_dataset
from tokentts.train import train_stage

TINY_STEPS = dict(steps=3, eval_every=1000, log_every=1, checkpoint_every=2, disc_start=1)


def _run(root, stages, **overrides):
    root.mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.jsonl"
    build_synthetic_dataset(get_preset("toy").synth, 0).save(manifest)
    results, timings, digests = {}, {}, {}
    for stage in stages:
        start = time.perf_counter()
        results[stage] = train_stage(TrainConfig(stage, str(manifest), run_dir=str(root), **overrides))
        timings[stage] = time.perf_counter() - start
        # file digests of every finished stage, taken after each stage completes
        digests[stage] = {s: hashlib.sha256(results[s].checkpoint.read_bytes()).hexdigest() for s in results}
    return {"root": root, "manifest": manifest, "results": results, "timings": timings, "digests": digests}


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """All three stages for a handful of steps: enough for plumbing tests."""
    return _run(tmp_path_factory.mktemp("tiny"), ("fine", "coarse", "lm"), **TINY_STEPS)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """The full toy-preset run used by the end-to-end acceptance criteria."""
    return _run(tmp_path_factory.mktemp("toy"), ("fine", "coarse", "lm"))


def pytest_collection_modifyitems(items):
    for item in items:
        if "toy_run" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)


_CRITERION = re.compile(r"test_criterion_(\d+)([a-z]?)_")


def pytest_terminal_summary(terminalreporter):
    outcomes = {}
    for status in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", "call") != "call" and status == "passed":
                continue
            m = _CRITERION.search(rep.nodeid)
            if not m:
                continue
            key = (int(m.group(1)), m.group(2))
            ok = status == "passed"
            name = rep.nodeid.split("::")[-1]
            prev = outcomes.get(key)
            outcomes[key] = (prev[0] and ok if prev else ok, prev[1] if prev else name)
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for (n, sub), (ok, name) in sorted(outcomes.items()):
        terminalreporter.write_line(f"criterion {n}{sub}: {'PASS' if ok else 'FAIL'} ({name})")
