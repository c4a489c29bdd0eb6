import os
import time

import pytest

from mtmc3d import pipeline, synth
from mtmc3d.config import PipelineConfig

_REPORT = []


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def report():
    """Record one pass/fail line; the lines are echoed at the end of the run."""

    def add(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _REPORT.append(line)
        return ok

    return add


def _scene(tmp_path_factory, name, **overrides):
    cfg = synth.preset(name)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    out = tmp_path_factory.mktemp(name)
    synth.generate(cfg, out)
    return out


@pytest.fixture(scope="session")
def clean_scene(tmp_path_factory):
    return _scene(tmp_path_factory, "clean")


@pytest.fixture(scope="session")
def clean_run(clean_scene, tmp_path_factory):
    """Default pipeline over the 300-frame clean scene; returns (out_dir, seconds)."""
    out = tmp_path_factory.mktemp("clean_out")
    cfg = PipelineConfig(workers=min(4, os.cpu_count() or 1))
    t0 = time.perf_counter()
    pipeline.run(clean_scene, cfg, out)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def noisy_scene(tmp_path_factory):
    return _scene(tmp_path_factory, "noisy")


@pytest.fixture(scope="session")
def fleet_scene(tmp_path_factory):
    return _scene(tmp_path_factory, "fleet")


@pytest.fixture(scope="session")
def small_scene(tmp_path_factory):
    """Short clean scene for the quicker pipeline tests."""
    return _scene(tmp_path_factory, "clean", frames=40)
