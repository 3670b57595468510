import csv

import numpy as np
import pytest

from difgate.simulation import GENERATORS, SimulationConfig


def write_dataset(path, data):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", *data.item_names])
        for g, row in zip(data.group, data.responses):
            w.writerow([g, *("" if np.isnan(v) else int(v) for v in row)])
    return path


def make_fixture(path, study="washout", p=0.0, n=500, m=16, seed=0):
    """Write a simulated wide CSV and return its path with the generating truth."""
    cfg = SimulationConfig(study=study, n_per_group=n, m=m)
    data, truth = GENERATORS[study](cfg, p, np.random.default_rng(seed))
    return write_dataset(path, data), truth


@pytest.fixture
def fixture_csv(tmp_path):
    def build(name="data.csv", **kwargs):
        return make_fixture(tmp_path / name, **kwargs)

    return build


VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the acceptance summary, then assert it."""

    def record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        request.config.stash.setdefault(VERDICTS, []).append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
