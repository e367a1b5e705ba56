import dataclasses

import numpy as np
import pytest

from phenoflow.ehr_ingest import EventSeries, ValueSeries
from phenoflow.synth import SynthConfig, generate_cohort, make_phenotypes

ACCEPTANCE_LINES = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cohort():
    cfg = dataclasses.replace(SynthConfig(), n_patients=60, seed=7)
    return generate_cohort(make_phenotypes(cfg), cfg)


def events(rid, vid, times):
    return EventSeries(rid, vid, np.asarray(times, dtype=float))


def values(rid, vid, times, vals):
    return ValueSeries(rid, vid, np.asarray(times, dtype=float), np.asarray(vals, dtype=float))
