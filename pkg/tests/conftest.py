import numpy as np
import pytest

from timbre_retrieval.datasetgen import all_distributions
from timbre_retrieval.synthbank import Envelope, Filter, InstrumentPatch, Oscillator, generate_bank

FAMS = ("percussion", "bass", "synth_lead")


@pytest.fixture(scope="session")
def small_bank():
    return generate_bank(6, FAMS, seed=3)


@pytest.fixture(scope="session")
def dists():
    return all_distributions(FAMS)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine_patch(pid=0, attack=0.01, release=0.1, **kw):
    return InstrumentPatch(pid, "synth_lead", (Oscillator("sine", 1.0),),
                           Envelope(attack, 0.05, 0.8, release), Filter("none"), (), 0.8, seed=7, **kw)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion; the lines are echoed in the terminal summary."""
    lines = request.config._acceptance_lines

    def record(name, ok, detail):
        line = f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
