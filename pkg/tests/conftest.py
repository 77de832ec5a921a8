import numpy as np
import pytest

from motion_mdn.data import SynthConfig, compute_stats, standardize, synthesize_corpus


def small_synth(**kw):
    base = dict(n_subjects=3, trials_per_subject=2, n_channels=3, sample_rate_hz=4.0,
                segment_length_range=(12, 20), segments_per_trial=4, seed=0)
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture
def tiny_corpus():
    raw = synthesize_corpus(small_synth())
    stats = compute_stats(raw)
    return [standardize(t, stats) for t in raw]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """``record(n, ok, detail)`` stores one acceptance line and returns ``ok``."""
    def record(n, ok, detail):
        _CRITERIA[n] = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
