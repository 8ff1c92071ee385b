import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mentalstate.dataio import Recording, RecordingMeta  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_recording(n_channels=2, n_samples=100, session_id="S01-R01", fs=128.0, seed=0,
                   annotations=()):
    data = np.random.default_rng(seed).standard_normal((n_channels, n_samples))
    meta = RecordingMeta("S01", session_id, fs, [f"C{i}" for i in range(n_channels)],
                         list(annotations))
    return Recording(meta, data.astype(np.float32))


# ---------------------------------------------------------------- acceptance summary

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    entry["details"].extend(str(v) for k, v in item.user_properties if k == "measured")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        c = _criteria[number]
        detail = "; ".join(dict.fromkeys(c["details"]))
        line = f"{'PASS' if c['ok'] else 'FAIL'} criterion {number}: {c['title']}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
