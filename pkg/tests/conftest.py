import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pointsynth.networks import NetConfig  # noqa: E402
from pointsynth.phantom import make_phantom_set  # noqa: E402
from pointsynth.synthesis import SynthItem  # noqa: E402


def tiny_net(**kw) -> NetConfig:
    base = dict(base_width=4, depth=2, noise_channels=4, crop=32, res_blocks=1, spade_hidden=8, disc_width=4,
                disc_layers=2)
    base.update(kw)
    return NetConfig(**base)


@pytest.fixture(scope="session")
def phantoms():
    return make_phantom_set(3, 48, seed=5, count_range=(4, 6), min_spacing=12)


@pytest.fixture
def synth_items(phantoms):
    return [SynthItem(img, pts, f"p{i}") for i, (img, _, pts) in enumerate(phantoms)]


# one summary line per acceptance criterion -------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        if rep.skipped and not detail:
            detail = str(rep.longrepr[-1]) if isinstance(rep.longrepr, tuple) else ""
        _criteria[n] = f"criterion {n:>2} {status}  {title}" + (f"  [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(_criteria):
            terminalreporter.write_line(_criteria[n])
