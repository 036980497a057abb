import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from threadpoolctl import threadpool_limits

from loraprun.model import ArchDescriptor, build_model

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
threadpool_limits(1)

_criteria: dict[int, list] = {}
_notes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion check")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    mark = getattr(report, "criterion", None)
    if mark is None:
        return
    n, text = mark
    entry = _criteria.setdefault(n, [text, []])
    entry[1].append(report.outcome == "passed" and not hasattr(report, "wasxfail"))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        rep.criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        text, results = _criteria[n]
        status = "PASS" if results and all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {text}  ({sum(results)}/{len(results)} checks)")
        for line in _notes.get(n, []):
            terminalreporter.write_line(f"    {line}")


@pytest.fixture
def note(request):
    """Attach a measured value to the summary line of the test's criterion."""
    mark = request.node.get_closest_marker("criterion")

    def add(text: str) -> None:
        if mark is not None:
            _notes.setdefault(mark.args[0], []).append(text)
        print(text)

    return add


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_desc():
    return ArchDescriptor(n_enc=2, n_dec=2, d_model=8, d_ffn=16, n_heads=2, vocab_size=11, max_positions=16)


@pytest.fixture
def tiny_model(tiny_desc):
    return build_model(tiny_desc, seed=3)


def random_batch(rng, desc, batch=3, src_len=5, tgt_len=4, pad_tail=True):
    src = rng.integers(4, desc.vocab_size, size=(batch, src_len))
    tgt = rng.integers(4, desc.vocab_size, size=(batch, tgt_len))
    if pad_tail:
        src[0, -2:] = 0
        tgt[-1, -1] = 0
    return src, tgt
