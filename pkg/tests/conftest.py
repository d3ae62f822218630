import numpy as np
import pytest

from revstore import ChunkingParams, Store

SMALL = ChunkingParams(chunk_bits=8, segment_bits=10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_store(tmp_path):
    with Store(tmp_path / "store", container_capacity=4096, chunking=SMALL) as s:
        yield s


def random_bytes(rng, n):
    return rng.integers(0, 256, n, dtype=np.uint8).tobytes()


# -- acceptance report: one line per criterion at the end of the run

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    status = "PASS" if rep.passed else "FAIL"
    if n in _criteria and _criteria[n][1] == "FAIL":
        return
    _criteria[n] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status, detail = _criteria[n]
        line = f"criterion {n} [{title}]: {status}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
