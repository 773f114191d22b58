import pytest

import manifold_diffusion  # noqa: F401  (enables 64-bit JAX before any test imports jax.numpy)

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")
    config.addinivalue_line("markers", "slow: long-running end-to-end test")


@pytest.fixture
def measured(request):
    """Dict a criterion test fills with the numbers it measured."""
    box = {}
    request.node._measured = box
    return box


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    entry = _CRITERIA.setdefault(n, {"title": title, "passed": True, "ran": False, "details": {}})
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        entry["ran"] = True
        entry["passed"] = entry["passed"] and rep.passed
        entry["details"].update(getattr(item, "_measured", {}))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ran"] and e["passed"] else ("FAIL" if e["ran"] else "NOT RUN")
        detail = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in e["details"].items())
        terminalreporter.write_line(f"criterion {n:2d} {status}: {e['title']}" + (f" [{detail}]" if detail else ""))
