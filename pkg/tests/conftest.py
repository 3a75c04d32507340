import pytest
import torch

from panodiff.model import ModelConfig

torch.set_num_threads(1)


def tiny_config(**kw) -> ModelConfig:
    base = dict(image_size=8, patch=2, patch_factor=1, hidden=16, depth=2, heads=2, cond_tokens=3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config


# acceptance report: one line per criterion at the end of the run ------------------

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    n, title = mark.args
    prev = _criteria.get(n, (title, True, ""))
    ok = prev[1] and not rep.failed
    detail = getattr(item, "criterion_detail", "") or prev[2]
    _criteria[n] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok, detail = _criteria[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
