import pytest

from pgaskit import spawn_world

BACKENDS = ("threads", "socket")
SEGMENT = 8 << 20


def run(backend, nprocs, fn, *args, segment_size=SEGMENT, **kwargs):
    """Run ``fn(rt, *args)`` on every rank and return the per-rank results."""
    return spawn_world(backend, nprocs, segment_size, fn, *args, **kwargs)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


# -- acceptance report ------------------------------------------------------
def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if not lines:
        return
    verdicts = {}
    for criterion, case, ok, detail in lines:
        verdicts.setdefault(criterion, []).append(ok)
    terminalreporter.section("acceptance criteria")
    for criterion, case, ok, detail in lines:
        terminalreporter.write_line(f"  {'pass' if ok else 'FAIL'}  {criterion} [{case}] {detail}")
    terminalreporter.write_line("")
    for criterion, oks in verdicts.items():
        terminalreporter.write_line(f"{'PASS' if all(oks) else 'FAIL'}  {criterion} ({sum(oks)}/{len(oks)} cases)")
