import pytest

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Print and record one acceptance line, then assert it."""
    lines = request.config.stash[VERDICTS]

    def report(n, ok, detail):
        line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
        print("\n" + line)
        lines.append(line)
        assert ok, detail

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
