import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

# (criterion number, verdict, detail) lines, printed once at the end of the session
ACCEPTANCE_LINES: list[tuple[int, str, str]] = []


@pytest.fixture
def criterion(request):
    """Record a one-line verdict for an acceptance criterion.

    Usage: ``criterion(7, ok, "naive drop 31.2 pts")`` then assert ``ok``.
    """

    def record(number: int, ok: bool, detail: str = ""):
        verdict = "PASS" if ok else "FAIL"
        ACCEPTANCE_LINES.append((number, verdict, detail))
        print(f"criterion {number:2d}: {verdict}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {detail}")
