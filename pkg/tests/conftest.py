import pytest

_RESULTS: dict[int, list[tuple[bool, str]]] = {}


def _line(number: int) -> str:
    parts = _RESULTS[number]
    verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
    return f"criterion {number:2d}: {verdict}  " + "; ".join(detail for _, detail in parts)


@pytest.fixture(scope="session")
def acceptance():
    """``acceptance(n, ok, detail)`` records one part of criterion ``n``."""

    def record(number: int, ok: bool, detail: str):
        _RESULTS.setdefault(number, []).append((bool(ok), detail))
        print(_line(number))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        terminalreporter.write_line(_line(number))
