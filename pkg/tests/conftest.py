import pytest

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def record():
    """record(n, title, ok, detail) stores one acceptance verdict and prints it."""

    def _record(n, title, ok, detail):
        ACCEPTANCE[n] = (title, bool(ok), detail)
        print(f"ACCEPTANCE {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
