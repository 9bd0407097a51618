import pytest

# criterion number -> (passed, detail), filled in by the acceptance tests
ACCEPTANCE = {}


@pytest.fixture
def record():
    def put(k, passed, detail):
        ACCEPTANCE[k] = (bool(passed), detail)
        print(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
    return put


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
