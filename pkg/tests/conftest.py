import pytest

# (criterion id, title, passed, detail, gating) rows filled in by test_acceptance
ACCEPTANCE_RESULTS: list[tuple[str, str, bool, str, bool]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid, title, ok, detail, gating in ACCEPTANCE_RESULTS:
        status = ("PASS" if ok else "FAIL") if gating else ("ok  " if ok else "miss") + " (non-gating)"
        terminalreporter.write_line(f"{status}  [{cid}] {title}: {detail}")


@pytest.fixture
def acceptance_log():
    def record(cid: str, title: str, ok: bool, detail: str, gating: bool = True) -> bool:
        ACCEPTANCE_RESULTS.append((cid, title, bool(ok), detail, gating))
        status = ("PASS" if ok else "FAIL") if gating else ("ok" if ok else "miss") + " (non-gating)"
        print(f"{status}  [{cid}] {title}: {detail}")
        return bool(ok)

    return record
