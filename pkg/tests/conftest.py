"""Collects acceptance verdicts and prints them once at the end of the run."""

VERDICTS = []


def record(number, passed, detail=""):
    VERDICTS.append((number, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(VERDICTS):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}"
                                    f"  {detail}")
