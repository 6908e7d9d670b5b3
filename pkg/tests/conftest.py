import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
