import pytest


class AcceptanceLog:
    """Collects one pass/fail line per acceptance criterion."""

    def __init__(self):
        self.lines = []

    def record(self, criterion: int, passed: bool, detail: str) -> None:
        line = f"ACCEPTANCE {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        self.lines.append(line)
        print(f"\n{line}", flush=True)


@pytest.fixture(scope="session")
def acceptance_log():
    log = AcceptanceLog()
    yield log
    if log.lines:
        print("\n" + "=" * 72)
        print("acceptance summary")
        print("=" * 72)
        for line in log.lines:
            print(line)
