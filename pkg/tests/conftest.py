CRITERIA: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    CRITERIA[n] = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(CRITERIA[n], flush=True)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
