import _acceptance_log


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_acceptance_log.RESULTS, key=lambda k: int(k[1:])):
        passed, detail = _acceptance_log.RESULTS[key]
        terminalreporter.write_line(f"{key} {'PASS' if passed else 'FAIL'}: {detail}")
