import sys


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance-criteria PASS/FAIL lines after the test run."""
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None) if module else None
    if not results:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for number, label, ok in sorted(results):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"  criterion {number} ({label}): {status}")
