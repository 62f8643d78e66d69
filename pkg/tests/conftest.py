ACCEPTANCE_PREFIX = "tests/test_acceptance.py::"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py" not in nodeid:
                continue
            name = nodeid.split("::")[-1].replace("test_", "", 1)
            verdict = "PASS" if outcome == "passed" else "FAIL"
            lines.append(f"ACCEPTANCE {name}: {verdict}")
    if lines:
        terminalreporter.write_line("")
        terminalreporter.write_line("-- acceptance criteria --")
        for line in sorted(lines):
            terminalreporter.write_line(line)
