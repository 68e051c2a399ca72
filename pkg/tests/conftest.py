import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            ok = "PASS" if status == "passed" else "FAIL"
            lines.append((name, ok))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name, ok in sorted(lines):
            terminalreporter.write_line(f"{ok}  {name}")
