import re


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, whatever the capture mode."""
    seen = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance.py::" not in getattr(rep, "nodeid", ""):
                continue
            if rep.when == "call" or rep.failed:
                prev = seen.get(rep.nodeid)
                if prev is None or rep.failed:
                    seen[rep.nodeid] = rep
    if not seen:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(seen):
        rep = seen[nodeid]
        m = re.search(r"test_c(\d+)_(\w+)", nodeid)
        name = f"criterion {int(m.group(1)):2d} ({m.group(2)})" if m else nodeid
        detail = dict(rep.user_properties).get("detail", "")
        verdict = "PASS" if rep.passed else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}  {detail}")
