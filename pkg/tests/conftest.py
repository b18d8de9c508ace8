"""Shared pytest hooks: prints the acceptance scorecard after the run."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = None
    for name, m in list(sys.modules.items()):
        if name.rpartition(".")[2] == "test_acceptance" and hasattr(m, "RESULTS"):
            mod = m
            break
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance scorecard")
    for num in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[num]
        terminalreporter.write_line(
            f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d}: {detail}"
        )
