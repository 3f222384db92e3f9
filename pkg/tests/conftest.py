def pytest_terminal_summary(terminalreporter):
    """Print the acceptance scorecard after the run (fd capture would
    otherwise swallow per-test prints)."""
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "SCORECARD", None):
        return
    SCORECARD = mod.SCORECARD
    terminalreporter.section("acceptance scorecard")
    for _, line in sorted(SCORECARD):
        terminalreporter.write_line(line)
