import re

ACCEPTANCE_LINES: dict = {}


def _order(label):
    m = re.match(r"(\d+)(.*)", label)
    return int(m.group(1)), m.group(2)


def record_acceptance(label, ok, detail):
    """``ok`` is True, False or None (not run, e.g. a gated long criterion)."""
    label = str(label)
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
    line = f"criterion {label:>3}: {status}  {detail}"
    ACCEPTANCE_LINES[label] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES, key=_order):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
