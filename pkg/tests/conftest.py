"""Collects the per-criterion results of the acceptance suite and prints one
line for each at the end of the run."""

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    n = props["criterion"]
    failed = report.failed
    if report.when == "call" or failed:
        previous = _criteria.get(n)
        if previous and previous[1] == "FAIL":
            return
        _criteria[n] = (props.get("title", ""), "FAIL" if failed else "PASS", props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n} {status}: {title} | {detail}")
