"""Collects acceptance-criterion verdicts and prints them at the end of the run."""

VERDICTS = {}


def pytest_runtest_logreport(report):
    number = dict(report.user_properties).get("criterion")
    if number is None or report.when == "teardown":
        return
    if report.when == "setup" and report.passed:
        return
    props = dict(report.user_properties)
    if report.skipped:
        status = "SKIP"
    else:
        status = "PASS" if report.passed else "FAIL"
    VERDICTS[number] = (status, props.get("title", report.nodeid), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        status, title, detail = VERDICTS[number]
        line = f"criterion {number} {status}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
