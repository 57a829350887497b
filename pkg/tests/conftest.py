ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        status, text = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key:4s} {status:4s} {text}")
