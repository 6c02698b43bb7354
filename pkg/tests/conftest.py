import contextlib

import pytest

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance criterion's verdict.

    The block receives a dict whose ``detail`` entry is printed next to the
    verdict; any exception inside the block marks the criterion FAIL.
    """
    log = request.config.stash.setdefault(_ACCEPTANCE, [])

    @contextlib.contextmanager
    def record(number, title):
        entry = {"detail": ""}
        status = "FAIL"
        try:
            yield entry
            status = "PASS"
        finally:
            line = f"criterion {number:>2} {status}  {title}"
            if entry["detail"]:
                line += f"  [{entry['detail']}]"
            log.append((number, line))
            print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE, [])
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(log):
        terminalreporter.write_line(line)
