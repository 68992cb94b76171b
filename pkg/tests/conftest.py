import contextlib

import pytest

# criterion id -> (passed, detail); filled by the ``criterion`` fixture.
_RESULTS: dict[str, tuple[bool, str]] = {}


class _Criterion:
    def __init__(self, cid: str, title: str):
        self.cid = cid
        self.title = title
        self.detail = ""

    def note(self, detail: str) -> None:
        self.detail = detail


@pytest.fixture
def criterion():
    @contextlib.contextmanager
    def run(cid: str, title: str):
        c = _Criterion(cid, title)
        try:
            yield c
        except BaseException as exc:
            first = str(exc).splitlines()[0] if str(exc) else ""
            _RESULTS[cid] = (False, f"{title}: {c.detail} {type(exc).__name__}: {first}".strip())
            raise
        _RESULTS[cid] = (True, f"{title}: {c.detail}".rstrip(": "))
    return run


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_RESULTS, key=lambda k: int(k[2:])):
        ok, detail = _RESULTS[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'} {detail}")
