import contextlib

import pytest

# (criterion id, description, "PASS"/"FAIL", detail), filled by test_acceptance.py
ACCEPTANCE: list = []


class _Detail(dict):
    def __str__(self):
        return ", ".join(f"{k}={_fmt(v)}" for k, v in self.items())


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


@pytest.fixture(scope="session")
def criterion():
    @contextlib.contextmanager
    def record(cid: str, description: str):
        detail = _Detail()
        try:
            yield detail
        except BaseException:
            ACCEPTANCE.append((cid, description, "FAIL", str(detail)))
            raise
        ACCEPTANCE.append((cid, description, "PASS", str(detail)))

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, description, status, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        line = f"[{status}] {cid:>3} {description}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
