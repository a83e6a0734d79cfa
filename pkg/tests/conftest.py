import os

import pytest
from hypothesis import HealthCheck, settings

from mobilemc.channel import mc_link_env, table1_env

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def env():
    """Default drug-delivery scenario with D_Tx = 1e-14 m^2/s."""
    return table1_env()


@pytest.fixture(scope="session")
def link_env():
    return mc_link_env()


# Acceptance criteria report: each criterion may be checked by several
# tests; the summary prints one line per criterion.
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE.setdefault(number, []).append((bool(ok), detail))
        print(f"AC{number} {'PASS' if ok else 'FAIL'}: {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        entries = ACCEPTANCE[number]
        ok = all(e[0] for e in entries)
        detail = "; ".join(e[1] for e in entries)
        terminalreporter.write_line(f"AC{number:<2} {'PASS' if ok else 'FAIL'}  {detail}")
