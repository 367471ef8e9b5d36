import pytest

from snhc import central_maps as cm
from snhc.domains import build_ladder
from snhc.return_maps import build_return_model


@pytest.fixture(scope="session")
def hyp_map():
    return cm.hyperbolic(0.95, 1.01)


@pytest.fixture(scope="session")
def sn_map():
    return cm.saddle_node(0.999, 0.0)


@pytest.fixture(scope="session")
def tp_map():
    return cm.two_param(0.999, 1.001, -1e-7)


@pytest.fixture(scope="session")
def hyp_ladder(hyp_map):
    return build_ladder(hyp_map, 0.01)


@pytest.fixture(scope="session")
def sn_ladder(sn_map):
    return build_ladder(sn_map, 1e-3)


@pytest.fixture(scope="session")
def tp_ladder(tp_map):
    return build_ladder(tp_map, 1e-3)


@pytest.fixture(scope="session")
def hyp_model(hyp_map, hyp_ladder):
    return build_return_model(hyp_map, hyp_ladder)


@pytest.fixture(scope="session")
def sn_model(sn_map, sn_ladder):
    return build_return_model(sn_map, sn_ladder)


@pytest.fixture(scope="session")
def tp_model(tp_map, tp_ladder):
    return build_return_model(tp_map, tp_ladder)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    def record(number: int, checks: dict[str, bool], detail: str = "") -> None:
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}"
        if failed:
            line += f"  failed={failed}"
        if detail:
            line += f"  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
