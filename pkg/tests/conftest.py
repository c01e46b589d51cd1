import numpy as np
import pytest
from hypothesis import settings

from evolvecast.graph import GraphSnapshot
from evolvecast.model import CastConfig

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_snapshot(rng, n, p=0.3, period=1, offset=0):
    nodes = list(range(offset, offset + n))
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                edges.append((nodes[i], nodes[j], float(rng.uniform(0.5, 10.0))))
    return GraphSnapshot(period, tuple(nodes), tuple(edges))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return CastConfig(
        stacks=1, blocks=1, heads=2, cheb_order=2, in_features=2,
        spatial_channels=4, attention_channels=4, temporal_filters=3,
    )


@pytest.fixture
def small_config():
    return CastConfig(
        stacks=2, blocks=2, heads=2, cheb_order=2, in_features=2,
        spatial_channels=4, attention_channels=4, temporal_filters=3,
    )


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA: dict = {}


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    entry = {"label": marker.args[0] if marker else request.node.name, "detail": "", "outcome": None}
    _CRITERIA[request.node.nodeid] = entry
    return entry


def pytest_runtest_logreport(report):
    entry = _CRITERIA.get(report.nodeid)
    if entry is None:
        return
    if report.when == "call" or report.failed:
        if entry["outcome"] != "FAIL":
            entry["outcome"] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(_CRITERIA.values(), key=lambda e: e["label"]):
        outcome = entry["outcome"] or "FAIL"
        detail = f" ({entry['detail']})" if entry["detail"] else ""
        terminalreporter.write_line(f"{outcome} {entry['label']}{detail}")
