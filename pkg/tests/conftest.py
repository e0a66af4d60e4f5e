import numpy as np
import pytest

from visitemb.corpus import N_LABELS, ConceptPair, GeneratorConfig, Stay


def make_stay(sid, pid="p0", words=(), events=(), labels=None, tags=()):
    labels = labels if labels is not None else [0] * N_LABELS
    docs = [list(words)] if words else []
    return Stay(sid, pid, docs, events, labels, tags)


def labels_with(*active):
    lab = [0] * N_LABELS
    for a in active:
        lab[a] = 1
    return lab


@pytest.fixture
def small_config():
    return GeneratorConfig(
        n_patients=60,
        vocab_size=300,
        doc_length=20,
        docs_per_stay=2.0,
        n_structured_features=120,
        concept_pairs=(ConceptPair("bact", rate=0.3),),
        seed=11,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}


def pytest_runtest_logreport(report):
    # a fixture failure never reaches the test body, so key on the test name rather than its properties
    name = report.nodeid.rpartition("::")[2]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.failed:
        props = dict(report.user_properties)
        label = props.get("criterion") or name[len("test_criterion_"):].replace("_", " ", 1)
        detail = props.get("detail", "") if report.when == "call" else f"error during {report.when}"
        _CRITERIA[label] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: int(s.split()[0])):
        verdict, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{verdict}  criterion {name}: {detail}")
