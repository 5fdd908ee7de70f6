from __future__ import annotations

import configparser

import numpy as np
import pytest

from gatrec.dataset import Interaction
from gatrec.graph import build_graph
from gatrec.model import ModelConfig
from gatrec.synthetic import fixture_dir

# 3 users, 4 items, 6 rated edges (4 positive, 2 explicit negatives)
TINY = [
    Interaction(1, 11, 5, 100),
    Interaction(1, 12, 4, 101),
    Interaction(1, 13, 1, 102),
    Interaction(2, 12, 5, 103),
    Interaction(2, 14, 2, 104),
    Interaction(3, 14, 4, 105),
]

# same architecture (3 layers, 4 heads, concat then average) at a size where every entry can be finite-differenced
SMALL_MODEL = ModelConfig(input_dim=10, hidden_dim=16, heads=4, n_layers=3, dropout=0.0)


@pytest.fixture
def tiny_interactions():
    return list(TINY)


@pytest.fixture
def tiny_graph():
    return build_graph(TINY)


@pytest.fixture
def tiny_batch(tiny_graph):
    U = tiny_graph.n_users
    return np.array([[0, U + 0, U + 2], [0, U + 1, U + 3], [1, U + 1, U + 3], [2, U + 3, U + 0]])


@pytest.fixture(scope="session")
def synthetic_dir():
    return fixture_dir()


def write_config(directory, **sections):
    """Write a run file for the bundled synthetic fixture under ``directory``.

    ``sections`` maps a section name to key overrides, e.g. ``train={"max_epochs": 5}``.
    """
    data = fixture_dir()
    cp = configparser.ConfigParser()
    cp.read_dict({
        "data": {"ratings": str(data / "ratings.tsv"), "format": "ML100K", "items": str(data / "items.tsv"),
                 "catalog": str(data / "catalog.tsv")},
        "providers": {"profile": "fallback", "embed": "fallback", "dim": "384", "offline": "true"},
        "paths": {"cache_dir": "cache", "out_dir": "out"},
        "model": {"init": "text"},
        "train": {"alpha": "0.5", "max_epochs": "100", "seed": "0"},
        "eval": {"k_values": "5, 10, 20", "folds": "5", "split_seed": "0"},
    })
    for section, values in sections.items():
        for key, value in values.items():
            cp.set(section, key, str(value))
    path = directory / "run.conf"
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)
    return path


ACCEPTANCE_NAMES = {
    "test_c01_gradient_correctness": "1 gradient correctness (finite differences)",
    "test_c02_attention_normalization": "2 attention coefficients sum to 1",
    "test_c03_loss_identities": "3 loss reduction identity and closed forms",
    "test_c04_metric_oracle": "4 metric oracle equivalence",
    "test_c05_sampler_safety": "5 negative sampler safety",
    "test_c06_splitter": "6 k-fold splitter correctness",
    "test_c07_learning_dynamics": "7 learning dynamics on synthetic data",
    "test_c08_ablation_direction": "8 ablation direction",
    "test_c09_pipeline_determinism": "9 pipeline determinism",
    "test_c10_ml100k_smoke": "10 MovieLens 100k smoke (optional)",
}

_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    # parametrized cases share one criterion line; any failing case fails it
    name = report.nodeid.rsplit("::", 1)[-1].split("[", 1)[0]
    if "test_acceptance.py" not in report.nodeid or name not in ACCEPTANCE_NAMES:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        outcome = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        if _acceptance.get(name) != "FAIL":
            _acceptance[name] = outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, label in ACCEPTANCE_NAMES.items():
        if name in _acceptance:
            terminalreporter.write_line(f"{_acceptance[name]:4}  criterion {label}")
