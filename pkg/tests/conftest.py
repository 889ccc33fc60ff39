from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pignn_acpf import synth  # noqa: E402
from pignn_acpf.grid import Bus, BusType, Grid, Line  # noqa: E402


def two_bus(p=-0.5, q=0.0, r=0.0, x=0.1, b=0.0, v_slack=1.0, kind=BusType.PQ, v_set=1.0):
    buses = [Bus(0, BusType.SLACK, 0.0, 0.0, v_slack), Bus(1, kind, p, q, v_set)]
    return Grid(buses, [Line(0, 1, r, x, b)])


def chain(n, kinds=None, r=0.01, x=0.1, b=0.0):
    kinds = kinds or [BusType.SLACK] + [BusType.PQ] * (n - 1)
    buses = [Bus(i, k, 0.0, 0.0, 1.0) for i, k in enumerate(kinds)]
    return Grid(buses, [Line(i, i + 1, r, x, b) for i in range(n - 1)])


@pytest.fixture
def make_two_bus():
    return two_bus


@pytest.fixture(scope="session")
def hv_small():
    scenarios, _ = synth.synthesize_corpus("HV", 24, seed=11, n_min=4, n_max=6)
    return scenarios


@pytest.fixture(scope="session")
def mv_small():
    scenarios, _ = synth.synthesize_corpus("MV", 24, seed=12, n_min=4, n_max=6)
    return scenarios


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
