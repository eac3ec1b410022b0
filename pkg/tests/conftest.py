import sys
from pathlib import Path

import numpy as np
import pytest

from gestkit import synth
from gestkit.panel import Panel

sys.path.insert(0, str(Path(__file__).parent))


def make_panel(a, y, L=None, schema=None, prefix="r"):
    a = np.asarray(a)
    n = len(a)
    if L is None:
        L = np.zeros((n, 0))
    L = np.asarray(L, dtype=float).reshape(n, -1)
    schema = schema or tuple(f"l{j + 1}" for j in range(L.shape[1]))
    return Panel(schema=schema, unit_ids=[f"{prefix}{i}" for i in range(n)], treatment=a, outcome=y, covariates=L)


@pytest.fixture(scope="session")
def facet():
    """The default facet preset draw (n = 16,868, seed 42) with its ground truth."""
    return synth.generate(synth.facet_preset(), retain_potential=True)


@pytest.fixture(scope="session")
def facet_20k():
    return synth.generate(synth.facet_preset(n=20_000))


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
