import numpy as np
import pytest

from features import BalanceSpec
from panel import PanelDataset
from simlab import generate

TOY_CSV = """id,z1,z2,x1_1,x2_1,y
1,0,0,1.5,2.0,10
2,0,1,0.5,1.0,11
3,1,1,-0.5,0.0,12
4,1,0,2.5,3.0,13
"""

CENSORED_CSV = """id,z1,z2,x1_1,x2_1,y,c1,c2
a,0,0,1.5,2.0,10,0,0
b,1,,0.5,,,1,1
c,1,1,-0.5,0.0,,0,1
d,0,1,2.5,3.0,13,0,0
"""


def make_panel(z, x, y, censoring=None):
    """PanelDataset from a treatment matrix and one covariate block per period."""
    z = np.asarray(z)
    n = z.shape[0]
    return PanelDataset(ids=np.arange(1, n + 1).astype(str), covariates=tuple(np.asarray(b, dtype=float) for b in x),
                        treatments=z, outcome=np.asarray(y, dtype=float), censoring=censoring)


@pytest.fixture
def toy_csv():
    return TOY_CSV


@pytest.fixture
def censored_csv():
    return CENSORED_CSV


@pytest.fixture(scope='session')
def study1():
    return generate(1, 400, seed=11, replicate=0)


@pytest.fixture(scope='session')
def study1_spec(study1):
    return BalanceSpec.identity(study1.P, delta=0.01)


@pytest.fixture
def confounded():
    """Two-period panel where X_1 drives both treatments and the outcome."""
    rng = np.random.default_rng(5)
    n = 240
    x1 = rng.standard_normal((n, 2))
    z1 = (rng.random(n) < 1.0 / (1.0 + np.exp(-x1[:, 0]))).astype(int)
    x2 = x1 + 0.5 * z1[:, None] + rng.standard_normal((n, 2))
    z2 = (rng.random(n) < 1.0 / (1.0 + np.exp(-x2[:, 0] + 0.5))).astype(int)
    y = 3.0 * x1[:, 0] + 2.0 * x2[:, 1] + z1 + z2 + rng.standard_normal(n)
    return make_panel(np.column_stack([z1, z2]), [x1, x2], y)
