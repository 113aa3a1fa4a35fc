import os
from pathlib import Path

import numpy as np
import pytest

from talkdistill.data import SyntheticSpec, gen_synthetic

ROOT = Path(__file__).resolve().parents[1]


def movielens_dir():
    """TD_DATA_DIR if set, else the repo-local materialised copy."""
    return Path(os.environ.get("TD_DATA_DIR") or ROOT / "data" / "ml-100k")


@pytest.fixture(scope="session")
def small_synthetic():
    spec = SyntheticSpec(n_pretrain=1500, n_pretrain_eval=300, n_downstream_train=60,
                         n_downstream_eval=200)
    return gen_synthetic(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
