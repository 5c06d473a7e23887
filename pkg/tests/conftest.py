import sys
from pathlib import Path
from random import Random

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wormhole_maml import autodiff as ad


@pytest.fixture
def rng():
    return Random(12345)


def rand_tensor(rng, shape, lo=-1.0, hi=1.0, track=False):
    n = 1
    for d in shape:
        n *= d
    return ad.tensor_new(shape, [rng.uniform(lo, hi) for _ in range(n)], track=track)
