import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from davsr.data import PhantomSpec, generate_phantom  # noqa: E402
from davsr.models import ModelBundle, NetConfig  # noqa: E402
from davsr.volume import Volume  # noqa: E402

torch.set_num_threads(1)

TINY = NetConfig(num_rdb=1, convs_per_rdb=2, growth=4, base_channels=4, upscale=2)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_bundle():
    return ModelBundle.create(TINY, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_phantoms():
    return [generate_phantom(PhantomSpec(shape=(16, 16, 16), structure_seed=s)) for s in range(2)]


def random_volume(rng, shape) -> Volume:
    return Volume(rng.random(shape, dtype=np.float32))


def pytest_terminal_summary(terminalreporter):
    import criteria

    if not criteria.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(criteria.RESULTS):
        passed, detail = criteria.RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
