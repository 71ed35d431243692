import numpy as np
import pytest
import torch

from dbdmp.config import toy_config
from dbdmp.trainer import prepare_case
from dbdmp.volumes import SyntheticSpec, generate_synthetic_case

SMALL_SPEC = SyntheticSpec(shape=(16, 32, 32), instance_count=(2, 4), radius_mm=(2.0, 3.5))


def small_config(**sections):
    """Tiny, fast variant of the toy profile for unit tests."""
    patch = [16, 16, 16]
    base = {
        "data": {"n_train": 3, "n_val": 2, "synthetic": SMALL_SPEC.to_dict()},
        "network": {"levels": 2, "base_features": 4},
        "corruption": {"shuffle_window_max": [4, 4, 4], "shuffle_repeats": 20},
        "pretrain": {"epochs": 3, "iterations_per_epoch": 3, "batch_size": 1, "patch_size": patch,
                     "checkpoint_every": 1},
        "segment": {"epochs": 3, "iterations_per_epoch": 3, "batch_size": 1, "patch_size": patch,
                    "checkpoint_every": 1},
    }
    for key, value in sections.items():
        base.setdefault(key, {}).update(value)
    return toy_config(**base)


def small_cases(n=3, seed=0, spec=SMALL_SPEC):
    cases = []
    for i in range(n):
        image, _, partial, _ = generate_synthetic_case(seed + i, spec)
        cases.append(prepare_case(f"case_{i}", image, partial))
    return cases


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture(scope="session")
def cases():
    return small_cases()


@pytest.fixture(autouse=True)
def _torch_defaults():
    dtype = torch.get_default_dtype()
    yield
    torch.set_default_dtype(dtype)


def random_probs(rng, shape, dtype=torch.float64):
    """Channel-normalised probabilities (B, 2, *spatial) bounded away from 0 and 1."""
    fg = rng.uniform(0.05, 0.95, size=shape)
    p = np.stack([1 - fg, fg], axis=1)
    return torch.tensor(p, dtype=dtype)


def pytest_terminal_summary(terminalreporter):
    import suites

    if suites.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(suites.ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
