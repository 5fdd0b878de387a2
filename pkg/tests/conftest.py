import numpy as np
import pytest

from cipherforest.engine import EngineParams, make_engine
from cipherforest.forest import Dataset, pad_forest, train_forest
from cipherforest.neural import convert_forest, normalize_forest

SMALL_SLOTS = 1024  # ring degree 2**11: fast enough for per-test CKKS engines


def xor_dataset(rows=1500, d=4, seed=11):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (rows, d))
    y = ((x[:, 0] > 0.5) ^ (x[:, 1] > 0.5)).astype(int)
    return Dataset(x, y, [f"f{i}" for i in range(d)])


@pytest.fixture(scope="session")
def small_forest():
    """A padded 6-tree depth-4 forest over the XOR task."""
    return pad_forest(train_forest(xor_dataset(), n_trees=6, max_depth=4,
                                   min_samples_leaf=10, rng_seed=5))


@pytest.fixture(scope="session")
def small_model(small_forest):
    return convert_forest(small_forest)


@pytest.fixture(scope="session")
def small_model_norm(small_model):
    return normalize_forest(small_model)


@pytest.fixture(scope="session")
def ckks_engine_cache():
    """Engines keyed by (slots, budget, steps); construction dominates CKKS
    test time, so deterministic engines are shared and counters reset."""
    cache = {}

    def get(slot_count=SMALL_SLOTS, depth_budget=6, steps=(1, 2, 4, 8), seed=9):
        key = (slot_count, depth_budget, tuple(steps), seed)
        if key not in cache:
            cache[key] = make_engine(
                EngineParams(slot_count=slot_count, depth_budget=depth_budget,
                             scale_bits=40, backend="ckks"),
                rotation_steps=steps, seed=seed,
            )
        cache[key].reset_counters()
        return cache[key]

    return get
