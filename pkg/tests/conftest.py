import numpy as np
import pytest

from semxfer.dataset import GenConfig, gen_dataset
from semxfer.diffcore import Tensor

ACCEPTANCE_KEY = pytest.StashKey[list]()


def numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of one array, coordinate by coordinate."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = fn(x)
        x[idx] = orig - h
        down = fn(x)
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


def backprop_grads(build, *arrays):
    """Gradients of build(*leaves) w.r.t. each leaf, via the tape under test."""
    sinks = [np.zeros_like(np.asarray(a, dtype=float)) for a in arrays]
    leaves = [Tensor(np.array(a, dtype=float), sink=s) for a, s in zip(arrays, sinks)]
    build(*leaves).backward()
    return sinks


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-10)
    return float(np.max(np.abs(a - b) / denom))


@pytest.fixture(scope="session")
def small_config():
    return GenConfig(seed=3, base_scenes=40, pairs=30, train_triplets=300, test_triplets=60, queries_per_test_scene=20)


@pytest.fixture(scope="session")
def small_dataset(small_config):
    return gen_dataset(small_config)


@pytest.fixture(scope="session")
def trained_small(small_dataset):
    """A short transfer-regime run on the small dataset; shared by tests that need trained weights."""
    from semxfer.trainer import TrainConfig, train

    cfg = TrainConfig.from_json({"seed": 0, "iterations": 150, "regime": "transfer", "augment": {"onfly_per_step": 0}})
    return train(cfg, small_dataset)


def make_batches(ds, n_pairs: int, n_trips: int, seed: int = 0, q_domains=None):
    """Pair and triplet batches straight from a dataset (no trainer involved)."""
    from semxfer.encoders import observe, spec_features
    from semxfer.objective import PairBatch, TripletBatch

    rng = np.random.default_rng(seed)
    ids = [ds.pairs[i] for i in rng.choice(len(ds.pairs), n_pairs, replace=False)]
    pb = PairBatch(ids, np.stack([observe(ds.scenes[i], "A") for i in ids]),
                   np.stack([observe(ds.scenes[i], "B") for i in ids]))
    trips, seen = [], set()
    for i in rng.permutation(len(ds.train)):
        t = ds.train[int(i)]
        if t.r not in seen:
            seen.add(t.r)
            trips.append(t)
        if len(trips) == n_trips:
            break
    qd = q_domains or ["A"] * n_trips
    tb = TripletBatch(qd, [observe(ds.scenes[t.q], d) for t, d in zip(trips, qd)],
                      spec_features([t.t for t in trips]), ["A"] * n_trips,
                      [observe(ds.scenes[t.r], "A") for t in trips])
    return pb, tb


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    """Collects one line per acceptance criterion; echoed in the terminal summary."""
    return pytestconfig.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
