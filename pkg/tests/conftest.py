import hashlib
import logging
from pathlib import Path

import numpy as np
import pytest
import torch

import dualerase
from dualerase.toy import build_toy_backend, load_weights, make_dataset, save_weights, train_toy
from dualerase.toy.model import ToyConfig
from dualerase.toy.scenes import random_scene

TRAIN_RECIPE = {"n_scenes": 64, "dataset_seed": 0, "epochs": 200, "lr": 1e-3, "seed": 0}
HELD_OUT_SEED = 1000

PKG_DIR = Path(dualerase.__file__).parent
TOY_SOURCES = ["toy/model.py", "toy/train.py", "toy/scenes.py", "backend.py", "attention.py"]


def _recipe_key() -> str:
    digest = hashlib.sha256(repr(sorted(TRAIN_RECIPE.items())).encode())
    digest.update(repr(ToyConfig()).encode())
    digest.update(torch.__version__.encode())
    for rel in TOY_SOURCES:
        digest.update((PKG_DIR / rel).read_bytes())
    return digest.hexdigest()[:16]


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    # bit-reproducibility checks compare runs inside one process; keep kernels deterministic
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def trained_toy_path(request):
    """Weights trained with the reference recipe, cached across sessions."""
    cache_dir = Path(request.config.cache.mkdir("toy_weights"))
    path = cache_dir / f"toy-{_recipe_key()}.pt"
    if not path.exists():
        logging.getLogger(__name__).info("training the reference toy backend (one-off)")
        model = build_toy_backend(ToyConfig())
        data = make_dataset(TRAIN_RECIPE["n_scenes"], TRAIN_RECIPE["dataset_seed"], model.n_v)
        model, curve = train_toy(model, data, TRAIN_RECIPE["epochs"], TRAIN_RECIPE["lr"], TRAIN_RECIPE["seed"])
        save_weights(model, path)
        np.savetxt(path.with_suffix(".curve.txt"), np.asarray(curve))
    return path


@pytest.fixture(scope="session")
def trained_toy(trained_toy_path):
    return load_weights(trained_toy_path)


@pytest.fixture(scope="session")
def training_curve(trained_toy_path):
    return np.loadtxt(trained_toy_path.with_suffix(".curve.txt"))


@pytest.fixture(scope="session")
def untrained_toy():
    return build_toy_backend(ToyConfig())


@pytest.fixture(scope="session")
def held_out_scenes():
    rng = np.random.default_rng(HELD_OUT_SEED)
    return [random_scene(rng) for _ in range(10)]


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
