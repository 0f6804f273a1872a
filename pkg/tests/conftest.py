import hashlib
import inspect
import json
import os

import numpy as np
import pytest
import torch

from multiperso.backends import ToyBackend, ToyConfig, ToyWorld, load_checkpoint, toy_pretrain
from multiperso.backends.checkpoint import config_hash
from multiperso.core import SubjectAsset, SubjectRegistry

PRETRAIN_STEPS = int(os.environ.get("MULTIPERSO_PRETRAIN_STEPS", "4000"))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def pretrained_path(request):
    """Pretrained toy checkpoint, cached across sessions in pytest's cache directory."""
    cfg = ToyConfig()
    cache = request.config.cache.mkdir("multiperso")
    recipe = {k: p.default for k, p in inspect.signature(toy_pretrain).parameters.items()
              if isinstance(p.default, (int, float)) and k != "steps"}
    recipe["world"] = ToyWorld().config()
    recipe = hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest()[:8]
    path = cache / f"toy_{config_hash(ToyBackend(cfg))[:12]}_{recipe}_{PRETRAIN_STEPS}.safetensors"
    if path.exists():
        try:
            load_checkpoint(path)
            return path
        except Exception:
            path.unlink()
    toy_pretrain(ToyWorld(), steps=PRETRAIN_STEPS, seed=0, backend=ToyBackend(cfg), checkpoint_path=path)
    return path


@pytest.fixture(scope="session")
def _pretrained(pretrained_path):
    return load_checkpoint(pretrained_path).backend


@pytest.fixture
def pretrained(_pretrained):
    return _pretrained.clone()


@pytest.fixture
def toy_backend():
    return ToyBackend(ToyConfig(seed=0))


def reference_registry(seed=0):
    world = ToyWorld()
    image, masks = world.render(world.reference_scene(seed))
    return SubjectRegistry(
        [
            SubjectAsset(1, "<asset0>", "circle", masks[0], synonyms=("disk", "ball")),
            SubjectAsset(2, "<asset1>", "square", masks[1], synonyms=("box", "block")),
        ],
        image,
    )


@pytest.fixture
def registry():
    return reference_registry()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    """Store one acceptance outcome; the terminal summary prints them in order."""
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
