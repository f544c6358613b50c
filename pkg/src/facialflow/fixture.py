"""The bundled synthetic fixture: a basis, two parameter sets and source landmarks."""

import shutil
from importlib import resources
from pathlib import Path

import numpy as np

from .fitting import save_landmarks
from .morphable_model import (
    landmarks_2d, random_params, save_basis, save_params, synthetic_basis,
)

FIXTURE_FILES = ("basis.f3b", "source.json", "target.json", "landmarks.json")
FIXTURE_SEED = 2024


def build_fixture(out_dir):
    """Regenerate the fixture files in ``out_dir`` (deterministic)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    basis = synthetic_basis()
    rng = np.random.default_rng(FIXTURE_SEED)
    source = random_params(basis, rng, max_angle=0.15)
    # Same identity, different expression and head pose.
    target = source.replace(alpha_exp=rng.normal(0.0, 1.5, basis.n_exp),
                            rotation=source.rotation + rng.uniform(-0.2, 0.2, 3))
    save_basis(basis, out / "basis.f3b")
    save_params(source, out / "source.json")
    save_params(target, out / "target.json")
    save_landmarks(landmarks_2d(basis, source), out / "landmarks.json")
    return out


def fixture_dir() -> Path:
    return Path(str(resources.files("facialflow") / "data"))


def copy_fixture(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in FIXTURE_FILES:
        shutil.copyfile(fixture_dir() / name, out / name)
    return out


if __name__ == "__main__":
    build_fixture(fixture_dir())
