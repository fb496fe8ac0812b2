"""Shared fixtures: dataset directories in the canonical binary formats.

Set PRIVSPLIT_MNIST_DIR / PRIVSPLIT_CIFAR_DIR to directories holding the
real files to run the suite against them; otherwise deterministic
synthetic corpora are generated once per session in the same formats.
"""

import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synthdigits import write_cifar_corpus, write_mnist_corpus  # noqa: E402

from privsplit.datasets import load_cifar10, load_mnist  # noqa: E402

MNIST_NAMES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _has_all(path: Path, names) -> bool:
    return all((path / n).exists() or
               (path / n.replace("-idx", ".idx")).exists() for n in names)


def _resolve(path: Path, name: str) -> Path:
    primary = path / name
    return primary if primary.exists() else path / name.replace("-idx", ".idx")


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory) -> Path:
    env = os.environ.get("PRIVSPLIT_MNIST_DIR")
    if env and _has_all(Path(env), MNIST_NAMES):
        return Path(env)
    d = tmp_path_factory.mktemp("mnist")
    write_mnist_corpus(d, n_train=10000, n_test=10000, seed=1234)
    return d


@pytest.fixture(scope="session")
def real_mnist_dir() -> Path:
    env = os.environ.get("PRIVSPLIT_MNIST_DIR")
    if not (env and _has_all(Path(env), MNIST_NAMES)):
        pytest.skip("PRIVSPLIT_MNIST_DIR with the official files not set")
    return Path(env)


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory) -> Path:
    env = os.environ.get("PRIVSPLIT_CIFAR_DIR")
    if env and (Path(env) / "data_batch_1.bin").exists():
        return Path(env)
    d = tmp_path_factory.mktemp("cifar")
    write_cifar_corpus(d, n_train=500, n_test=200, seed=5678)
    return d


@pytest.fixture(scope="session")
def mnist_train(mnist_dir):
    return load_mnist(_resolve(mnist_dir, "train-images-idx3-ubyte"),
                      _resolve(mnist_dir, "train-labels-idx1-ubyte"))


@pytest.fixture(scope="session")
def mnist_test(mnist_dir):
    return load_mnist(_resolve(mnist_dir, "t10k-images-idx3-ubyte"),
                      _resolve(mnist_dir, "t10k-labels-idx1-ubyte"))


@pytest.fixture(scope="session")
def cifar_train(cifar_dir):
    return load_cifar10([cifar_dir / f"data_batch_{i}.bin"
                         for i in range(1, 6)])
