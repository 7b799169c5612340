import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from pnetlab.nets import mnist_cryptonets, toy_model
from pnetlab.numerics import make_rng
from pnetlab.pnet_core import encode_model

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

DATA_DIR = Path(__file__).parent / "data"


def mnist_root() -> Path:
    root = Path(os.environ.get("PNETLAB_DATA_ROOT", "/root/data"))
    return root / "mnist"


def have_mnist() -> bool:
    return (mnist_root() / "t10k-images-idx3-ubyte").exists() or (mnist_root() / "t10k-images-idx3-ubyte.gz").exists()


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def toy():
    return toy_model(weight=2.0, bias=0.0)


@pytest.fixture(scope="session")
def small_pnet():
    """Randomly initialised MNIST-shaped net with scaled-down weights, 16-bit."""
    fm = mnist_cryptonets(make_rng(7), channels=2, hidden=16)
    return encode_model(fm, bits=16, frac_bits=10)


@pytest.fixture(scope="session")
def mnist_test():
    if not have_mnist():
        pytest.skip("MNIST not available under $PNETLAB_DATA_ROOT/mnist")
    from pnetlab.data import load_mnist

    return load_mnist(mnist_root(), "test")


def random_images(rng, n, shape=(28, 28, 1)):
    return rng.random((n, *shape))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(RESULTS, key=lambda n: int("".join(c for c in n.split()[1] if c.isdigit()))):
        ok, detail = RESULTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
