import os
import sys

# must happen before numba is imported; avoids the noisy TBB probe
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp tbb workqueue")

import numpy as np
import pytest


def random_instance(seed, m=16, n=32, sparse=3):
    """Non-negative unit-atom dictionary and a unit-norm input built from a few atoms."""
    rng = np.random.default_rng(seed)
    D = rng.random((m, n))
    D /= np.linalg.norm(D, axis=0)
    a = np.zeros(n)
    idx = rng.choice(n, size=sparse, replace=False)
    a[idx] = rng.uniform(0.3, 1.0, size=sparse)
    x = D @ a
    return D, x / np.linalg.norm(x)


@pytest.fixture
def instance():
    return random_instance(0)


@pytest.fixture(scope="session")
def desk_data():
    from spikedict.data_io import preprocess_split, reference_image, sample_patches

    img = reference_image()
    train = preprocess_split(sample_patches(img, 8, 20000, 1)).patches
    test = preprocess_split(sample_patches(img, 8, 500, 2)).patches
    return train, test


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
