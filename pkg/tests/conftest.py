import sys
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dtpdt import synth

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL = dict(dims=(32, 32, 32), generations=3, root_length=8.0, root_radius=2.0)


@pytest.fixture(scope="session")
def small_bundle():
    """7-branch tree in a 32^3 volume."""
    return synth.generate_fitting(synth.SynthParams(seed=0, **SMALL))


@pytest.fixture(scope="session")
def bundles():
    """Default-size trees, one per seed."""
    return [synth.generate_fitting(synth.SynthParams(seed=s)) for s in range(6)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def remove_leaves(bundle, ids):
    """Ground-truth mask with whole leaf branches cut away.

    Voxels owned by the removed leaves go, except those on a surviving
    branch's centreline (junction voxels are shared).
    """
    keep = np.zeros(bundle.mask.dims, dtype=bool)
    for br in bundle.tree.branches:
        if br.id not in ids:
            keep[tuple(synth.centerline_voxels(br, bundle.mask.dims).T)] = True
    gone = np.isin(bundle.branch_labels.data, list(ids))
    return (((bundle.mask.data > 0) & ~gone) | keep).astype(np.float64)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
