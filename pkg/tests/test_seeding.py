"""Named substream derivation for reproducible randomness."""

import numpy as np

from cyclesynth.seeding import substream


def test_substream_is_deterministic():
    a = substream(42, "worker", "init").random(5)
    b = substream(42, "worker", "init").random(5)
    assert np.array_equal(a, b)


def test_substreams_differ_by_name():
    a = substream(42, "worker", "init").random(5)
    b = substream(42, "worker", "acq").random(5)
    assert not np.array_equal(a, b)


def test_substreams_differ_by_seed():
    a = substream(1, "x").random(5)
    b = substream(2, "x").random(5)
    assert not np.array_equal(a, b)
