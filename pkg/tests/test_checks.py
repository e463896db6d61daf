import random
import statistics

import pytest
from hypothesis import given, settings, strategies as st

from pbackup.sim.checks import pipeline_bound


def _monte_carlo(chunks, n_r, ordinal, trials, seed=0):
    """Oracle: shuffle each replicator's queue and read off the chunk's replica times."""
    rng = random.Random(seed)
    m = n_r * chunks
    times = []
    for _ in range(trials):
        positions = sorted(rng.randint(1, m) for _ in range(n_r))
        times.append(positions[ordinal - 1])
    return statistics.fmean(times)


@pytest.mark.parametrize("ordinal", [1, 2, 3])
def test_matches_simulation_oracle(ordinal):
    got = pipeline_bound(20, 1.0, 1.0, 3, ordinal)
    assert got == pytest.approx(_monte_carlo(20, 3, ordinal, 200_000), rel=0.01)


def test_reference_values():
    # 1 GB per node in 50 MB chunks at 500 KB/s with three replicas
    vals = [pipeline_bound(20, 50e6, 500e3, 3, k) for k in (1, 2, 3)]
    assert vals == pytest.approx([1550.42, 3050.0, 4549.58], abs=0.01)


@settings(max_examples=50)
@given(chunks=st.integers(1, 40), n_r=st.integers(1, 5))
def test_ordinals_are_ordered_and_bounded(chunks, n_r):
    vals = [pipeline_bound(chunks, 10.0, 2.0, n_r, k) for k in range(1, n_r + 1)]
    assert vals == sorted(vals)
    assert 5.0 <= vals[0] and vals[-1] <= n_r * chunks * 5.0 + 1e-9


def test_single_replica_is_queue_midpoint():
    assert pipeline_bound(10, 1.0, 1.0, 1, 1) == pytest.approx(5.5)


def test_bad_ordinal():
    with pytest.raises(ValueError):
        pipeline_bound(10, 1.0, 1.0, 3, 4)
