"""Deterministic PRNG layer: reference vectors, substream independence."""
import numpy as np
import pytest

from trojarena.rng import Xoshiro256pp, derive_seed, splitmix64, stream


def test_splitmix64_reference_vector():
    # First outputs of splitmix64 from seed 0, cross-checked against the
    # reference C implementation (Vigna).
    state = 0
    state, first = splitmix64(state)
    assert first == 0xE220A8397B1DCDAF
    state, second = splitmix64(state)
    assert second == 0x6E789E6AA1B965F4


def test_xoshiro256pp_reference_vector():
    # State (1, 2, 3, 4), first four outputs of xoshiro256++, from the
    # reference implementation.
    rng = Xoshiro256pp.from_state(1, 2, 3, 4)
    got = [rng.next_u64() for _ in range(4)]
    assert got == [41943041, 58720359, 3588806011781223, 3591011842654386]


def test_seeding_avoids_all_zero_state():
    # Any master seed must produce a legal (nonzero) generator state.
    for seed in (0, 1, 2**63 - 1):
        rng = stream(seed, "anything", 0)
        assert any(rng.state()) and rng.next_u64() is not None


def test_uniform_range_and_determinism():
    rng1 = stream(42, "test", 0)
    rng2 = stream(42, "test", 0)
    xs = [rng1.uniform() for _ in range(1000)]
    assert all(0.0 <= x < 1.0 for x in xs)
    assert xs == [rng2.uniform() for _ in range(1000)]


def test_streams_differ_by_purpose_and_index():
    a = [stream(7, "alpha", 0).uniform() for _ in range(1)]
    b = [stream(7, "beta", 0).uniform() for _ in range(1)]
    c = [stream(7, "alpha", 1).uniform() for _ in range(1)]
    assert a != b and a != c and b != c


def test_derive_seed_stable_and_distinct():
    assert derive_seed(7, "stage.selfplay") == derive_seed(7, "stage.selfplay")
    assert derive_seed(7, "stage.selfplay") != derive_seed(7, "stage.fastfail")
    assert derive_seed(7, "x") != derive_seed(8, "x")
    assert 0 <= derive_seed(7, "x") < 2**63


def test_normal_moments():
    rng = stream(3, "normal", 0)
    xs = rng.normal(200_000)
    assert abs(float(np.mean(xs))) < 0.01
    assert abs(float(np.std(xs)) - 1.0) < 0.01


def test_normal_consumes_pairwise_identically():
    # normal(n) must be a pure function of the stream position so parallel
    # and serial branches agree.
    rng1 = stream(9, "n", 0)
    rng2 = stream(9, "n", 0)
    a = np.concatenate([rng1.normal(3), rng1.normal(2)])
    b = np.concatenate([rng2.normal(3), rng2.normal(2)])
    assert np.array_equal(a, b)


def test_state_roundtrip():
    rng = stream(11, "rt", 4)
    rng.uniform()
    saved = rng.state()
    ref = [rng.next_u64() for _ in range(5)]
    restored = Xoshiro256pp.from_state(*saved)
    assert [restored.next_u64() for _ in range(5)] == ref
