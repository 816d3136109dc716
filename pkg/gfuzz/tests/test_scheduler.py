#!/bin/python

from fractions import Fraction

import pytest

from gfuzz.errors import ConfigError
from gfuzz.scheduler import CONSUMER, PRODUCER, Event, Phase, \
    RandomSource, SwitchState, SyscallWeights, UtilizationSchedule, \
    VirtualClock, WallClock, begin_exploitation, biased_rand, \
    insert_indices, record_shorter_distance, selection_probability, \
    switch_step, utilization_probability


def test_utilization_probability():
    s = UtilizationSchedule(0.9, 0.1, 600)
    assert(utilization_probability(s, 0) == pytest.approx(0.9))
    assert(utilization_probability(s, 300) == pytest.approx(0.5))
    assert(utilization_probability(s, 600) == 0.1)
    assert(utilization_probability(s, 6000) == 0.1)


def test_utilization_matches_linear_decay():
    rng = RandomSource(3)
    for _ in range(1000):
        p_min = rng.random() * 0.5
        p_max = p_min + rng.random() * (1 - p_min)
        t_fuzz = 1 + rng.random() * 1000
        s = UtilizationSchedule(p_max, p_min, t_fuzz)
        t = rng.random() * t_fuzz
        p = utilization_probability(s, t)
        expected = p_max - (p_max - p_min) / t_fuzz * t
        assert(p == pytest.approx(expected, abs=1e-12))
        assert(p_min <= p <= p_max)


def test_utilization_is_monotone():
    s = UtilizationSchedule(0.8, 0.2, 100)
    probs = [utilization_probability(s, t) for t in range(0, 150, 5)]
    assert(all(a >= b for a, b in zip(probs, probs[1:])))


def test_bad_schedule():
    with pytest.raises(ConfigError):
        UtilizationSchedule(0.1, 0.9, 600)
    with pytest.raises(ConfigError):
        UtilizationSchedule(0.9, 0.1, 0)


def test_selection_probability():
    w = SyscallWeights(["read", "pipe", "pipe2"])
    for s in ("read", "pipe", "pipe2"):
        assert(selection_probability(w, s) == pytest.approx(1 / 3))
    record_shorter_distance(w, ["pipe", "getpid", "pipe", "read"])
    assert(w.freq == {"read": 1, "pipe": 2, "pipe2": 0})
    assert(selection_probability(w, "pipe") == pytest.approx(3 / 6))
    assert(selection_probability(w, "pipe2") == pytest.approx(1 / 6))
    snap = w.snapshot()
    assert(sum(snap.values()) == pytest.approx(1.0))
    assert(snap["read"] == pytest.approx(2 / 6))
    with pytest.raises(KeyError):
        selection_probability(w, "getpid")


def test_once_per_input_counting():
    w = SyscallWeights(["pipe"], per_occurrence=False)
    record_shorter_distance(w, ["pipe", "pipe", "pipe"])
    assert(w.freq["pipe"] == 1)


def test_choose_follows_weights():
    w = SyscallWeights(["a", "b"])
    w.freq["b"] = 8
    rng = RandomSource(1)
    draws = [w.choose(rng) for _ in range(10000)]
    share = draws.count("b") / len(draws)
    assert(0.85 < share < 0.95)


@pytest.mark.parametrize("n", [2, 5, 10])
def test_biased_rand(n):
    rng = RandomSource(n)
    counts = [0] * n
    for _ in range(100000):
        counts[biased_rand(rng, n, 5)] += 1
    assert(4 <= counts[n - 1] / counts[0] <= 6)
    assert(all(a < b for a, b in zip(counts, counts[1:])))


def test_biased_rand_edges():
    rng = RandomSource(0)
    assert(biased_rand(rng, 1, 5) == 0)
    assert({biased_rand(rng, 4, 1) for _ in range(200)} == {0, 1, 2, 3})
    with pytest.raises(ConfigError):
        biased_rand(rng, 0, 5)


def test_insert_indices():
    rng = RandomSource(11)
    consumers = [insert_indices(rng, 4, CONSUMER, 5) for _ in range(20000)]
    producers = [insert_indices(rng, 4, PRODUCER, 5) for _ in range(20000)]
    assert(min(consumers) == 0 and max(consumers) == 4)
    assert(min(producers) == 0 and max(producers) == 4)
    assert(consumers.count(4) > 3 * consumers.count(0))
    assert(producers.count(0) > 3 * producers.count(4))
    assert(insert_indices(rng, 0, PRODUCER, 5) == 0)


def test_random_source_is_deterministic():
    a, b = RandomSource(42), RandomSource(42)
    assert([a.randrange(1000) for _ in range(50)] ==
           [b.randrange(1000) for _ in range(50)])
    assert(RandomSource(42).spawn(3).seed == 45)
    assert(sorted(RandomSource(5).sample(10, 10)) == list(range(10)))
    with pytest.raises(ConfigError):
        RandomSource(-1)


def test_weighted_index_skips_zero_weight():
    rng = RandomSource(9)
    assert({rng.weighted_index([0, 3, 0, 1]) for _ in range(500)} == {1, 3})


def test_begin_exploitation():
    st = begin_exploitation(SwitchState(), 0.8)
    assert(st.phase is Phase.EXPLOIT)
    assert(st.last_progress == 0.8)
    st = begin_exploitation(SwitchState(), 0.8, Phase.EXPLORE, locked=True)
    assert(st.phase is Phase.EXPLORE and st.locked)


def test_exploit_keeps_going_on_reachable_progress():
    st = begin_exploitation(SwitchState(), 0.0)
    for now in range(100, 3700, 100):
        st = switch_step(st, Event.NEW_REACHABLE_PATH, float(now))
        assert(st.phase is Phase.EXPLOIT)
    # A new path outside the reachable set is no progress for exploitation
    st = begin_exploitation(SwitchState(), 0.0)
    st = switch_step(st, Event.NEW_PATH, 300.0)
    assert(st.phase is Phase.EXPLORE)


def test_explore_progress_on_any_new_path():
    st = replace_phase(Phase.EXPLORE)
    st = switch_step(st, Event.NEW_PATH, 500.0)
    assert(st.phase is Phase.EXPLORE and st.last_progress == 500.0)
    st = switch_step(st, Event.NONE, 1099.0)
    assert(st.phase is Phase.EXPLORE)
    st = switch_step(st, Event.NONE, 1100.0)
    assert(st.phase is Phase.EXPLOIT and st.last_progress == 1100.0)


def replace_phase(phase):
    return begin_exploitation(SwitchState(), 0.0, phase)


def test_switch_liveness():
    clock = VirtualClock(0.1)
    st = begin_exploitation(SwitchState(), clock.now())
    flips = []
    while clock.now() < 2000:
        clock.tick()
        prev = st.phase
        st = switch_step(st, Event.NONE, clock.now())
        if st.phase is not prev:
            flips.append((clock.now(), st.phase))
    assert(flips == [(300.0, Phase.EXPLORE), (900.0, Phase.EXPLOIT),
                     (1200.0, Phase.EXPLORE), (1800.0, Phase.EXPLOIT)])


def test_locked_switch_never_flips():
    st = begin_exploitation(SwitchState(), 0.0, Phase.EXPLORE, locked=True)
    st = switch_step(st, Event.NONE, 5000.0)
    assert(st.phase is Phase.EXPLORE)


def test_bad_switch_thresholds():
    with pytest.raises(ConfigError):
        SwitchState(t_a=0)


def test_clocks():
    clock = VirtualClock(0.5)
    for _ in range(4):
        clock.tick()
    assert(clock.now() == 2.0)
    clock = VirtualClock(0.1)
    for _ in range(3003):
        clock.tick()
    assert(clock.now() - 300 == Fraction(3, 10))
    assert(WallClock().now() >= 0)
    with pytest.raises(ConfigError):
        VirtualClock(0)
