#!/bin/python

"""Scheduling policies of a campaign

Covers the decaying probability of using the inferred syscalls, the per-syscall
selection probability reinforced by the shorter-distance queue, the biased
insert position of producers and consumers, and the exploitation/exploration
switch.
"""

import bisect
import datetime
import enum
import functools
import itertools
from collections import Counter
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
import pytz

from gfuzz.errors import ConfigError

PRODUCER = "producer"
CONSUMER = "consumer"


class Phase(enum.Enum):
    INITIAL = "initial"
    EXPLOIT = "exploit"
    EXPLORE = "explore"


class Event(enum.Enum):
    NONE = "none"
    NEW_PATH = "new_path"
    NEW_REACHABLE_PATH = "new_reachable_path"


class RandomSource:
    """Seeded random stream.  The same seed always yields the same stream.

    :param seed: Nonnegative 64-bit seed
    :type seed: int
    """
    def __init__(self, seed=0):
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError("rng seed must be a 64-bit unsigned integer")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def random(self):
        return float(self._gen.random())

    def randrange(self, n):
        return int(self._gen.integers(n))

    def choice(self, seq):
        return seq[self.randrange(len(seq))]

    def sample(self, n, m):
        """Draw m distinct indices out of range(n), in draw order"""
        return [int(i) for i in self._gen.choice(n, size=m, replace=False)]

    def weighted_index(self, weights):
        """Draw an index with probability proportional to its weight"""
        cumulative = list(itertools.accumulate(weights))
        x = self.random() * cumulative[-1]
        return min(bisect.bisect_right(cumulative, x), len(weights) - 1)

    def spawn(self, offset):
        """Independent stream for repetition ``offset`` (seed + offset)"""
        return RandomSource(self.seed + offset)


@dataclass(frozen=True)
class UtilizationSchedule:
    """Linear decay of the probability of using the inferred syscalls"""
    p_max: float = 0.9
    p_min: float = 0.1
    t_fuzz: float = 600.0

    def __post_init__(self):
        if not 0 <= self.p_min <= self.p_max <= 1:
            raise ConfigError("Need 0 <= p_min <= p_max <= 1, got p_min={} "
                              "p_max={}".format(self.p_min, self.p_max))
        if self.t_fuzz <= 0:
            raise ConfigError("t_fuzz must be positive")


def utilization_probability(s, t):
    """Probability of using the inferred syscalls at campaign time t

    p = p_max - (p_max - p_min) / T_fuzz * t, clamped to [p_min, p_max].

    :param s: Schedule parameters
    :type s: UtilizationSchedule
    :param t: Elapsed campaign time in seconds
    :type t: float
    :rtype: float

    >>> utilization_probability(UtilizationSchedule(0.9, 0.1, 600), 300)
    0.5
    """
    if t >= s.t_fuzz:
        return s.p_min
    p = s.p_max - (s.p_max - s.p_min) * t / s.t_fuzz
    return min(max(p, s.p_min), s.p_max)


class SyscallWeights:
    """Frequency of each inferred syscall in the shorter-distance queue

    :param syscalls: The inferred syscall names
    :type syscalls: list(str)
    :param per_occurrence: Count every occurrence in an input (True) or once
        per input (False)
    :type per_occurrence: bool
    """
    def __init__(self, syscalls, per_occurrence=True):
        self.freq = {s: 0 for s in syscalls}
        self.per_occurrence = per_occurrence

    def __len__(self):
        return len(self.freq)

    def snapshot(self):
        """Return the selection probability of every inferred syscall"""
        total = sum(f + 1 for f in self.freq.values())
        return {s: (f + 1) / total for s, f in self.freq.items()}

    def choose(self, rng):
        names = list(self.freq)
        return names[rng.weighted_index([self.freq[s] + 1 for s in names])]


def selection_probability(w, s):
    """Selection probability of inferred syscall s: (F(s)+1) / sum(F+1)

    :raises: KeyError if s is not an inferred syscall
    """
    if s not in w.freq:
        raise KeyError("{} is not an inferred syscall".format(s))
    total = sum(f + 1 for f in w.freq.values())
    return (w.freq[s] + 1) / total


def record_shorter_distance(w, names):
    """Count the inferred syscalls of an input saved to the shorter queue

    :param names: Syscall names of the input, in call order
    :type names: list(str)
    """
    counts = Counter(n for n in names if n in w.freq)
    for s, c in counts.items():
        w.freq[s] += c if w.per_occurrence else 1


@functools.lru_cache(maxsize=256)
def _biased_cumulative(n, k):
    step = (k - 1) / (n - 1)
    return tuple(itertools.accumulate(1 + i * step for i in range(n)))


def biased_rand(rng, n, k):
    """Draw from [0, n) with linearly increasing weight from 1 to k

    The probability of n-1 is exactly k times the probability of 0.

    :type rng: RandomSource
    :rtype: int
    """
    if n < 1 or k < 1:
        raise ConfigError("biased_rand needs n >= 1 and k >= 1")
    if n == 1:
        return 0
    cumulative = _biased_cumulative(n, k)
    x = rng.random() * cumulative[-1]
    return min(bisect.bisect_right(cumulative, x), n - 1)


def insert_indices(rng, n, role, k):
    """Insertion slot in [0, n] for a call added to an n-call sequence

    Consumers lean toward the end, producers toward the front.
    """
    if role == PRODUCER:
        return n - biased_rand(rng, n + 1, k)
    return biased_rand(rng, n + 1, k)


@dataclass(frozen=True)
class SwitchState:
    """Phase of the exploitation/exploration state machine

    A locked state keeps its phase forever; progress still updates
    ``last_progress``.
    """
    phase: Phase = Phase.INITIAL
    last_progress: float = 0.0
    t_a: float = 300.0
    t_b: float = 600.0
    locked: bool = False

    def __post_init__(self):
        if self.t_a <= 0 or self.t_b <= 0:
            raise ConfigError("T_a and T_b must be positive")


def begin_exploitation(st, now, phase=Phase.EXPLOIT, locked=False):
    """Leave the initial phase once the initial seeds have run"""
    return replace(st, phase=phase, last_progress=now, locked=locked)


def switch_step(st, event, now):
    """Advance the switch by one observation

    Exploitation is stuck after T_a without a new path in the reachable set;
    exploration is stuck after T_b without any new path.

    :type st: SwitchState
    :type event: Event
    :param now: Current campaign time, never decreasing
    :rtype: SwitchState
    """
    assert(now >= st.last_progress), "Clock went backwards"
    if st.phase is Phase.EXPLOIT:
        if event is Event.NEW_REACHABLE_PATH:
            return replace(st, last_progress=now)
        if not st.locked and now - st.last_progress >= st.t_a:
            return replace(st, phase=Phase.EXPLORE, last_progress=now)
    elif st.phase is Phase.EXPLORE:
        if event is not Event.NONE:
            return replace(st, last_progress=now)
        if not st.locked and now - st.last_progress >= st.t_b:
            return replace(st, phase=Phase.EXPLOIT, last_progress=now)
    return st


class VirtualClock:
    """Clock advanced by executions: every tick is ``step_secs`` seconds

    Time is an exact :class:`fractions.Fraction`, so thresholds land on the
    same tick however many executions came before.
    """
    def __init__(self, step_secs=0.1):
        if step_secs <= 0:
            raise ConfigError("exec_secs must be positive")
        self.step_secs = Fraction(str(step_secs))
        self.ticks = 0

    def now(self):
        return self.ticks * self.step_secs

    def tick(self):
        self.ticks += 1


class WallClock:
    """Elapsed real time since construction, measured in UTC"""
    def __init__(self):
        self.start = datetime.datetime.now(pytz.utc)

    def now(self):
        return (datetime.datetime.now(pytz.utc) - self.start).total_seconds()

    def tick(self):
        pass
