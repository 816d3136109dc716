#!/bin/python

"""Directed fuzzing campaign over syscall sequences

The campaign keeps a global queue of inputs that found new paths and a
shorter-distance queue of inputs that got closer to the target than their
parent.  Inferred syscalls are inserted with a decaying probability and drawn
by their frequency in the shorter-distance queue.
"""

import collections
import datetime
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import FrozenSet, List, Optional, Tuple

import pytz

from gfuzz import scheduler
from gfuzz.config import CampaignConfig
from gfuzz.distance import DistanceMap, analyze, function_level_distance, \
    seed_distance
from gfuzz.errors import ConfigError, ExecutionError, GFuzzError
from gfuzz.inference import infer_all
from gfuzz.inputs import INVALID, Call, Input, Ref, format_input
from gfuzz.scheduler import CONSUMER, PRODUCER, Event, Phase, SwitchState
from gfuzz.sim_kernel import SimExecutor, satisfies

logger = logging.getLogger(__name__)

MUTATION_OPS = ("arg", "insert", "duplicate", "remove")
TIME_SPLIT_EXPLORE = Fraction(20, 24)
INFERRING_MODES = ("gfuzz", "explore_only", "exploit_only", "func_dis")


@dataclass(frozen=True)
class Seed:
    """An executed input

    :ivar coverage: Coverage signature, blocks or edges by configuration
    :ivar blocks: Covered blocks
    """
    input: Input
    coverage: FrozenSet
    blocks: FrozenSet
    distance: float = math.inf
    parent_distance: float = math.inf


@dataclass
class SeedPool:
    global_queue: List[Seed] = field(default_factory=list)
    shorter_queue: List[Seed] = field(default_factory=list)
    covered: set = field(default_factory=set)

    def __len__(self):
        return len(self.global_queue)


@dataclass
class CampaignResult:
    hit: bool
    tte: float
    executions: int
    poc: Optional[Input] = None
    probability_trace: List[Tuple[float, str, float]] = field(
        default_factory=list)
    phase_timeline: List[Tuple[float, str]] = field(default_factory=list)
    mode: str = "gfuzz"
    rng_seed: int = 0
    inferred: List[str] = field(default_factory=list)
    target: str = ""

    def final_probabilities(self):
        """Selection probability of every inferred syscall at campaign end"""
        last = {}
        for _, name, p in self.probability_trace:
            last[name] = p
        return last

    def to_report(self):
        return {
            "target": self.target,
            "hit": self.hit,
            "tte_secs": self.tte,
            "executions": self.executions,
            "mode": self.mode,
            "rng_seed": self.rng_seed,
            "generated_at": datetime.datetime.now(pytz.utc).isoformat(),
            "inferred": list(self.inferred),
            "phase_timeline": [list(p) for p in self.phase_timeline],
            "probability_trace": [list(p) for p in self.probability_trace],
            "poc": format_input(self.poc) if self.poc is not None else None,
        }


def write_report(result, path):
    with open(path, "w") as f:
        json.dump(result.to_report(), f, indent=2)


def read_report(path):
    with open(path, "r") as f:
        return json.load(f)


def plan_campaign(scenario, target, config, kb=None, trace=None,
                  nr_table=None):
    """Distance map and inferred syscalls a campaign runs with in its mode

    :return: (distance map, inferred syscalls)
    :rtype: tuple(DistanceMap, list(InferredSyscall))
    """
    program = scenario.program
    rs, icfg, dm = analyze(program, target, config.indirect)
    inferred = []
    if config.mode in INFERRING_MODES:
        inferred = infer_all(program, target, dm, kb, trace,
                             scenario.variant_table(), nr_table, rs=rs,
                             icfg=icfg,
                             dispatch_frames=tuple(config.dispatch_frames),
                             dispatch_arg=config.dispatch_arg)
    if config.mode == "func_dis":
        dm = function_level_distance(program, rs)
    elif config.mode == "undirected":
        dm = DistanceMap(entries={})
    return dm, inferred


def build_initial_seeds(inferred, scenario, rng, count, max_calls=12):
    """Initial inputs built around the inferred syscalls

    Inferred syscalls are used round-robin, each with the producers its
    resource arguments need.  Without inference the seeds are random
    sequences of one to three calls.

    :rtype: list(Input)
    """
    if count < 1:
        raise ConfigError("Need at least one initial seed")
    names = scenario.call_names()
    preferred = set(inferred)
    seeds = []
    for j in range(count):
        calls = []
        if inferred:
            calls = insert_inferred(calls, inferred[j % len(inferred)], 0,
                                    scenario, rng, preferred)
        else:
            for _ in range(1 + rng.randrange(3)):
                name = rng.choice(names)
                calls = _insert(calls, len(calls),
                                _new_call(name, len(calls), calls, scenario,
                                          rng))
        seeds.append(Input(tuple(calls[:max_calls])))
    return seeds


def select_seed(pool, phase, m, k, rng):
    """Pick the next seed to mutate

    Exploitation samples m seeds and picks uniformly among the k closest to
    the target.  Exploration picks proportionally to coverage and ignores
    distance.

    :raises: ExecutionError if the pool is empty
    """
    seeds = pool.global_queue
    if not seeds:
        raise ExecutionError("Seed pool is empty")
    if phase is Phase.EXPLORE:
        return seeds[rng.weighted_index([len(s.coverage) for s in seeds])]
    sample = rng.sample(len(seeds), min(m, len(seeds)))
    top = sorted(sample, key=lambda i: (seeds[i].distance, i))[:k]
    return seeds[top[rng.randrange(len(top))]]


def mutate(seed, inferred, weights, schedule, t, scenario, rng, config=None):
    """Derive one new input from a seed

    With probability ``utilization_probability(schedule, t)`` an inferred
    syscall is inserted; otherwise one generic mutation is applied.  A seed
    too long to take the inserted call and its producers loses its tail
    first, so the result never exceeds ``max_calls``.

    :param inferred: Inferred syscall names
    :type weights: SyscallWeights
    :rtype: Input
    """
    config = config or CampaignConfig()
    calls = list(seed.input.calls)
    if len(weights) and \
            rng.random() < scheduler.utilization_probability(schedule, t):
        name = weights.choose(rng)
        role = PRODUCER if scenario.produces(name) else CONSUMER
        sd, _ = scenario.resolve(name)
        room = config.max_calls - 1 - len(sd.resource_slots())
        del calls[max(room, 0):]
        idx = scheduler.insert_indices(rng, len(calls), role, config.bias_k)
        calls = insert_inferred(calls, name, idx, scenario, rng,
                                set(inferred))
    else:
        calls = generic_mutation(calls, scenario, rng,
                                 config.mutation_weights)
    return Input(tuple(calls[:config.max_calls]))


def insert_inferred(calls, name, idx, scenario, rng, preferred=()):
    """Insert a call at idx, adding producers in front of it when needed

    Producers are taken from ``preferred`` first.  A producer inserted here
    also becomes the resource of later calls whose matching argument was
    invalid.

    :rtype: list(Call)
    """
    sd, _ = scenario.resolve(name)
    for _, rtype in sd.resource_slots():
        if not _compatible(calls, idx, rtype, scenario):
            producer = _pick_producer(scenario, rtype, preferred, rng)
            calls = _insert(calls, idx,
                            _new_call(producer, idx, calls, scenario, rng))
            calls = _rebind(calls, idx, scenario)
            idx += 1
    calls = _insert(calls, idx, _new_call(name, idx, calls, scenario, rng))
    if sd.produces is not None:
        calls = _rebind(calls, idx, scenario)
    return calls


def generic_mutation(calls, scenario, rng, op_weights):
    """Apply one of argument mutation, random insertion, duplication and
    removal"""
    op = "insert"
    if calls:
        op = MUTATION_OPS[rng.weighted_index([op_weights[o]
                                              for o in MUTATION_OPS])]
    if op == "arg":
        slots = [(i, s) for i, c in enumerate(calls)
                 for s in _mutable_slots(c, scenario)]
        if slots:
            i, s = rng.choice(slots)
            args = list(calls[i].args)
            args[s] = _fresh_arg(calls, i, s, scenario, rng)
            return calls[:i] + [Call(calls[i].name, tuple(args))] + \
                calls[i + 1:]
        op = "insert"
    if op == "insert":
        idx = rng.randrange(len(calls) + 1)
        name = rng.choice(scenario.call_names())
        return _insert(calls, idx, _new_call(name, idx, calls, scenario, rng))
    i = rng.randrange(len(calls))
    if op == "duplicate":
        return _insert(calls, i + 1, calls[i])
    return remove_call(calls, i)


def remove_call(calls, i, replacement=INVALID):
    """Delete call i.  References to it become ``replacement``, an earlier
    reference or the invalid handle."""
    out = list(calls[:i])
    for c in calls[i + 1:]:
        out.append(Call(c.name, tuple(_unshift(a, i, replacement)
                                      for a in c.args)))
    return out


def admit(pool, seed, weights, dm):
    """Feed an executed seed back into the pools

    :return: The event for the phase switch
    :rtype: Event
    """
    new = seed.coverage - pool.covered
    if not new:
        return Event.NONE
    pool.covered |= new
    pool.global_queue.append(seed)
    event = Event.NEW_PATH
    if any(_item_block(x) in dm for x in new):
        event = Event.NEW_REACHABLE_PATH
    if seed.distance < seed.parent_distance:
        pool.shorter_queue.append(seed)
        scheduler.record_shorter_distance(weights, seed.input.names())
    return event


def minimize_poc(poc, executor, target=None):
    """Delete calls one at a time while the input still triggers

    A producer whose removal breaks the input is also tried with its
    consumers rebound to an earlier call that some call consumes from, latest
    first.  Passes repeat until one full pass deletes nothing, so no single
    call of the result can be removed.

    :param target: Target block, or None for any target of the executor
    :rtype: Input
    :raises: ExecutionError if the PoC does not trigger
    """
    def triggers(calls):
        res = executor.execute(Input(tuple(calls)))
        return target in res.hit_targets if target is not None else res.hit

    calls = list(poc.calls)
    if not triggers(calls):
        raise ExecutionError("PoC does not trigger the target")
    changed = True
    while changed:
        changed = False
        i = 0
        while i < len(calls):
            candidate = remove_call(calls, i)
            if not (candidate and triggers(candidate)):
                candidate = next((c for c in _rebound_removals(calls, i)
                                  if triggers(c)), None)
            if candidate:
                calls = candidate
                changed = True
            else:
                i += 1
    return Input(tuple(calls))


class Campaign:
    """One directed fuzzing campaign against a scenario

    :param scenario: Scenario that supplies the syscall table
    :type scenario: Scenario
    :param target: Block the campaign must cover
    :type target: TargetSite
    :param dm: Distance map for the target
    :type dm: DistanceMap
    :param inferred: Inferred syscalls (InferredSyscall or names)
    :param config: Campaign configuration
    :type config: CampaignConfig
    :param rng: Random stream; derived from ``config.rng_seed`` when None
    :type rng: RandomSource
    """
    def __init__(self, scenario, target, dm, inferred, config=None, rng=None):
        self.scenario = scenario
        self.target = target
        self.dm = dm
        self.config = (config or CampaignConfig()).validate()
        self.rng = rng or scheduler.RandomSource(self.config.rng_seed)
        self.inferred = []
        for i in inferred:
            name = getattr(i, "name", i)
            if name in scenario:
                self.inferred.append(name)
            else:
                logger.warning("Inferred syscall %s is not in scenario %s",
                               name, scenario.name)
        self.executor = SimExecutor(scenario)
        self.clock = scheduler.VirtualClock(self.config.exec_secs)

    def inject_executor(self, executor):
        self.executor = executor

    def inject_clock(self, clock):
        self.clock = clock

    def run(self):
        """Fuzz until the target is hit or the budget runs out

        :rtype: CampaignResult
        """
        cfg = self.config
        self.pool = SeedPool()
        self.weights = scheduler.SyscallWeights(self.inferred,
                                                cfg.count_per_occurrence)
        self.schedule = scheduler.UtilizationSchedule(cfg.p_max, cfg.p_min,
                                                      cfg.t_fuzz_secs)
        self.state = SwitchState(t_a=cfg.t_a_secs, t_b=cfg.t_b_secs)
        self.pending = collections.deque()
        self.executions = 0
        self.poc = None
        self.tte = None
        self.trace = []
        self.timeline = []
        self.split_at = Fraction(cfg.timeout) * TIME_SPLIT_EXPLORE \
            if cfg.mode == "time_split" else None
        self._sample_probabilities(self.clock.now())
        self._mark_phase(self.clock.now())

        pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
        try:
            self._fuzz(pool)
        finally:
            if pool is not None:
                pool.shutdown()
        return self._result()

    def _fuzz(self, pool):
        cfg = self.config
        seeds = build_initial_seeds(self.inferred, self.scenario, self.rng,
                                    cfg.initial_seeds, cfg.max_calls)
        if self._run_batch(seeds, math.inf, pool):
            return
        phase, locked = {
            "explore_only": (Phase.EXPLORE, True),
            "exploit_only": (Phase.EXPLOIT, True),
            "undirected": (Phase.EXPLORE, True),
            "time_split": (Phase.EXPLORE, True),
        }.get(cfg.mode, (Phase.EXPLOIT, False))
        self.state = scheduler.begin_exploitation(self.state,
                                                  self.clock.now(), phase,
                                                  locked)
        self._mark_phase(self.clock.now())

        while not self._expired():
            if self.pending:
                parent = self.pending.popleft()
            elif self.pool.global_queue:
                parent = select_seed(self.pool, self.state.phase,
                                     cfg.exploit_sample_m, cfg.exploit_top_k,
                                     self.rng)
            else:
                parent = Seed(Input(), frozenset(), frozenset())
            t = self.clock.now()
            children = [mutate(parent, self.inferred, self.weights,
                               self.schedule, t, self.scenario, self.rng, cfg)
                        for _ in range(cfg.burst_size)]
            if self._run_batch(children, parent.distance, pool):
                return

    def _run_batch(self, inputs, parent_distance, pool):
        """Execute inputs and admit the results in order

        :return: True once the target is hit
        """
        if pool is not None:
            results = pool.map(self._execute, inputs)
        else:
            results = map(self._execute, inputs)
        for inp in inputs:
            if self._expired():
                return False
            res = next(results)
            if self._process(inp, res, parent_distance):
                return True
        return False

    def _execute(self, inp):
        try:
            return self.executor.execute(inp)
        except GFuzzError:
            logger.error("Executor failed on input:\n%s", format_input(inp))
            raise
        except Exception as e:
            raise ExecutionError("Executor failed: {}".format(e)) from e

    def _process(self, inp, res, parent_distance):
        self.clock.tick()
        self.executions += 1
        now = self.clock.now()
        blocks = frozenset(res.covered)
        coverage = blocks if self.config.coverage == "block" \
            else frozenset(res.edges)
        seed = Seed(inp, coverage, blocks, seed_distance(self.dm, blocks),
                    parent_distance)
        event = admit(self.pool, seed, self.weights, self.dm)
        logger.debug("exec %d: %d calls, distance %s, %s", self.executions,
                     len(inp), seed.distance, event.value)
        if event is not Event.NONE:
            self._sample_probabilities(now)
        if self.target.block in res.hit_targets:
            self.poc = inp
            self.tte = float(now)
            logger.info("Hit %s after %d executions (%.1f s)", self.target,
                        self.executions, now)
            return True
        if self.state.phase is Phase.EXPLORE and event is not Event.NONE:
            self.pending.append(seed)
        before = self.state.phase
        self.state = scheduler.switch_step(self.state, event, now)
        if self.split_at is not None and now >= self.split_at \
                and self.state.phase is Phase.EXPLORE:
            self.state = scheduler.begin_exploitation(self.state, now,
                                                      Phase.EXPLOIT, True)
        if self.state.phase is not before:
            logger.info("Switched to %s at %.1f s", self.state.phase.value,
                        now)
            self._mark_phase(now)
        return False

    def _expired(self):
        return self.clock.now() >= self.config.timeout

    def _sample_probabilities(self, now):
        for name, p in self.weights.snapshot().items():
            self.trace.append((float(now), name, p))

    def _mark_phase(self, now):
        self.timeline.append((float(now), self.state.phase.value))

    def _result(self):
        hit = self.poc is not None
        return CampaignResult(hit=hit,
                              tte=self.tte if hit else self.config.timeout,
                              executions=self.executions, poc=self.poc,
                              probability_trace=self.trace,
                              phase_timeline=self.timeline,
                              mode=self.config.mode,
                              rng_seed=self.config.rng_seed,
                              inferred=list(self.inferred),
                              target=str(self.target))


def run_campaign(scenario, target, dm, inferred, executor=None, config=None,
                 rng=None):
    """Run one campaign.  See :class:`Campaign`.

    :rtype: CampaignResult
    """
    c = Campaign(scenario, target, dm, inferred, config, rng)
    if executor is not None:
        c.inject_executor(executor)
    return c.run()


def _item_block(item):
    return item[1] if isinstance(item, tuple) else item


def _produced(call, scenario):
    return scenario.produces(call.name)


def _compatible(calls, pos, rtype, scenario):
    return [j for j in range(pos)
            if _produced(calls[j], scenario) is not None
            and satisfies(_produced(calls[j], scenario), rtype)]


def _pick_producer(scenario, rtype, preferred, rng):
    cands = scenario.producers_of(rtype)
    favored = [c for c in cands if c in preferred]
    return rng.choice(favored or cands)


def _new_call(name, pos, calls, scenario, rng):
    sd, forced = scenario.resolve(name)
    args = []
    for i, spec in enumerate(sd.args):
        if spec.resource is not None:
            cands = _compatible(calls, pos, spec.resource, scenario)
            args.append(Ref(rng.choice(cands)) if cands else INVALID)
        elif forced is not None and i == sd.variant_slot:
            args.append(forced)
        else:
            args.append(rng.choice(spec.choices))
    return Call(name, tuple(args))


def _mutable_slots(call, scenario):
    sd, forced = scenario.resolve(call.name)
    return [i for i in range(len(sd.args))
            if not (forced is not None and i == sd.variant_slot)]


def _fresh_arg(calls, pos, slot, scenario, rng):
    sd, _ = scenario.resolve(calls[pos].name)
    spec = sd.args[slot]
    if spec.resource is None:
        return rng.choice(spec.choices)
    cands = [Ref(j) for j in _compatible(calls, pos, spec.resource, scenario)]
    return rng.choice(cands + [INVALID])


def _insert(calls, idx, call):
    out = list(calls[:idx]) + [call]
    for c in calls[idx:]:
        out.append(Call(c.name, tuple(_shift(a, idx) for a in c.args)))
    return out


def _rebind(calls, idx, scenario):
    """Point invalid resource arguments after idx at the producer at idx"""
    produced = _produced(calls[idx], scenario)
    out = list(calls)
    for j in range(idx + 1, len(calls)):
        sd, _ = scenario.resolve(calls[j].name)
        args = list(calls[j].args)
        changed = False
        for s, rtype in sd.resource_slots():
            if args[s] == INVALID and satisfies(produced, rtype):
                args[s] = Ref(idx)
                changed = True
        if changed:
            out[j] = Call(calls[j].name, tuple(args))
    return out


def _rebound_removals(calls, i):
    consumed = {a.index for c in calls for a in c.args
                if isinstance(a, Ref) and a.index >= 0}
    if i not in consumed:
        return
    for j in sorted((j for j in consumed if j < i), reverse=True):
        yield remove_call(calls, i, Ref(j))


def _shift(arg, idx):
    if isinstance(arg, Ref) and arg.index >= idx:
        return Ref(arg.index + 1)
    return arg


def _unshift(arg, i, replacement=INVALID):
    if isinstance(arg, Ref):
        if arg.index == i:
            return replacement
        if arg.index > i:
            return Ref(arg.index - 1)
    return arg
