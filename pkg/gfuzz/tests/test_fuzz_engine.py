#!/bin/python

import math
import statistics
from collections import Counter

import pytest

import gfuzz
import mock_executor
from gfuzz.config import CampaignConfig
from gfuzz.distance import DistanceMap, TargetSite, reachable_set
from gfuzz.errors import ExecutionError
from gfuzz.fuzz_engine import Campaign, Seed, SeedPool, admit, \
    build_initial_seeds, generic_mutation, insert_inferred, minimize_poc, \
    mutate, plan_campaign, read_report, remove_call, run_campaign, \
    select_seed, write_report
from gfuzz.graph_model import BasicBlockId
from gfuzz.inputs import INVALID, Call, Input, Ref, format_input, \
    parse_input, read_poc
from gfuzz.scheduler import Event, Phase, RandomSource, SyscallWeights, \
    UtilizationSchedule
from gfuzz.sim_kernel import SimExecutor, brute_force_min_trigger, execute


def campaign(name, kb, repetition=0, **kwargs):
    sc = gfuzz.load_scenario(name)
    target = TargetSite(sc.default_target())
    cfg = CampaignConfig(rng_seed=repetition, **kwargs)
    dm, inferred = plan_campaign(sc, target, cfg, kb)
    return run_campaign(sc, target, dm, inferred, config=cfg)


def median_executions(name, kb, mode, reps=20, **kwargs):
    return statistics.median(
        campaign(name, kb, i, mode=mode, **kwargs).executions
        for i in range(reps))


def test_mock_campaign(mock_campaign):
    result = mock_campaign.run()
    assert(result.hit)
    assert(result.executions == 20)
    assert(result.tte == pytest.approx(2.0))
    assert(result.poc == mock_campaign.executor.inputs[19])
    assert(result.inferred == ["read", "pipe", "pipe2"])
    assert(result.phase_timeline[0] == (0.0, "initial"))
    assert(result.phase_timeline[1][1] == "exploit")


def test_campaign_times_out(pipefs, kb):
    target = TargetSite(pipefs.default_target())
    cfg = CampaignConfig(timeout_secs=5.0)
    dm, inferred = plan_campaign(pipefs, target, cfg, kb)
    result = run_campaign(pipefs, target, dm, inferred,
                          executor=mock_executor.Executor(), config=cfg)
    assert(not result.hit)
    assert(result.poc is None)
    assert(result.executions == 50)
    assert(result.tte == 5.0)


def test_executor_failure(pipefs, kb):
    target = TargetSite(pipefs.default_target())
    dm, inferred = plan_campaign(pipefs, target, CampaignConfig(), kb)
    with pytest.raises(ExecutionError) as e:
        run_campaign(pipefs, target, dm, inferred,
                     executor=mock_executor.BrokenExecutor())
    assert("executor crashed" in str(e.value))


def test_same_seed_same_campaign(kb):
    a = campaign("pipefs", kb, 5)
    b = campaign("pipefs", kb, 5)
    assert(a.executions == b.executions)
    assert(a.poc == b.poc)
    assert(a.probability_trace == b.probability_trace)


def test_workers_do_not_change_results(kb):
    for rep in range(3):
        a = campaign("ioctl_ladder", kb, rep, workers=1)
        b = campaign("ioctl_ladder", kb, rep, workers=4)
        assert(a.executions == b.executions)
        assert(a.poc == b.poc)


def test_poc_replays(kb):
    for name in ("pipefs", "error_fork", "statfs_decoy"):
        sc = gfuzz.load_scenario(name)
        for rep in range(3):
            result = campaign(name, kb, rep)
            assert(result.hit)
            assert(sc.default_target() in execute(sc, result.poc).hit_targets)


def test_pool_invariants(statfs_decoy, kb):
    target = TargetSite(statfs_decoy.default_target())
    cfg = CampaignConfig(rng_seed=2, timeout_secs=30.0)
    dm, inferred = plan_campaign(statfs_decoy, target, cfg, kb)
    c = Campaign(statfs_decoy, target, dm, inferred, cfg)
    c.run()
    # Every admitted seed added coverage, in admission order
    seen = set()
    for seed in c.pool.global_queue:
        assert(seed.coverage - seen)
        seen |= seed.coverage
        assert(execute(statfs_decoy, seed.input).covered == seed.blocks)
    assert(seen == c.pool.covered)
    occurrences = Counter()
    for seed in c.pool.shorter_queue:
        assert(seed.distance < seed.parent_distance)
        occurrences.update(n for n in seed.input.names()
                           if n in c.weights.freq)
    assert(sum(c.weights.freq.values()) == sum(occurrences.values()))


def test_probability_trace(statfs_decoy, kb):
    result = campaign("statfs_decoy", kb, 1)
    for t, name, p in result.probability_trace:
        assert(0 < p <= 1)
        assert(name in result.inferred)
    final = result.final_probabilities()
    assert(set(final) == set(result.inferred))
    assert(sum(final.values()) == pytest.approx(1.0))


def test_time_split_phases(pipefs, kb):
    target = TargetSite(pipefs.default_target())
    cfg = CampaignConfig(mode="time_split")
    dm, inferred = plan_campaign(pipefs, target, cfg, kb)
    result = run_campaign(pipefs, target, dm, inferred,
                          executor=mock_executor.Executor(), config=cfg)
    phases = [p for _, p in result.phase_timeline]
    assert(phases == ["initial", "explore", "exploit"])
    assert(result.phase_timeline[-1][0] == 500.0)


def test_phase_flips_land_on_exact_ticks(pipefs, kb):
    target = TargetSite(pipefs.default_target())
    cfg = CampaignConfig(timeout_secs=2000.0)
    dm, inferred = plan_campaign(pipefs, target, cfg, kb)
    executor = mock_executor.FlatExecutor(BasicBlockId("sys_uname", 0))
    result = run_campaign(pipefs, target, dm, inferred, executor=executor,
                          config=cfg)
    assert(not result.hit)
    assert(result.executions == 20000)
    # Exploitation starts after the eight initial seeds
    assert(result.phase_timeline == [(0.0, "initial"), (0.8, "exploit"),
                                     (300.8, "explore"), (900.8, "exploit"),
                                     (1200.8, "explore"),
                                     (1800.8, "exploit")])


def test_report_file(mock_campaign, tmp_path):
    result = mock_campaign.run()
    path = str(tmp_path / "report.json")
    write_report(result, path)
    doc = read_report(path)
    assert(doc["hit"])
    assert(doc["executions"] == 20)
    assert(doc["target"] == "pipe_read:2")
    assert(parse_input(doc["poc"]) == result.poc)
    assert("generated_at" in doc)


def test_build_initial_seeds(pipefs):
    rng = RandomSource(0)
    seeds = build_initial_seeds(["read", "pipe"], pipefs, rng, 8)
    assert(len(seeds) == 8)
    for j, s in enumerate(seeds):
        assert(["read", "pipe"][j % 2] in s.names())
    seeds = build_initial_seeds([], pipefs, rng, 4)
    assert(all(1 <= len(s) <= 3 for s in seeds))


def test_insert_inferred_adds_producer(pipefs):
    calls = insert_inferred([], "read", 0, pipefs, RandomSource(0),
                            {"pipe"})
    assert([c.name for c in calls] == ["pipe", "read"])
    assert(calls[1].args[0] == Ref(0))


def test_insert_producer_rebinds_invalid_handle(pipefs):
    calls = [Call("read", (INVALID, 4096))]
    calls = insert_inferred(calls, "pipe", 0, pipefs, RandomSource(0))
    assert(calls == [Call("pipe"), Call("read", (Ref(0), 4096))])


def test_insert_keeps_references(pipefs):
    calls = [Call("pipe"), Call("read", (Ref(0), 4096))]
    calls = insert_inferred(calls, "getpid", 0, pipefs, RandomSource(0))
    assert(calls[2] == Call("read", (Ref(1), 4096)))


def test_remove_call():
    calls = [Call("pipe"), Call("pipe2", (0,)), Call("read", (Ref(1), 4096)),
             Call("read", (Ref(0), 8))]
    assert(remove_call(calls, 1) == [Call("pipe"),
                                     Call("read", (INVALID, 4096)),
                                     Call("read", (Ref(0), 8))])
    assert(remove_call(calls, 1, Ref(0))[1] == Call("read", (Ref(0), 4096)))


def test_generic_mutation(pipefs):
    rng = RandomSource(4)
    weights = {"arg": 25, "insert": 25, "duplicate": 25, "remove": 25}
    assert(len(generic_mutation([], pipefs, rng, weights)) == 1)
    calls = [Call("pipe"), Call("read", (Ref(0), 4096))]
    for _ in range(200):
        out = generic_mutation(calls, pipefs, rng, weights)
        assert(abs(len(out) - len(calls)) <= 1)
        Input(tuple(out))
    only_remove = {"arg": 0, "insert": 0, "duplicate": 0, "remove": 1}
    assert(len(generic_mutation(calls, pipefs, rng, only_remove)) == 1)


def test_mutate(pipefs):
    rng = RandomSource(2)
    always = UtilizationSchedule(1.0, 1.0, 600)
    never = UtilizationSchedule(0.0, 0.0, 600)
    empty = Seed(Input(), frozenset(), frozenset())
    out = mutate(empty, ["read"], SyscallWeights(["read"]), always, 0,
                 pipefs, rng)
    assert(len(out) == 2)
    assert(out.names()[1] == "read")
    assert(out.calls[1].args[0] == Ref(0))

    parent = Seed(Input((Call("pipe"), Call("read", (Ref(0), 4096)))),
                  frozenset(), frozenset())
    cfg = CampaignConfig(mutation_weights={"arg": 0, "insert": 0,
                                           "duplicate": 0, "remove": 1})
    for _ in range(20):
        out = mutate(parent, ["read"], SyscallWeights(["read"]), never, 0,
                     pipefs, rng, cfg)
        assert(len(out) == 1)
    short = CampaignConfig(max_calls=2)
    out = mutate(parent, ["pipe"], SyscallWeights(["pipe"]), always, 0,
                 pipefs, rng, short)
    assert(len(out) == 2)


def test_mutate_full_seed_keeps_inserted_call(pipefs):
    rng = RandomSource(5)
    always = UtilizationSchedule(1.0, 1.0, 600)
    cfg = CampaignConfig()
    full = Seed(Input(tuple(Call("getpid") for _ in range(cfg.max_calls))),
                frozenset(), frozenset())
    for name in ("read", "pipe"):
        for _ in range(200):
            out = mutate(full, [name], SyscallWeights([name]), always, 0,
                         pipefs, rng, cfg)
            assert(len(out) <= cfg.max_calls)
            assert(name in out.names())
            if name == "read":
                # The producer inserted in front of read survives as well
                i = out.names().index("read")
                assert(out.calls[i].args[0] == Ref(i - 1))
                assert(pipefs.produces(out.names()[i - 1]) is not None)


def seed(name, coverage, distance):
    blocks = frozenset(coverage)
    return Seed(Input((Call(name),)), blocks, blocks, distance)


def test_select_seed():
    pool = SeedPool()
    b = [BasicBlockId("f", i) for i in range(4)]
    pool.global_queue = [seed("a", {b[0]}, 5), seed("b", b[:3], 1),
                         seed("c", set(), 3)]
    rng = RandomSource(0)
    for _ in range(50):
        assert(select_seed(pool, Phase.EXPLOIT, 3, 1, rng).distance == 1)
        assert(select_seed(pool, Phase.EXPLORE, 3, 1, rng).distance != 3)
    with pytest.raises(ExecutionError):
        select_seed(SeedPool(), Phase.EXPLOIT, 32, 8, rng)


def explore_picks(distances, draws=500):
    b = [BasicBlockId("f", i) for i in range(3)]
    pool = SeedPool()
    pool.global_queue = [seed("a", b[:1], distances[0]),
                         seed("b", b, distances[1]),
                         seed("c", b[:2], distances[2])]
    rng = RandomSource(9)
    return [select_seed(pool, Phase.EXPLORE, 3, 1, rng).input.names()[0]
            for _ in range(draws)]


def test_explore_ignores_distance():
    picks = explore_picks([5, 1, 3])
    assert(explore_picks([105, 101, 103]) == picks)
    assert(explore_picks([math.inf] * 3) == picks)
    assert(explore_picks([1, 5, 3]) == picks)


def test_explore_share_follows_coverage():
    pool = SeedPool()
    pool.global_queue = [
        seed("small", [BasicBlockId("f", i) for i in range(10)], 1),
        seed("large", [BasicBlockId("g", i) for i in range(30)], 9)]
    rng = RandomSource(3)
    large = sum(select_seed(pool, Phase.EXPLORE, 2, 1, rng).input.names() ==
                ["large"] for _ in range(10000))
    assert(0.73 <= large / 10000 <= 0.77)


def test_exploit_without_known_distances():
    pool = SeedPool()
    pool.global_queue = [seed(n, {BasicBlockId("f", i)}, math.inf)
                         for i, n in enumerate("abcd")]
    rng = RandomSource(4)
    picked = {select_seed(pool, Phase.EXPLOIT, 4, 4, rng).input.names()[0]
              for _ in range(200)}
    assert(picked == set("abcd"))
    # Equal distances fall back to admission order
    for _ in range(20):
        assert(select_seed(pool, Phase.EXPLOIT, 4, 1, rng).input.names() ==
               ["a"])


def test_admit():
    pool = SeedPool()
    weights = SyscallWeights(["pipe"])
    near, far = BasicBlockId("pipe_read", 0), BasicBlockId("sys_uname", 0)
    dm = DistanceMap({near: 2})
    first = Seed(Input((Call("pipe"),)), frozenset({near}),
                 frozenset({near}), 2)
    assert(admit(pool, first, weights, dm) is Event.NEW_REACHABLE_PATH)
    assert(pool.shorter_queue == [first])
    assert(weights.freq["pipe"] == 1)
    assert(admit(pool, first, weights, dm) is Event.NONE)
    other = Seed(Input((Call("pipe"),)), frozenset({far}), frozenset({far}))
    assert(admit(pool, other, weights, dm) is Event.NEW_PATH)
    assert(len(pool) == 2)
    assert(len(pool.shorter_queue) == 1)
    assert(math.isinf(other.distance))


def test_minimize_sample_poc(pipefs, sample_path):
    poc = read_poc(sample_path("sample.poc.txt"))
    minimized = minimize_poc(poc, SimExecutor(pipefs))
    assert(format_input(minimized) == "pipe()\nread(@0,0x1000)\n")
    assert(minimize_poc(minimized, SimExecutor(pipefs)) == minimized)


def test_minimize_single_call():
    sc = gfuzz.load_scenario("deep_chain")
    poc = parse_input("keyctl(7,4)\n")
    assert(minimize_poc(poc, SimExecutor(sc)) == poc)


def test_minimize_rebinds_producer(statfs_decoy):
    poc = parse_input("openat$ptmx()\nfstatfs(@0,32)\nsyz_open_pts()\n"
                      "fstatfs(@2,32)\nfstatfs(@2,32)\n")
    minimized = minimize_poc(poc, SimExecutor(statfs_decoy))
    assert(format_input(minimized) ==
           "openat$ptmx()\nfstatfs(@0,0x20)\nfstatfs(@0,0x20)\n"
           "fstatfs(@0,0x20)\n")


def test_minimize_needs_trigger(pipefs):
    with pytest.raises(ExecutionError):
        minimize_poc(parse_input("pipe()\n"), SimExecutor(pipefs))


@pytest.mark.parametrize("name", ["pipefs", "ioctl_ladder", "error_fork",
                                  "deep_chain", "statfs_decoy"])
def test_minimized_poc_is_shortest(kb, name):
    sc = gfuzz.load_scenario(name)
    shortest = len(brute_force_min_trigger(sc))
    for rep in range(5):
        result = campaign(name, kb, rep)
        assert(result.hit)
        minimized = minimize_poc(result.poc, SimExecutor(sc))
        assert(len(minimized) == shortest)
        assert(execute(sc, minimized).hit)


@pytest.mark.parametrize("name", ["pipefs", "ioctl_ladder"])
def test_directed_beats_undirected(kb, name):
    directed = median_executions(name, kb, "gfuzz")
    undirected = median_executions(name, kb, "undirected")
    assert(directed <= 0.5 * undirected)


def test_inference_and_switch_help_on_decoy(kb):
    medians = {m: median_executions("statfs_decoy", kb, m)
               for m in ("gfuzz", "no_infer", "explore_only", "exploit_only")}
    print(medians)
    for mode in ("no_infer", "explore_only", "exploit_only"):
        assert(medians["gfuzz"] <= medians[mode])


def test_useful_syscall_gets_most_weight(kb):
    wins = 0
    for rep in range(20):
        final = campaign("statfs_decoy", kb, rep).final_probabilities()
        others = [p for n, p in final.items() if n != "fstatfs"]
        wins += all(final["fstatfs"] > p for p in others)
    assert(wins >= 16)


def test_indirect_calls_matter(kb):
    sc = gfuzz.load_scenario("indirect_tty")
    target = TargetSite(sc.default_target())
    resolved = reachable_set(sc.program, target).functions
    unresolved = reachable_set(sc.program, target, indirect=False).functions
    assert(unresolved < resolved)
    assert("sys_ioctl" in resolved - unresolved)

    runs = {indirect: [campaign("indirect_tty", kb, rep, indirect=indirect,
                                timeout_secs=150.0) for rep in range(10)]
            for indirect in (True, False)}
    assert(sum(r.hit for r in runs[True]) >= 8)
    for r in runs[False]:
        assert(not r.hit)
        assert(r.inferred == [])
        assert(r.tte == 150.0)
