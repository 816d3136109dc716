#!/bin/python

"""gfuzz: directed greybox fuzzing of syscall sequences.

Usage:
  gfuzz analyze <graph> <target> [--out-dir=<dir>] [--no-indirect] [-v]
  gfuzz infer <graph> <target> [--kb=<file>] [--trace=<file>]
              [--syscall-numbers=<file>] [--poc=<file>] [--no-indirect]
              [--config=<file>] [-v]
  gfuzz fuzz <scenario> [<target>] [--out-dir=<dir>] [--kb=<file>]
             [--trace=<file>] [--syscall-numbers=<file>] [--no-indirect] [options]
             [-v]
  gfuzz bench [<scenarios>...] [--modes=<list>] [--targets=<list>]
              [--sweep=<list>] [--jobs=<n>] [--out-dir=<dir>] [--kb=<file>]
              [--no-indirect] [options] [-v]
  gfuzz minimize <scenario> <poc> [--target=<target>] [-v]
  gfuzz list
  gfuzz (-h | --help)

Targets are ``function:block`` or a ``file:line`` source location.  A graph
argument may also be a scenario file or the name of a bundled scenario.

Options:
  -h --help                 Show this screen.
  -v --verbose              Log debug output.
  --config=<file>           JSON config file [env: GFZ_CONFIG].
  --out-dir=<dir>           Directory for written artifacts [default: .].
  --kb=<file>               Knowledge base (bundled default when omitted).
  --trace=<file>            Stack trace of a known bug.
  --syscall-numbers=<file>  Syscall number table for stack traces.
  --poc=<file>              PoC used to report inference precision.
  --modes=<list>            Comma-separated modes to compare with the
                            undirected baseline
                            [default: gfuzz,no_infer,explore_only,exploit_only,func_dis].
  --targets=<list>          Comma-separated targets to benchmark instead of
                            every declared target of the scenarios.
  --sweep=<list>            Comma-separated t_a:t_b pairs; every mode but
                            the baseline runs once per pair.
  --jobs=<n>                Processes running repetitions [default: 1].
  --target=<target>         Target block the PoC must reach.
  --mode=<mode>             gfuzz, no_infer, explore_only, exploit_only,
                            func_dis, undirected or time_split.
  --reps=<n>                Repetitions per bench cell.
  --rng-seed=<n>            Base random seed.
  --timeout-secs=<s>        Campaign budget in virtual seconds.
  --exec-secs=<s>           Virtual seconds per execution.
  --p-max=<p>               Initial probability of using inferred syscalls.
  --p-min=<p>               Final probability of using inferred syscalls.
  --t-fuzz-secs=<s>         Decay period of that probability.
  --t-a-secs=<s>            Exploitation stall threshold.
  --t-b-secs=<s>            Exploration stall threshold.
  --bias-k=<k>              Endpoint weight ratio of biased insertion.
  --exploit-m=<m>           Seeds sampled per exploitation pick.
  --exploit-k=<k>           Closest seeds kept per exploitation pick.
  --workers=<n>             Executor threads per campaign.
  --coverage=<kind>         block or edge.
  --no-indirect             Ignore indirect call sites.
"""

import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from docopt import DocoptExit, docopt

from gfuzz import config as gconfig
from gfuzz import distance, fuzz_engine, inference, stats
from gfuzz.errors import ConfigError, GFuzzError, TargetError
from gfuzz.graph_model import load_program
from gfuzz.inputs import read_poc, write_poc
from gfuzz.sim_kernel import SimExecutor, list_scenarios, load_scenario, \
    scenario_path

logger = logging.getLogger(__name__)

LOG_FORMAT = "[%(asctime)s %(levelname)s] [%(name)s] %(message)s"

EXIT_OK = 0
EXIT_NOT_HIT = 1
EXIT_INPUT = 2

OVERRIDES = {
    "--mode": ("mode", str),
    "--reps": ("repetitions", int),
    "--rng-seed": ("rng_seed", int),
    "--timeout-secs": ("timeout_secs", float),
    "--exec-secs": ("exec_secs", float),
    "--p-max": ("p_max", float),
    "--p-min": ("p_min", float),
    "--t-fuzz-secs": ("t_fuzz_secs", float),
    "--t-a-secs": ("t_a_secs", float),
    "--t-b-secs": ("t_b_secs", float),
    "--bias-k": ("bias_k", int),
    "--exploit-m": ("exploit_sample_m", int),
    "--exploit-k": ("exploit_top_k", int),
    "--workers": ("workers", int),
    "--coverage": ("coverage", str),
}


def main(argv=None):
    """Entry point of the ``gfuzz`` console script

    :return: Process exit code
    :rtype: int
    """
    try:
        args = docopt(__doc__, argv=argv)
    except DocoptExit as e:
        print(e, file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(
        level=logging.DEBUG if args["--verbose"] else logging.WARNING,
        format=LOG_FORMAT)
    try:
        if args["analyze"]:
            return cmd_analyze(args)
        if args["infer"]:
            return cmd_infer(args)
        if args["fuzz"]:
            return cmd_fuzz(args)
        if args["bench"]:
            return cmd_bench(args)
        if args["minimize"]:
            return cmd_minimize(args)
        return cmd_list(args)
    except (GFuzzError, OSError, ValueError) as e:
        print("gfuzz: error: {}".format(e), file=sys.stderr)
        return EXIT_INPUT


def config_from_args(args):
    """Effective configuration: defaults < config file < flags"""
    overrides = {}
    for flag, (key, typ) in OVERRIDES.items():
        if args.get(flag) is not None:
            overrides[key] = typ(args[flag])
    if args.get("--no-indirect"):
        overrides["indirect"] = False
    return gconfig.resolve_config(args.get("--config"), overrides)


def load_graph(path):
    """Load a graph file, a scenario file or a bundled scenario by name

    :return: (program, scenario or None)
    """
    path = scenario_path(path)
    with open(path, "r") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError:
            doc = None
    if isinstance(doc, dict) and "graph" in doc:
        sc = load_scenario(path)
        return sc.program, sc
    return load_program(path), None


def cmd_analyze(args):
    program, _ = load_graph(args["<graph>"])
    target = distance.resolve_target(program, args["<target>"])
    rs, icfg, dm = distance.analyze(program, target,
                                    not args["--no-indirect"])
    fn_ratio, block_ratio = distance.reachable_ratio(program, rs)
    out_dir = _out_dir(args)
    dm_path = os.path.join(out_dir, "distance.map")
    distance.write_distance_map(dm, dm_path)
    report = {
        "target": str(target),
        "reachable_functions": sorted(rs.functions),
        "entry_syscalls": rs.entry_syscalls,
        "reachable_function_ratio": fn_ratio,
        "reachable_block_ratio": block_ratio,
        "inter_cfg_nodes": icfg.graph.number_of_nodes(),
        "call_edges": icfg.call_edges,
        "blocks_visited": dm.visited,
        "total_blocks": program.total_blocks(),
    }
    with open(os.path.join(out_dir, "reachable.json"), "w") as f:
        json.dump(report, f, indent=2)
    print("target {}: {} of {} functions reachable ({:.1%}), {} blocks "
          "mapped ({:.1%} of blocks)".format(
              target, len(rs.functions), len(program.functions), fn_ratio,
              len(dm), block_ratio))
    print("distance map written to {}".format(dm_path))
    return EXIT_OK


def cmd_infer(args):
    cfg = config_from_args(args)
    program, sc = load_graph(args["<graph>"])
    target = distance.resolve_target(program, args["<target>"])
    rs, icfg, dm = distance.analyze(program, target, cfg.indirect)
    kb = inference.load_knowledge_base(args["--kb"])
    trace = inference.load_stack_trace(args["--trace"]) \
        if args["--trace"] else None
    numbers = inference.load_syscall_numbers(args["--syscall-numbers"])
    inferred = inference.infer_all(
        program, target, dm, kb, trace,
        sc.variant_table() if sc is not None else None, numbers, rs=rs,
        icfg=icfg, dispatch_frames=tuple(cfg.dispatch_frames),
        dispatch_arg=cfg.dispatch_arg)
    if not inferred:
        print("no syscalls inferred; the campaign runs undirected")
    for item in inferred:
        print("{:<40} {}".format(item.name, item.source_rule))
    if args["--poc"]:
        poc = read_poc(args["--poc"])
        p = inference.precision(inferred, poc.names())
        print("precision: {}".format("undefined" if p is None
                                     else "{:.0%}".format(p)))
    return EXIT_OK


def cmd_fuzz(args):
    cfg = config_from_args(args)
    sc = load_scenario(args["<scenario>"])
    target = _target(sc, args["<target>"])
    kb = inference.load_knowledge_base(args["--kb"])
    trace = inference.load_stack_trace(args["--trace"]) \
        if args["--trace"] else None
    numbers = inference.load_syscall_numbers(args["--syscall-numbers"])
    dm, inferred = fuzz_engine.plan_campaign(sc, target, cfg, kb, trace,
                                             numbers)
    result = fuzz_engine.run_campaign(sc, target, dm, inferred, config=cfg)
    out_dir = _out_dir(args)
    fuzz_engine.write_report(result, os.path.join(out_dir, "report.json"))
    if not result.hit:
        print("target {} not hit after {} executions ({:.1f} s)".format(
            target, result.executions, result.tte))
        return EXIT_NOT_HIT
    poc_path = os.path.join(out_dir, "poc.txt")
    write_poc(result.poc, poc_path)
    print("target {} hit after {} executions ({:.1f} s), PoC written to "
          "{}".format(target, result.executions, result.tte, poc_path))
    return EXIT_OK


def cmd_bench(args):
    cfg = config_from_args(args)
    modes = [m.strip() for m in args["--modes"].split(",") if m.strip()]
    for m in modes:
        if m not in gconfig.MODES:
            raise GFuzzError("Unknown mode: {}".format(m))
    modes = [m for m in modes if m != "undirected"]
    sweep = _sweep(args["--sweep"])
    jobs = int(args["--jobs"])
    names = args["<scenarios>"] or list_scenarios()
    wanted = _split(args["--targets"])
    matched = set()
    rows = []
    for name in names:
        sc = load_scenario(name)
        for target in _bench_targets(sc, wanted, matched):
            baseline = _bench_sample(name, target,
                                     replace(cfg, mode="undirected"),
                                     args["--kb"], jobs)
            cells = [("undirected", baseline)]
            for mode in modes:
                for pair in sweep:
                    cell, label = replace(cfg, mode=mode), mode
                    if pair is not None:
                        cell = replace(cell, t_a_secs=pair[0],
                                       t_b_secs=pair[1])
                        label = "{}[t_a={:g},t_b={:g}]".format(mode, *pair)
                    cells.append((label, _bench_sample(
                        name, target, cell, args["--kb"], jobs)))
            for label, sample in cells:
                row = stats.compare(baseline, sample,
                                    two_sided=cfg.two_sided)
                row.update({"Target": "{}:{}".format(sc.name, target),
                            "Fuzzer": label})
                rows.append(row)
    for spec in wanted:
        if spec not in matched:
            raise GFuzzError("Target {} is in none of the benchmarked "
                             "scenarios".format(spec))
    df = stats.report_table(rows)
    csv_path = os.path.join(_out_dir(args), "bench.csv")
    df.to_csv(csv_path, index=False)
    print(stats.render_text(df))
    return EXIT_OK


def _bench_targets(sc, wanted, matched):
    """Targets of a scenario to benchmark: every declared one, or the
    requested ones it contains"""
    if not wanted:
        return [distance.TargetSite(b) for b in sc.targets]
    out = []
    for spec in wanted:
        try:
            target = distance.resolve_target(sc.program, spec)
        except TargetError:
            continue
        matched.add(spec)
        if target not in out:
            out.append(target)
    return out


def _bench_sample(name, target, cfg, kb_path, jobs):
    results = run_repetitions(name, str(target), cfg, kb_path, jobs)
    return stats.TteSample.from_results(results, cfg.timeout)


def _split(value):
    return [v.strip() for v in (value or "").split(",") if v.strip()]


def _sweep(value):
    """Parse ``t_a:t_b`` pairs; [None] runs the configured thresholds"""
    pairs = []
    for item in _split(value):
        t_a, _, t_b = item.partition(":")
        try:
            pairs.append((float(t_a), float(t_b)))
        except ValueError:
            raise ConfigError("Sweep entries are t_a:t_b pairs, got "
                              "{}".format(item))
    return pairs or [None]


def run_repetitions(scenario, target, cfg, kb_path=None, jobs=1):
    """Run ``cfg.repetitions`` campaigns with seeds rng_seed + i

    :rtype: list(CampaignResult)
    """
    jobs_args = [(scenario, target, replace(cfg, rng_seed=cfg.rng_seed + i),
                  kb_path) for i in range(cfg.repetitions)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_one_campaign, jobs_args))
    return [_one_campaign(a) for a in jobs_args]


def cmd_minimize(args):
    sc = load_scenario(args["<scenario>"])
    target = _target(sc, args["--target"]).block if args["--target"] \
        else None
    poc = read_poc(args["<poc>"])
    minimized = fuzz_engine.minimize_poc(poc, SimExecutor(sc), target)
    out = args["<poc>"] + ".min"
    write_poc(minimized, out)
    print("{} -> {} calls, written to {}".format(len(poc), len(minimized),
                                                  out))
    return EXIT_OK


def cmd_list(args):
    for name in list_scenarios():
        sc = load_scenario(name)
        print("{:<16} {}  {}".format(
            name, " ".join(str(t) for t in sc.targets), sc.description))
    return EXIT_OK


def _one_campaign(job):
    scenario, target, cfg, kb_path = job
    sc = load_scenario(scenario)
    site = distance.resolve_target(sc.program, target)
    kb = inference.load_knowledge_base(kb_path)
    dm, inferred = fuzz_engine.plan_campaign(sc, site, cfg, kb)
    return fuzz_engine.run_campaign(sc, site, dm, inferred, config=cfg)


def _target(sc, spec):
    if spec is None:
        return distance.TargetSite(sc.default_target())
    return distance.resolve_target(sc.program, spec)


def _out_dir(args):
    out = args.get("--out-dir") or "."
    os.makedirs(out, exist_ok=True)
    return out


if __name__ == "__main__":
    sys.exit(main())
