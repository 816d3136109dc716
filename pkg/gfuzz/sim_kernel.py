#!/bin/python

"""Deterministic toy kernel

A scenario is a graph interchange document plus a syscall table, guards on CFG
edges, target blocks, runtime bindings of indirect call sites and state-flag
effects.  Executing an input walks the handler CFG of every call and reports
the covered blocks.
"""

import itertools
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Optional, Tuple

import networkx as nx
import objectpath

from gfuzz.errors import ConfigError, ExecutionError, ParseError, \
    ValidationError
from gfuzz.graph_model import DIRECT, INDIRECT, BasicBlockId, call_graph, \
    parse_program
from gfuzz.inputs import INVALID, Call, Input, Ref

logger = logging.getLogger(__name__)

SCENARIO_DIR = os.path.join(os.path.dirname(__file__), "data", "scenarios")

MAX_DEPTH = 32
MAX_BLOCKS = 512
MAX_ALPHABET = 8

SCENARIO_KEYS = {"description", "graph", "syscalls", "guards", "targets",
                 "bindings", "effects"}
SYSCALL_KEYS = {"handler", "args", "produces", "variants", "variant_slot",
                "error_block"}
GUARD_KINDS = {"arg_eq", "resource_valid", "flag_set", "flag_unset", "all"}


def satisfies(produced, wanted):
    """True if a produced resource type can stand in for a wanted type

    Types are hierarchical: ``fd:pipe`` satisfies ``fd``.
    """
    return produced == wanted or produced.startswith(wanted + ":")


@dataclass(frozen=True)
class ArgSpec:
    resource: Optional[str] = None
    choices: Tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class SyscallDef:
    name: str
    handler: str
    args: Tuple[ArgSpec, ...] = ()
    produces: Optional[str] = None
    variants: Dict[str, int] = field(default_factory=dict)
    variant_slot: Optional[int] = None
    error_block: Optional[int] = None

    def resource_slots(self):
        return [(i, a.resource) for i, a in enumerate(self.args)
                if a.resource is not None]


@dataclass(frozen=True)
class ExecResult:
    covered: FrozenSet[BasicBlockId]
    hit_targets: FrozenSet[BasicBlockId]
    resource_log: Tuple[Tuple[int, str], ...] = ()
    edges: FrozenSet = frozenset()

    @property
    def hit(self):
        return bool(self.hit_targets)


class Scenario:
    """Declarative toy kernel

    :ivar program: The scenario's graph
    :ivar syscalls: Base syscall name to SyscallDef, in file order
    :ivar guards: (source block, destination block) to guard expression
    :ivar targets: Target blocks, in file order
    :ivar bindings: Indirect call-site block to the callee it runs
    :ivar effects: Block to (flags set, flags cleared) when covered
    """
    def __init__(self, name, program, syscalls, guards, targets,
                 bindings=None, effects=None, description=""):
        self.name = name
        self.program = program
        self.syscalls = syscalls
        self.guards = guards
        self.targets = tuple(targets)
        self.bindings = bindings or {}
        self.effects = effects or {}
        self.description = description
        self._calls = {}
        for sd in syscalls.values():
            self._calls[sd.name] = (sd, None)
            for variant, const in sd.variants.items():
                self._calls[variant] = (sd, const)

    def resolve(self, name):
        """Return the syscall definition and the forced constant of a call

        :raises: ExecutionError for an unknown name
        """
        try:
            return self._calls[name]
        except KeyError:
            raise ExecutionError("Unknown syscall: {}".format(name))

    def __contains__(self, name):
        return name in self._calls

    def call_names(self):
        """Every callable name, bases and variants, in file order"""
        return list(self._calls)

    def base_names(self):
        return list(self.syscalls)

    def produces(self, name):
        return self.resolve(name)[0].produces

    def producers_of(self, rtype):
        return [n for n, (sd, _) in self._calls.items()
                if sd.produces is not None and satisfies(sd.produces, rtype)]

    def variant_table(self):
        """Base name to {variant name: constant} for every base with variants"""
        return {sd.name: dict(sd.variants) for sd in self.syscalls.values()
                if sd.variants}

    def default_target(self):
        return self.targets[0]


class SimExecutor:
    """Executor backed by a scenario.  Safe to share between threads."""
    def __init__(self, scenario):
        self.scenario = scenario

    def execute(self, inp):
        return execute(self.scenario, inp)


def list_scenarios():
    """Names of the bundled scenarios"""
    return sorted(f[:-len(".json")] for f in os.listdir(SCENARIO_DIR)
                  if f.endswith(".json"))


def scenario_path(name_or_path):
    """Map a bundled scenario name to its file; paths are returned as is"""
    if os.path.exists(name_or_path):
        return name_or_path
    bundled = os.path.join(SCENARIO_DIR, name_or_path + ".json")
    if os.path.exists(bundled):
        return bundled
    return name_or_path


def load_scenario(path):
    """Load and validate a scenario file (or a bundled scenario by name)

    :rtype: Scenario
    :raises: ParseError, ValidationError
    """
    path = scenario_path(path)
    try:
        with open(path, "r") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError("{}: {}".format(path, e))
    name = os.path.splitext(os.path.basename(path))[0]
    return parse_scenario(doc, name)


def parse_scenario(doc, name="scenario"):
    if not isinstance(doc, dict):
        raise ParseError("Scenario must be a JSON object")
    unknown = set(doc) - SCENARIO_KEYS
    if unknown:
        raise ParseError("Unknown key(s) in scenario: {}".format(
            ", ".join(sorted(unknown))))
    for key in ("graph", "syscalls", "targets"):
        if key not in doc:
            raise ParseError("Scenario is missing '{}'".format(key))

    graph = dict(doc["graph"])
    syscall_map = dict(graph.get("syscall_map", {}))
    syscalls = {}
    for sname, sj in doc["syscalls"].items():
        sd = _parse_syscall(sname, sj)
        syscalls[sname] = sd
        for call_name in [sname] + list(sd.variants):
            mapped = syscall_map.setdefault(call_name, sd.handler)
            if mapped != sd.handler:
                raise ValidationError("Syscall {} maps to {} in the graph but "
                                      "to {} in the syscall table".format(
                                          call_name, mapped, sd.handler))
    graph["syscall_map"] = syscall_map
    program = parse_program(graph)

    for sd in syscalls.values():
        if sd.handler not in program.cfgs:
            raise ValidationError("Handler of {} is not a function: "
                                  "{}".format(sd.name, sd.handler))
        if sd.error_block is not None:
            program.block(sd.handler, sd.error_block)
        if sd.variants:
            slot = sd.variant_slot
            if slot is None or not 0 <= slot < len(sd.args) \
                    or sd.args[slot].resource is not None:
                raise ValidationError("Syscall {} has variants but no integer "
                                      "variant_slot".format(sd.name))
    produced = [sd.produces for sd in syscalls.values() if sd.produces]
    for sd in syscalls.values():
        for _, rtype in sd.resource_slots():
            if not any(satisfies(p, rtype) for p in produced):
                raise ValidationError("Resource {} consumed by {} is produced "
                                      "by no syscall".format(rtype, sd.name))

    guards = {}
    for key, g in doc.get("guards", {}).items():
        src, dst = _parse_edge(program, key)
        if dst not in program.cfgs[src.function].successors(src):
            raise ValidationError("Guard on unknown edge: {}".format(key))
        _check_guard(g, key)
        guards[(src, dst)] = g
    for cfg in program.cfgs.values():
        for b in cfg.blocks:
            free = [d for d in cfg.successors(b) if (b, d) not in guards]
            if len(free) > 1:
                raise ValidationError("Block {} has {} unguarded "
                                      "successors".format(b, len(free)))

    targets = [_parse_block(program, t) for t in doc["targets"]]
    if not targets:
        raise ValidationError("Scenario {} declares no target".format(name))

    bindings = {}
    for key, callee in doc.get("bindings", {}).items():
        block = _parse_block(program, key)
        sites = [s for s in program.call_sites_at(block)
                 if s.kind == INDIRECT]
        if not sites:
            raise ValidationError("Binding on a block without an indirect "
                                  "call site: {}".format(key))
        fn = program.function(callee)
        if fn.signature != sites[0].signature:
            raise ValidationError("Binding {} -> {} does not match signature "
                                  "{}".format(key, callee,
                                              sites[0].signature))
        bindings[block] = callee

    effects = {}
    for key, ej in doc.get("effects", {}).items():
        block = _parse_block(program, key)
        effects[block] = (frozenset(ej.get("set", [])),
                          frozenset(ej.get("clear", [])))

    # Flags some guard tests but no effect ever sets
    t = objectpath.Tree(doc)
    tested = set(_values(t.execute('$.guards..flag_set'))) \
        if guards else set()
    raised = set(_values(t.execute('$.effects..set'))) if effects else set()
    for flag in sorted(tested - raised):
        logger.warning("Scenario %s tests flag %s that is never set", name,
                       flag)

    return Scenario(name, program, syscalls, guards, targets, bindings,
                    effects, doc.get("description", ""))


def execute(sc, inp):
    """Run an input against a scenario

    Calls run in order.  A call whose resource arguments do not resolve to a
    compatible resource produced by an earlier call covers its entry block and
    then continues at its error block; such a call produces nothing.

    :type sc: Scenario
    :type inp: Input
    :rtype: ExecResult
    :raises: ExecutionError for an unknown syscall or a malformed call
    """
    run = _Run(sc)
    for pos, call in enumerate(inp.calls):
        run.step(pos, call)
    covered = frozenset(run.covered)
    return ExecResult(covered=covered,
                      hit_targets=covered & frozenset(sc.targets),
                      resource_log=tuple(run.resource_log),
                      edges=frozenset(run.edges))


def brute_force_min_trigger(sc, target=None, max_len=4):
    """Shortest input that covers the target, by exhaustive search

    Sequences grow one call at a time over the base syscalls, in name order.
    Integer slots try every guard constant of the functions the syscall can
    reach plus one other choice; resource slots try the latest earlier
    producer of each compatible type plus the invalid handle.  Prefixes that
    leave the kernel in the same state (flags and resource store) behave
    identically from then on, so only the first of them is extended.

    :param target: Target block, or None for any scenario target
    :return: A shortest triggering input, or None
    :raises: ConfigError if the search is not tractable
    """
    alphabet = sorted(sc.base_names())
    if max_len > 6 or len(alphabet) > MAX_ALPHABET:
        raise ConfigError("Brute force needs max_len <= 6 and at most 8 "
                          "syscalls, got {} and {}".format(max_len,
                                                           len(alphabet)))
    wanted = {target} if target is not None else set(sc.targets)
    int_cands = {}
    for sd in sc.syscalls.values():
        consts = _guard_constants(sc, sd)
        for i, a in enumerate(sd.args):
            if a.resource is None:
                int_cands[(sd.name, i)] = _int_candidates(sd, i, a, consts)

    frontier = [((), _Run(sc))]
    seen = {frontier[0][1].key()}
    executions = 0
    for pos in range(max_len):
        nxt = []
        for calls, run in frontier:
            for name in alphabet:
                for args in _arg_candidates(sc, run, name, int_cands):
                    call = Call(name, args)
                    child = run.fork()
                    child.step(pos, call)
                    executions += 1
                    if child.covered & wanted:
                        logger.debug("Brute force hit after %d steps",
                                     executions)
                        return Input(calls + (call,))
                    key = child.key()
                    if key not in seen:
                        seen.add(key)
                        nxt.append((calls + (call,), child))
        frontier = nxt
    logger.debug("Brute force exhausted %d steps without a hit", executions)
    return None


class _Run:
    def __init__(self, sc):
        self.sc = sc
        self.program = sc.program
        self.covered = set()
        self.edges = set()
        self.flags = set()
        self.store = []
        self.resource_log = []

    def fork(self):
        """Copy the kernel state; coverage starts empty"""
        other = _Run(self.sc)
        other.flags = set(self.flags)
        other.store = list(self.store)
        return other

    def key(self):
        return frozenset(self.flags), tuple(self.store)

    def step(self, pos, call):
        sd, forced = self.sc.resolve(call.name)
        args = _call_args(sd, call, forced)
        ok = all(self.resource_ok(args[i], pos, rtype)
                 for i, rtype in sd.resource_slots())
        if ok:
            self.walk(sd.handler, args, 0, [MAX_BLOCKS])
        else:
            self.divert(sd, args)
        produced = sd.produces if ok else None
        self.store.append(produced)
        if produced is not None:
            self.resource_log.append((pos, produced))

    def resource_ok(self, arg, pos, rtype):
        if not isinstance(arg, Ref) or not 0 <= arg.index < pos:
            return False
        produced = self.store[arg.index]
        return produced is not None and satisfies(produced, rtype)

    def cover(self, block):
        self.covered.add(block)
        effect = self.sc.effects.get(block)
        if effect is not None:
            self.flags |= effect[0]
            self.flags -= effect[1]

    def divert(self, sd, args):
        entry = self.program.cfgs[sd.handler].entry
        self.cover(entry)
        if sd.error_block is None:
            return
        err = self.program.block(sd.handler, sd.error_block)
        self.edges.add((entry, err))
        self.walk(sd.handler, args, 0, [MAX_BLOCKS - 1], start=err)

    def walk(self, fn, args, depth, budget, start=None):
        if depth > MAX_DEPTH:
            return
        cfg = self.program.cfgs[fn]
        block = cfg.entry if start is None else start
        while block is not None and budget[0] > 0:
            budget[0] -= 1
            self.cover(block)
            for site in self.program.call_sites_at(block):
                callee = site.callee if site.kind == DIRECT \
                    else self.sc.bindings.get(block)
                if callee is not None:
                    self.edges.add((block, self.program.cfgs[callee].entry))
                    self.walk(callee, args, depth + 1, budget)
            nxt = self.next_block(cfg, block, args)
            if nxt is not None:
                self.edges.add((block, nxt))
            block = nxt

    def next_block(self, cfg, block, args):
        fallthrough = None
        for succ in cfg.successors(block):
            g = self.sc.guards.get((block, succ))
            if g is None:
                fallthrough = succ
            elif self.holds(g, args):
                return succ
        return fallthrough

    def holds(self, g, args):
        kind, val = next(iter(g.items()))
        if kind == "arg_eq":
            slot, const = val
            return slot < len(args) and not isinstance(args[slot], Ref) \
                and args[slot] == const
        if kind == "resource_valid":
            slot, rtype = (val, None) if isinstance(val, int) else val
            if slot >= len(args) or not isinstance(args[slot], Ref):
                return False
            ref = args[slot].index
            if not 0 <= ref < len(self.store) or self.store[ref] is None:
                return False
            return rtype is None or satisfies(self.store[ref], rtype)
        if kind == "flag_set":
            return val in self.flags
        if kind == "flag_unset":
            return val not in self.flags
        return all(self.holds(sub, args) for sub in val)


def _call_args(sd, call, forced):
    args = list(call.args)
    if len(args) != len(sd.args):
        raise ExecutionError("{} takes {} argument(s), got {}".format(
            call.name, len(sd.args), len(args)))
    for i, spec in enumerate(sd.args):
        if (spec.resource is not None) != isinstance(args[i], Ref):
            raise ExecutionError("Argument {} of {} has the wrong kind".format(
                i, call.name))
    if forced is not None:
        args[sd.variant_slot] = forced
    return args


def _parse_syscall(name, sj):
    if not isinstance(sj, dict):
        raise ParseError("Syscall {} must be an object".format(name))
    unknown = set(sj) - SYSCALL_KEYS
    if unknown:
        raise ParseError("Unknown key(s) in syscall {}: {}".format(
            name, ", ".join(sorted(unknown))))
    if "handler" not in sj:
        raise ParseError("Syscall {} has no handler".format(name))
    args = []
    for aj in sj.get("args", []):
        if "resource" in aj:
            args.append(ArgSpec(resource=aj["resource"]))
        elif "choices" in aj and aj["choices"]:
            args.append(ArgSpec(choices=tuple(aj["choices"])))
        else:
            raise ParseError("Argument of {} needs 'resource' or non-empty "
                             "'choices'".format(name))
    variants = dict(sj.get("variants", {}))
    for v in variants:
        if not v.startswith(name + "$"):
            raise ValidationError("Variant {} of {} must be written "
                                  "{}$NAME".format(v, name, name))
    return SyscallDef(name=name, handler=sj["handler"], args=tuple(args),
                      produces=sj.get("produces"), variants=variants,
                      variant_slot=sj.get("variant_slot"),
                      error_block=sj.get("error_block"))


def _parse_block(program, key):
    fn, _, index = key.rpartition(":")
    if not fn or not index.isdigit():
        raise ParseError("Bad block reference: {}".format(key))
    return program.block(fn, int(index))


def _parse_edge(program, key):
    """Parse ``function:src->dst``"""
    head, sep, dst = key.partition("->")
    if not sep or not dst.isdigit():
        raise ParseError("Bad edge reference: {}".format(key))
    src = _parse_block(program, head)
    return src, program.block(src.function, int(dst))


def _check_guard(g, where):
    if not isinstance(g, dict) or len(g) != 1:
        raise ParseError("Guard on {} must have exactly one kind".format(where))
    kind, val = next(iter(g.items()))
    if kind not in GUARD_KINDS:
        raise ParseError("Unknown guard kind on {}: {}".format(where, kind))
    if kind == "arg_eq":
        ok = isinstance(val, list) and len(val) == 2 \
            and isinstance(val[0], int)
    elif kind == "resource_valid":
        ok = isinstance(val, int) or (isinstance(val, list) and len(val) == 2
                                      and isinstance(val[0], int)
                                      and isinstance(val[1], str))
    elif kind in ("flag_set", "flag_unset"):
        ok = isinstance(val, str)
    else:
        ok = isinstance(val, list) and len(val) > 0
        if ok:
            for sub in val:
                _check_guard(sub, where)
    if not ok:
        raise ParseError("Malformed {} guard on {}".format(kind, where))


def _values(result):
    out = []
    for v in (result or []):
        out.extend(v if isinstance(v, list) else [v])
    return out


def _guard_constants(sc, sd):
    """Slot to the constants compared against it in reachable functions"""
    cg = call_graph(sc.program)
    reach = nx.descendants(cg, sd.handler) | {sd.handler}
    consts = {}

    def visit(g):
        kind, val = next(iter(g.items()))
        if kind == "arg_eq":
            consts.setdefault(val[0], set()).add(val[1])
        elif kind == "all":
            for sub in val:
                visit(sub)
    for (src, _), g in sc.guards.items():
        if src.function in reach:
            visit(g)
    return consts


def _int_candidates(sd, slot, spec, consts):
    wanted = set(consts.get(slot, ()))
    if slot == sd.variant_slot:
        wanted |= set(sd.variants.values())
    cands = sorted(c for c in wanted if c in spec.choices)
    others = [c for c in spec.choices if c not in wanted]
    return cands + others[:1]


def _arg_candidates(sc, run, name, int_cands):
    sd, _ = sc.resolve(name)
    slots = []
    for i, spec in enumerate(sd.args):
        if spec.resource is None:
            slots.append(int_cands[(sd.name, i)])
            continue
        latest = {}
        for j, produced in enumerate(run.store):
            if produced is not None and satisfies(produced, spec.resource):
                latest[produced] = j
        slots.append([Ref(j) for j in sorted(latest.values())] + [INVALID])
    return list(itertools.product(*slots))
