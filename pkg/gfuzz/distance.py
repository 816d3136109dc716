#!/bin/python

"""Reachability analysis and basic-block distance to a target

Only the functions that can reach the target's function on the call graph are
connected into a local inter-procedural CFG; distances are hop counts from a
reverse BFS over that graph.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet

import networkx as nx

from gfuzz.errors import ParseError, TargetError, ValidationError
from gfuzz.graph_model import BasicBlockId, call_graph, site_callees

logger = logging.getLogger(__name__)

FUNC_DISTANCE_FACTOR = 10


@dataclass(frozen=True)
class TargetSite:
    block: BasicBlockId

    def __str__(self):
        return str(self.block)


@dataclass(frozen=True)
class ReachableSet:
    """Functions with a call-graph path to the target's function

    :ivar hops: Minimal call-graph hop count of each member to the target
        function
    :ivar entry_syscalls: Syscall entry name of every member handler, paired
        with its hop count
    """
    target_function: str
    functions: FrozenSet[str]
    hops: Dict[str, int]
    entry_syscalls: Dict[str, int]
    indirect: bool = True


@dataclass
class InterCfg:
    """Local inter-procedural CFG: member CFGs joined by call edges"""
    graph: nx.DiGraph
    call_edges: int = 0

    @property
    def nodes(self):
        return set(self.graph.nodes)

    @property
    def edges(self):
        return set(self.graph.edges)


@dataclass
class DistanceMap:
    """Basic block to hop distance.  Blocks not in the map are unreachable."""
    entries: Dict[BasicBlockId, int]
    visited: int = field(default=0, compare=False)

    def get(self, block):
        return self.entries.get(block)

    def __contains__(self, block):
        return block in self.entries

    def __len__(self):
        return len(self.entries)


def resolve_target(program, spec):
    """Resolve a target given as ``function:index`` or a ``file:line`` tag

    :param program: Program the target lives in
    :type program: Program
    :param spec: Target specification
    :type spec: str
    :rtype: TargetSite
    :raises: TargetError when nothing matches

    >>> resolve_target(program, "pipe_read:3")
    TargetSite(block=BasicBlockId(function='pipe_read', index=3, ...))
    """
    fn, sep, index = spec.rpartition(":")
    if sep and fn in program.functions and index.isdigit():
        try:
            return TargetSite(program.block(fn, int(index)))
        except ValidationError as e:
            raise TargetError(str(e))
    block = program.block_at(spec)
    if block is None:
        raise TargetError("Unknown target: {}".format(spec))
    return TargetSite(block)


def reachable_set(program, target, indirect=True):
    """Collect the functions that can reach the target's function

    Callers are traversed bottom-up from the target function over the resolved
    call graph.

    :param indirect: Use signature-matched indirect edges
    :type indirect: bool
    :rtype: ReachableSet
    :raises: TargetError if the target block does not exist
    """
    _check_target(program, target)
    fn = target.block.function
    cg = call_graph(program, indirect)
    hops = nx.single_source_shortest_path_length(cg.reverse(copy=False), fn)
    entry_syscalls = {}
    for name, h in hops.items():
        sc = program.functions[name].syscall_entry
        if sc is not None:
            entry_syscalls[sc] = min(h, entry_syscalls.get(sc, h))
    logger.debug("Reachable set of %s: %d of %d functions", target,
                 len(hops), len(program.functions))
    return ReachableSet(target_function=fn, functions=frozenset(hops),
                        hops=dict(hops), entry_syscalls=entry_syscalls,
                        indirect=indirect)


def build_inter_cfg(program, rs):
    """Connect the CFGs of the reachable functions

    Only call-site to callee-entry edges are added, and only toward callees
    that are themselves in the reachable set.

    :rtype: InterCfg
    """
    g = nx.DiGraph()
    for fn in sorted(rs.functions):
        cfg = program.cfgs[fn]
        g.add_nodes_from(cfg.blocks)
        g.add_edges_from(cfg.edges)
    call_edges = 0
    for site in program.call_sites:
        if site.caller.function not in rs.functions:
            continue
        for callee in site_callees(program, site, rs.indirect):
            if callee in rs.functions:
                entry = program.cfgs[callee].entry
                if not g.has_edge(site.caller, entry):
                    call_edges += 1
                g.add_edge(site.caller, entry)
    return InterCfg(graph=g, call_edges=call_edges)


def bfs_distance(icfg, target):
    """Hop distance of every block that has a path to the target block

    :rtype: DistanceMap
    """
    if target.block not in icfg.graph:
        raise TargetError("Target {} is not in the inter-procedural "
                          "CFG".format(target))
    lengths = nx.single_source_shortest_path_length(
        icfg.graph.reverse(copy=False), target.block)
    return DistanceMap(entries=dict(lengths), visited=len(lengths))


def analyze(program, target, indirect=True):
    """Run reachability, inter-CFG construction and BFS in one go

    :return: The reachable set, the inter-procedural CFG and the distances
    :rtype: tuple(ReachableSet, InterCfg, DistanceMap)
    """
    rs = reachable_set(program, target, indirect)
    icfg = build_inter_cfg(program, rs)
    return rs, icfg, bfs_distance(icfg, target)


def function_level_distance(program, rs, factor=FUNC_DISTANCE_FACTOR):
    """Coarse distance: every block of a reachable function gets factor times
    the function's call-graph hop count to the target function"""
    entries = {}
    for fn in rs.functions:
        for b in program.cfgs[fn].blocks:
            entries[b] = factor * rs.hops[fn]
    return DistanceMap(entries=entries, visited=len(entries))


def seed_distance(dm, covered):
    """Shortest distance over the covered blocks, or ``math.inf``"""
    best = math.inf
    for b in covered:
        d = dm.entries.get(b)
        if d is not None and d < best:
            best = d
    return best


def reachable_ratio(program, rs):
    """Share of functions and of blocks that belong to the reachable set

    :return: (function ratio, block ratio), both in [0, 1]
    :rtype: tuple(float, float)
    """
    blocks = sum(len(program.cfgs[fn].blocks) for fn in rs.functions)
    return (len(rs.functions) / len(program.functions),
            blocks / program.total_blocks())


def write_distance_map(dm, path):
    """Write one ``function<TAB>block_index<TAB>distance`` record per line"""
    with open(path, "w", encoding="utf-8") as f:
        for b in sorted(dm.entries):
            f.write("{}\t{}\t{}\n".format(b.function, b.index, dm.entries[b]))


def read_distance_map(path):
    """Read a distance map file written by write_distance_map

    :rtype: DistanceMap
    :raises: ParseError on a malformed record
    """
    entries = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError("{}:{}: expected 3 fields".format(path,
                                                                  lineno))
            try:
                block = BasicBlockId(parts[0], int(parts[1]))
                entries[block] = int(parts[2])
            except ValueError:
                raise ParseError("{}:{}: malformed record".format(path,
                                                                 lineno))
    return DistanceMap(entries=entries, visited=len(entries))


def _check_target(program, target):
    b = target.block
    cfg = program.cfgs.get(b.function)
    if cfg is None or not 0 <= b.index < len(cfg.blocks):
        raise TargetError("Unknown target: {}".format(b))
