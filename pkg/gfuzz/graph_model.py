#!/bin/python

"""Static program representation: call graph plus per-function CFGs.

The graph interchange file is a JSON document with the keys ``functions``,
``cfgs``, ``call_sites`` and ``syscall_map``.  See ``docs/formats.rst``.
"""

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import FrozenSet, Optional, Tuple

import networkx as nx
import objectpath

from gfuzz.errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

DIRECT = "direct"
INDIRECT = "indirect"

TOP_KEYS = {"functions", "cfgs", "call_sites", "syscall_map"}
FUNCTION_KEYS = {"name", "signature", "syscall_entry", "tags"}
CFG_KEYS = {"function", "entry", "blocks", "edges"}
BLOCK_KEYS = {"index", "source_loc", "constants", "tags"}
CALL_SITE_KEYS = {"caller_function", "caller_block", "kind", "callee",
                  "signature"}


@dataclass(frozen=True)
class FunctionId:
    """A function of the program.  Identity is the name alone."""
    name: str
    signature: str = field(default="", compare=False)
    syscall_entry: Optional[str] = field(default=None, compare=False)
    tags: FrozenSet[str] = field(default=frozenset(), compare=False)


@dataclass(frozen=True, order=True)
class BasicBlockId:
    """A basic block, addressed by (function name, index).

    ``source_loc``, ``constants`` and ``tags`` are metadata and take no part in
    equality, hashing or ordering.
    """
    function: str
    index: int
    source_loc: Optional[str] = field(default=None, compare=False)
    constants: Tuple = field(default=(), compare=False)
    tags: FrozenSet[str] = field(default=frozenset(), compare=False)

    def __str__(self):
        return "{}:{}".format(self.function, self.index)


@dataclass(frozen=True)
class CallSite:
    caller: BasicBlockId
    kind: str
    callee: Optional[str] = None
    signature: Optional[str] = None


@dataclass(frozen=True)
class Cfg:
    """Intra-procedural control-flow graph of one function

    ``edges`` keeps the order of the graph file; the simulated kernel tries
    guarded successors in that order.
    """
    function: str
    blocks: Tuple[BasicBlockId, ...]
    edges: Tuple[Tuple[BasicBlockId, BasicBlockId], ...]
    entry: BasicBlockId

    @cached_property
    def _successor_map(self):
        out = {b: [] for b in self.blocks}
        for src, dst in self.edges:
            out[src].append(dst)
        return out

    def successors(self, block):
        return list(self._successor_map.get(block, ()))

    def graph(self):
        g = nx.DiGraph()
        g.add_nodes_from(self.blocks)
        g.add_edges_from(self.edges)
        return g


class Program:
    """Validated, immutable view of a graph interchange document

    :param functions: Function name to FunctionId
    :type functions: dict
    :param cfgs: Function name to Cfg
    :type cfgs: dict
    :param call_sites: Every call site of the program
    :type call_sites: list(CallSite)
    :param syscall_map: Syscall or variant name to handler function name
    :type syscall_map: dict
    """
    def __init__(self, functions, cfgs, call_sites, syscall_map):
        self.functions = functions
        self.cfgs = cfgs
        self.call_sites = call_sites
        self.syscall_map = syscall_map
        self._sites_at = {}
        for site in call_sites:
            self._sites_at.setdefault(site.caller, []).append(site)
        self._by_signature = {}
        for f in sorted(functions):
            sig = functions[f].signature
            if sig:
                self._by_signature.setdefault(sig, []).append(f)
        self._by_loc = {}
        for cfg in cfgs.values():
            for b in cfg.blocks:
                if b.source_loc is not None:
                    self._by_loc.setdefault(b.source_loc, b)

    def function(self, name):
        try:
            return self.functions[name]
        except KeyError:
            raise ValidationError("Unknown function: {}".format(name))

    def block(self, function, index):
        """Return the block at (function, index)

        :raises: ValidationError if the function or block does not exist
        """
        cfg = self.cfgs.get(function)
        if cfg is None or not 0 <= index < len(cfg.blocks):
            raise ValidationError("Unknown block: {}:{}".format(function,
                                                                index))
        return cfg.blocks[index]

    def block_at(self, source_loc):
        """Return the first block tagged with a file:line source location

        :return: The block, or None when no block carries the location
        """
        return self._by_loc.get(source_loc)

    def call_sites_at(self, block):
        return self._sites_at.get(block, [])

    def signature_matches(self, signature):
        return list(self._by_signature.get(signature, []))

    def handlers(self):
        """Return syscall entry name to handler function for every handler"""
        return {f.syscall_entry: f.name for f in self.functions.values()
                if f.syscall_entry is not None}

    def total_blocks(self):
        return sum(len(cfg.blocks) for cfg in self.cfgs.values())


def site_callees(program, site, indirect=True):
    """Resolve the possible callees of a call site

    Indirect sites resolve to every function with the same signature key.

    :param indirect: When False indirect sites resolve to nothing
    :type indirect: bool
    :rtype: list(str)
    """
    if site.kind == DIRECT:
        return [site.callee]
    if not indirect:
        return []
    return program.signature_matches(site.signature)


def resolve_indirect(program, indirect=True):
    """Return the resolved call-graph edges as (caller, callee) name pairs

    Every signature match of an indirect call site becomes an edge
    (over-approximation).

    :param program: Validated program
    :type program: Program
    :param indirect: Include signature-matched edges
    :type indirect: bool
    :rtype: set(tuple(str, str))
    """
    edges = set()
    for site in program.call_sites:
        callees = site_callees(program, site, indirect)
        if site.kind == INDIRECT and indirect and not callees:
            logger.warning("Indirect call at %s with signature %r matches no "
                           "function", site.caller, site.signature)
        for callee in callees:
            edges.add((site.caller.function, callee))
    return edges


def call_graph(program, indirect=True):
    """Return the resolved call graph as a networkx DiGraph over names"""
    g = nx.DiGraph()
    g.add_nodes_from(program.functions)
    g.add_edges_from(resolve_indirect(program, indirect))
    return g


def load_program(path):
    """Load and validate a graph interchange file

    :param path: Path to the JSON file
    :type path: str
    :return: Validated program
    :rtype: Program
    :raises: ParseError if the file is malformed, ValidationError if it
        breaks an invariant
    """
    try:
        with open(path, "r") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError("{}: {}".format(path, e))
    return parse_program(doc)


def parse_program(doc):
    """Build a Program from an already decoded graph interchange document"""
    if not isinstance(doc, dict):
        raise ParseError("Graph document must be a JSON object")
    _reject_unknown(doc, TOP_KEYS, "graph")
    for key in ("functions", "cfgs"):
        if key not in doc:
            raise ParseError("Graph document is missing '{}'".format(key))

    functions = {}
    for fj in _as_list(doc["functions"], "functions"):
        _reject_unknown(fj, FUNCTION_KEYS, "function")
        name = _require(fj, "name", str, "function")
        if name in functions:
            raise ValidationError("Duplicate function: {}".format(name))
        functions[name] = FunctionId(name=name,
                                     signature=fj.get("signature", ""),
                                     syscall_entry=fj.get("syscall_entry"),
                                     tags=frozenset(fj.get("tags", [])))

    # Every function name referenced by a cfg or a call site must be declared
    t = objectpath.Tree(doc)
    for query in ('$..callee', '$..caller_function', '$.cfgs..function'):
        for ref in _names(t.execute(query)):
            if ref not in functions:
                raise ValidationError("Reference to unknown function: "
                                      "{}".format(ref))

    cfgs = {}
    for cj in _as_list(doc["cfgs"], "cfgs"):
        cfg = _parse_cfg(cj)
        if cfg.function in cfgs:
            raise ValidationError("Duplicate CFG for function: {}".format(
                cfg.function))
        cfgs[cfg.function] = cfg
    for name in functions:
        if name not in cfgs:
            raise ValidationError("Function without CFG: {}".format(name))

    program_sites = []
    for sj in _as_list(doc.get("call_sites", []), "call_sites"):
        program_sites.append(_parse_call_site(sj, cfgs))

    syscall_map = doc.get("syscall_map", {})
    if not isinstance(syscall_map, dict):
        raise ParseError("'syscall_map' must be an object")
    for sc, fn in syscall_map.items():
        if fn not in functions:
            raise ValidationError("Syscall {} maps to unknown function: "
                                  "{}".format(sc, fn))
    for f in functions.values():
        if f.syscall_entry is not None and f.syscall_entry not in syscall_map:
            raise ValidationError("Syscall entry {} of {} is not in the "
                                  "syscall map".format(f.syscall_entry,
                                                       f.name))

    for cfg in cfgs.values():
        _warn_unreachable(cfg)
    return Program(functions, cfgs, program_sites, dict(syscall_map))


def _parse_cfg(cj):
    _reject_unknown(cj, CFG_KEYS, "cfg")
    fn = _require(cj, "function", str, "cfg")
    blocks = {}
    for bj in _as_list(cj.get("blocks"), "blocks of " + fn):
        _reject_unknown(bj, BLOCK_KEYS, "block of " + fn)
        index = _require(bj, "index", int, "block of " + fn)
        if index in blocks:
            raise ValidationError("Duplicate block index: {}:{}".format(
                fn, index))
        blocks[index] = BasicBlockId(function=fn, index=index,
                                     source_loc=bj.get("source_loc"),
                                     constants=tuple(bj.get("constants", [])),
                                     tags=frozenset(bj.get("tags", [])))
    for index in blocks:
        if not 0 <= index < len(blocks):
            raise ValidationError("Block index out of range: {}:{}".format(
                fn, index))
    ordered = tuple(blocks[i] for i in range(len(blocks)))

    def lookup(index, what):
        if index not in blocks:
            raise ValidationError("{} references unknown block {}:{}".format(
                what, fn, index))
        return blocks[index]

    entry = lookup(_require(cj, "entry", int, "cfg " + fn), "Entry")
    edges = []
    for pair in _as_list(cj.get("edges", []), "edges of " + fn):
        if not isinstance(pair, list) or len(pair) != 2 or not all(
                isinstance(i, int) and not isinstance(i, bool) for i in pair):
            raise ParseError("Malformed edge in {}: {}".format(fn, pair))
        edges.append((lookup(pair[0], "Edge"), lookup(pair[1], "Edge")))
    return Cfg(function=fn, blocks=ordered, edges=tuple(edges), entry=entry)


def _parse_call_site(sj, cfgs):
    _reject_unknown(sj, CALL_SITE_KEYS, "call site")
    fn = _require(sj, "caller_function", str, "call site")
    index = _require(sj, "caller_block", int, "call site")
    blocks = cfgs[fn].blocks
    if not 0 <= index < len(blocks):
        raise ValidationError("Call site in unknown block: {}:{}".format(
            fn, index))
    kind = sj.get("kind")
    if kind == DIRECT:
        return CallSite(caller=blocks[index], kind=DIRECT,
                        callee=_require(sj, "callee", str, "call site"))
    elif kind == INDIRECT:
        sig = sj.get("signature")
        if not isinstance(sig, str) or not sig:
            raise ValidationError("Indirect call site {}:{} needs a "
                                  "signature".format(fn, index))
        return CallSite(caller=blocks[index], kind=INDIRECT, signature=sig)
    raise ParseError("Unknown call site kind at {}:{}: {}".format(fn, index,
                                                                 kind))


def _warn_unreachable(cfg):
    g = cfg.graph()
    seen = nx.descendants(g, cfg.entry) | {cfg.entry}
    for b in cfg.blocks:
        if b not in seen:
            logger.warning("Block %s is unreachable from its entry", b)


def _names(result):
    if result is None:
        return []
    if isinstance(result, str):
        return [result]
    return list(result)


def _as_list(value, what):
    if not isinstance(value, list):
        raise ParseError("'{}' must be an array".format(what))
    return value


def _reject_unknown(obj, allowed, what):
    if not isinstance(obj, dict):
        raise ParseError("{} entry must be an object".format(what))
    unknown = set(obj) - allowed
    if unknown:
        raise ParseError("Unknown key(s) in {}: {}".format(
            what, ", ".join(sorted(unknown))))


def _require(obj, key, typ, what):
    if key not in obj:
        raise ParseError("{} is missing '{}'".format(what, key))
    value = obj[key]
    if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
        raise ParseError("'{}' of {} has the wrong type".format(key, what))
    return value
