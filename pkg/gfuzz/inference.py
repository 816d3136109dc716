#!/bin/python

"""Inference of the syscalls related to a target

Four rules are composed: the function call chain, constants selecting
specialized syscall variants, a data-driven knowledge base and the stack trace
of a known bug.
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import Tuple

import networkx as nx

from gfuzz.distance import build_inter_cfg, reachable_set
from gfuzz.errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")

CALL_CHAIN = "call_chain"
SPECIALIZED_VARIANT = "specialized_variant"
KNOWLEDGE_BASE = "knowledge_base"
STACK_TRACE = "stack_trace"
RULE_ORDER = (CALL_CHAIN, SPECIALIZED_VARIANT, KNOWLEDGE_BASE, STACK_TRACE)

PATH_PREFIX = "path_prefix"
FS_TAG = "fs_tag"
MARKER = "marker"
MARKERS = {"mem_error_handling", "perm_error_handling", "seccomp",
           "readiness"}

DISPATCH_FRAMES = ("doSyscallInvoke", "doSyscallEnter")


@dataclass(frozen=True)
class InferredSyscall:
    name: str
    source_rule: str


@dataclass(frozen=True)
class KbEntry:
    kind: str
    value: str
    syscalls: Tuple[str, ...]


@dataclass(frozen=True)
class KnowledgeBase:
    entries: Tuple[KbEntry, ...] = ()


@dataclass(frozen=True)
class Frame:
    function: str
    args: Tuple[int, ...] = ()


@dataclass(frozen=True)
class StackTrace:
    frames: Tuple[Frame, ...]


def load_knowledge_base(path=None):
    """Load a knowledge-base file, or the bundled default when path is None

    :rtype: KnowledgeBase
    :raises: ParseError, ValidationError
    """
    path = path or os.path.join(DATA_DIR, "default_kb.json")
    try:
        with open(path, "r") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError("{}: {}".format(path, e))
    return parse_knowledge_base(doc)


def parse_knowledge_base(doc):
    if not isinstance(doc, list):
        raise ParseError("Knowledge base must be a JSON array")
    entries = []
    for i, ej in enumerate(doc):
        pred = ej.get("predicate") if isinstance(ej, dict) else None
        if not isinstance(pred, dict) or "kind" not in pred \
                or "value" not in pred:
            raise ParseError("Knowledge base entry {} has no predicate".format(
                i))
        kind, value = pred["kind"], pred["value"]
        if kind not in (PATH_PREFIX, FS_TAG, MARKER):
            raise ValidationError("Unknown predicate kind in entry {}: "
                                  "{}".format(i, kind))
        if kind == MARKER and value not in MARKERS:
            raise ValidationError("Unknown marker in entry {}: {}".format(
                i, value))
        syscalls = ej.get("syscalls")
        if not isinstance(syscalls, list) or not syscalls:
            raise ValidationError("Knowledge base entry {} lists no "
                                  "syscalls".format(i))
        entries.append(KbEntry(kind, value, tuple(syscalls)))
    return KnowledgeBase(tuple(entries))


def load_stack_trace(path):
    """Read a stack trace, one ``function(arg0,arg1,...)`` frame per line

    Arguments are hexadecimal.  Go receivers such as ``(*Task).run`` are kept
    in the function name.

    :rtype: StackTrace
    """
    with open(path, "r") as f:
        return parse_stack_trace(f.read())


def parse_stack_trace(text):
    frames = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if not line.endswith(")") or "(" not in line:
            raise ParseError("Line {}: not a frame: {}".format(lineno, line))
        head, _, body = line[:-1].rpartition("(")
        try:
            args = tuple(int(a.strip(), 16) for a in body.split(",")
                         if a.strip())
        except ValueError:
            raise ParseError("Line {}: arguments must be hex: {}".format(
                lineno, body))
        frames.append(Frame(head.strip(), args))
    if not frames:
        raise ParseError("Stack trace is empty")
    return StackTrace(tuple(frames))


def load_syscall_numbers(path=None):
    """Syscall number to name.  Keys are decimal or ``0x`` hex strings.

    :rtype: dict(int, str)
    """
    path = path or os.path.join(DATA_DIR, "syscall_numbers.json")
    try:
        with open(path, "r") as f:
            doc = json.load(f)
        return {int(k, 0): v for k, v in doc.items()}
    except (json.JSONDecodeError, ValueError, AttributeError) as e:
        raise ParseError("{}: {}".format(path, e))


def infer_call_chain(program, rs):
    """Syscalls whose handlers are closest to the target on the call graph

    Every syscall at the minimal hop count is kept.

    :type rs: ReachableSet
    :rtype: set(InferredSyscall)
    """
    if not rs.entry_syscalls:
        return set()
    best = min(rs.entry_syscalls.values())
    return {InferredSyscall(s, CALL_CHAIN)
            for s, h in rs.entry_syscalls.items() if h == best}


def infer_variants(program, target, dm, base_syscalls, variants, icfg=None):
    """Variants whose fixed constant appears on the path to the target

    Constants are collected from blocks that have a finite distance and lie
    below the base syscall's handler entry in the inter-procedural CFG.

    :param base_syscalls: Base syscall names to look at
    :param variants: Base name to {variant name: constant}
    :type variants: dict
    :param icfg: Inter-procedural CFG of the target; built when None
    :rtype: set(InferredSyscall)
    """
    if not variants or not base_syscalls:
        return set()
    if icfg is None:
        icfg = build_inter_cfg(program, reachable_set(program, target))
    g = icfg.graph
    found = set()
    for base in sorted(base_syscalls):
        table = variants.get(base)
        if not table or base not in program.syscall_map:
            continue
        entry = program.cfgs[program.syscall_map[base]].entry
        if entry not in g:
            continue
        below = nx.descendants(g, entry) | {entry}
        constants = set()
        for b in below:
            if b in dm:
                constants.update(program.block(b.function, b.index).constants)
        for variant, const in table.items():
            if const in constants:
                found.add(InferredSyscall(variant, SPECIALIZED_VARIANT))
    return found


def infer_knowledge(kb, program, target):
    """Syscalls of every knowledge-base entry whose predicate matches the target

    :rtype: set(InferredSyscall)
    """
    block = program.block(target.block.function, target.block.index)
    fn = program.function(block.function)
    tags = block.tags | fn.tags
    found = set()
    for e in kb.entries:
        if e.kind == PATH_PREFIX:
            hit = fn.name.startswith(e.value) or (
                block.source_loc is not None
                and block.source_loc.startswith(e.value))
        else:
            hit = e.value in tags
        if hit:
            for s in e.syscalls:
                if s in program.syscall_map:
                    found.add(InferredSyscall(s, KNOWLEDGE_BASE))
                else:
                    logger.debug("Knowledge base names %s, not a syscall of "
                                 "this program", s)
    return found


def infer_stack_trace(program, trace, syscall_nr_table,
                      dispatch_frames=DISPATCH_FRAMES, dispatch_arg=1):
    """Syscalls named by a bug's stack trace

    A frame naming a syscall handler contributes its syscall.  A dispatch
    frame contributes the syscall whose number is its ``dispatch_arg``-th
    argument.

    :type trace: StackTrace
    :param syscall_nr_table: Syscall number to name
    :type syscall_nr_table: dict
    :rtype: set(InferredSyscall)
    """
    handlers = program.handlers()
    by_function = {fn: sc for sc, fn in handlers.items()}
    found = set()
    for frame in trace.frames:
        short = frame.function.rsplit(".", 1)[-1]
        if short in dispatch_frames or frame.function in dispatch_frames:
            if len(frame.args) <= dispatch_arg:
                logger.warning("Dispatch frame %s has no argument %d",
                               frame.function, dispatch_arg)
                continue
            nr = frame.args[dispatch_arg]
            name = syscall_nr_table.get(nr)
            if name is None:
                logger.warning("Unknown syscall number %#x in frame %s", nr,
                               frame.function)
            elif name not in program.syscall_map:
                logger.warning("Syscall %s from frame %s is not in the "
                               "program", name, frame.function)
            else:
                found.add(InferredSyscall(name, STACK_TRACE))
            continue
        fn = frame.function if frame.function in program.functions else short
        if fn in by_function:
            found.add(InferredSyscall(by_function[fn], STACK_TRACE))
        elif fn not in program.functions:
            logger.warning("Ignoring unknown frame %s", frame.function)
    return found


def infer_all(program, target, dm, kb, trace=None, variants=None,
              syscall_nr_table=None, rs=None, icfg=None,
              dispatch_frames=DISPATCH_FRAMES, dispatch_arg=1):
    """Compose every rule into one ordered, deduplicated list

    Results are ordered by rule, then by name.  A syscall found by several
    rules keeps the first rule.  Variants are looked up for every base syscall
    any other rule found.

    :rtype: list(InferredSyscall)
    """
    if rs is None:
        rs = reachable_set(program, target)
    chain = infer_call_chain(program, rs)
    knowledge = infer_knowledge(kb, program, target) if kb else set()
    traced = set()
    if trace is not None:
        if syscall_nr_table is None:
            syscall_nr_table = load_syscall_numbers()
        traced = infer_stack_trace(program, trace, syscall_nr_table,
                                   dispatch_frames, dispatch_arg)
    bases = {i.name.split("$", 1)[0] for i in chain | knowledge | traced}
    specialized = infer_variants(program, target, dm, bases, variants or {},
                                 icfg)
    by_rule = {CALL_CHAIN: chain, SPECIALIZED_VARIANT: specialized,
               KNOWLEDGE_BASE: knowledge, STACK_TRACE: traced}
    out = []
    seen = set()
    for rule in RULE_ORDER:
        for item in sorted(by_rule[rule], key=lambda i: i.name):
            if item.name not in seen:
                seen.add(item.name)
                out.append(item)
    return out


def precision(inferred, poc_syscalls):
    """Share of the inferred syscalls that appear in a minimized PoC

    :param poc_syscalls: Call names of the PoC, or None if it does not replay
    :return: The precision, or None when undefined
    :rtype: float
    """
    if poc_syscalls is None or not inferred:
        return None
    names = {i.name if isinstance(i, InferredSyscall) else i
             for i in inferred}
    return len(names & set(poc_syscalls)) / len(names)
