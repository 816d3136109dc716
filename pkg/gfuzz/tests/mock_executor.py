#!/bin/python

import json
import os

from gfuzz.graph_model import BasicBlockId
from gfuzz.sim_kernel import ExecResult


def _block(key):
    fn, _, index = key.rpartition(":")
    return BasicBlockId(fn, int(index))


class Executor:
    """A mocking executor that returns pre-canned coverage for each syscall

    Coverage comes from sample.coverage.json so campaign plumbing can be
    tested without the simulated kernel.

    :param hit_after: Execution count from which every input covers the
        target, or None to never hit
    :type hit_after: int
    """
    def __init__(self, hit_after=None):
        self.dir_path = os.path.dirname(os.path.realpath(__file__))
        with open(self.dir_path + "/sample.coverage.json", "r") as f:
            doc = json.load(f)
        self.targets = frozenset(_block(t) for t in doc["targets"])
        self.calls = {name: frozenset(_block(b) for b in blocks)
                      for name, blocks in doc["calls"].items()}
        self.hit = frozenset(_block(b) for b in doc["hit"])
        self.hit_after = hit_after
        self.inputs = []

    def execute(self, inp):
        """Return the union of the canned coverage of the input's calls

        :param inp: Input to run
        :type inp: gfuzz.Input
        :return: Canned execution result
        """
        self.inputs.append(inp)
        covered = set()
        for name in inp.names():
            covered |= self.calls.get(name, frozenset())
        if self.hit_after is not None and len(self.inputs) >= self.hit_after:
            covered |= self.hit
        covered = frozenset(covered)
        return ExecResult(covered=covered, hit_targets=covered & self.targets)


class BrokenExecutor:
    """Executor that fails on every input"""
    def execute(self, inp):
        raise ValueError("executor crashed")


class FlatExecutor:
    """Executor that covers the same block on every input and never hits

    :param block: The one block every execution covers
    :type block: BasicBlockId
    """
    def __init__(self, block):
        self.block = block
        self.inputs = []

    def execute(self, inp):
        self.inputs.append(inp)
        return ExecResult(covered=frozenset([self.block]),
                          hit_targets=frozenset())
