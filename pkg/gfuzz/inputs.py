#!/bin/python

"""Syscall-sequence inputs and the PoC text format

One call per line, ``name(arg,...)``.  Integer arguments are written in hex,
resource arguments as ``@<call-index>`` and the invalid handle as ``@-1``.
"""

import re
from dataclasses import dataclass
from typing import Tuple

from gfuzz.errors import ParseError

_CALL_RE = re.compile(r"^([\w$.:-]+)\((.*)\)$")


@dataclass(frozen=True)
class Ref:
    """Reference to the resource produced by an earlier call"""
    index: int

    def __str__(self):
        return "@{}".format(self.index)


INVALID = Ref(-1)


@dataclass(frozen=True)
class Call:
    name: str
    args: Tuple = ()

    def __str__(self):
        return "{}({})".format(self.name, ",".join(_fmt_arg(a)
                                                    for a in self.args))


@dataclass(frozen=True)
class Input:
    """An ordered list of calls.  Resource references only point backwards."""
    calls: Tuple[Call, ...] = ()

    def __post_init__(self):
        for pos, call in enumerate(self.calls):
            for a in call.args:
                if isinstance(a, Ref) and not -1 <= a.index < pos:
                    raise ValueError("Call {} ({}) references call {}".format(
                        pos, call.name, a.index))

    def __len__(self):
        return len(self.calls)

    def names(self):
        return [c.name for c in self.calls]


def format_input(inp):
    """Render an input in the PoC text format

    >>> format_input(Input((Call("pipe"), Call("read", (Ref(0), 4096)))))
    'pipe()\\nread(@0,0x1000)\\n'
    """
    return "".join(str(c) + "\n" for c in inp.calls)


def parse_input(text):
    """Parse the PoC text format.  Blank lines and ``#`` comments are skipped.

    :rtype: Input
    :raises: ParseError on a malformed line or a forward reference
    """
    calls = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        m = _CALL_RE.match(line)
        if m is None:
            raise ParseError("Line {}: not a call: {}".format(lineno, line))
        args = []
        body = m.group(2).strip()
        for tok in (body.split(",") if body else []):
            args.append(_parse_arg(tok.strip(), lineno))
        calls.append(Call(m.group(1), tuple(args)))
    try:
        return Input(tuple(calls))
    except ValueError as e:
        raise ParseError(str(e))


def read_poc(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_input(f.read())


def write_poc(inp, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_input(inp))


def _fmt_arg(a):
    if isinstance(a, Ref):
        return str(a)
    if isinstance(a, int):
        return hex(a) if a >= 0 else "-" + hex(-a)
    return str(a)


def _parse_arg(tok, lineno):
    try:
        if tok.startswith("@"):
            return Ref(int(tok[1:]))
        return int(tok, 0)
    except ValueError:
        raise ParseError("Line {}: bad argument {!r}".format(lineno, tok))
