#!/bin/python

import pytest

from gfuzz.errors import ParseError
from gfuzz.inputs import INVALID, Call, Input, Ref, format_input, \
    parse_input, read_poc, write_poc


def test_read_sample(sample_path):
    poc = read_poc(sample_path("sample.poc.txt"))
    assert(poc.names() == ["pipe", "getpid", "read"])
    assert(poc.calls[2] == Call("read", (Ref(0), 4096)))


def test_format():
    inp = Input((Call("pipe"), Call("read", (Ref(0), 4096)),
                 Call("read", (INVALID, 0))))
    assert(format_input(inp) == "pipe()\nread(@0,0x1000)\nread(@-1,0x0)\n")


def test_variant_names():
    inp = parse_input("openat$ptmx()\nioctl$TCSETS(@0,0x5402,0xbf)\n")
    assert(inp.names() == ["openat$ptmx", "ioctl$TCSETS"])
    assert(inp.calls[1].args == (Ref(0), 21506, 191))


def test_forward_reference():
    with pytest.raises(ParseError):
        parse_input("read(@1,0x10)\npipe()\n")
    with pytest.raises(ValueError):
        Input((Call("read", (Ref(0), 16)),))


def test_bad_lines():
    with pytest.raises(ParseError):
        parse_input("pipe\n")
    with pytest.raises(ParseError):
        parse_input("read(@x,16)\n")


def test_write_poc(tmp_path):
    inp = parse_input("pipe()\nread(@0,4096)\n")
    path = str(tmp_path / "poc.txt")
    write_poc(inp, path)
    with open(path) as f:
        assert(f.read() == "pipe()\nread(@0,0x1000)\n")
