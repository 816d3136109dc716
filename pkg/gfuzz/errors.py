#!/bin/python


class GFuzzError(RuntimeError):
    """Base class for every error raised by this package"""


class ParseError(GFuzzError):
    """A file could not be parsed under its schema"""


class ValidationError(GFuzzError):
    """A parsed document breaks an invariant.  The message names the entity."""


class TargetError(GFuzzError):
    """The requested target does not exist in the program"""


class ConfigError(GFuzzError):
    """Invalid configuration key or parameter value"""


class ExecutionError(GFuzzError):
    """The executor could not run an input"""
