#!/bin/python

"""Campaign configuration

Precedence is built-in defaults, then a JSON config file (``--config`` or the
``GFZ_CONFIG`` environment variable), then command-line flags.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional

from gfuzz.errors import ConfigError

ENV_CONFIG = "GFZ_CONFIG"

MODES = ("gfuzz", "no_infer", "explore_only", "exploit_only", "func_dis",
         "undirected", "time_split")
COVERAGE_KINDS = ("block", "edge")
MUTATION_OPS = ("arg", "insert", "duplicate", "remove")


def _default_weights():
    return {"arg": 50, "insert": 20, "duplicate": 15, "remove": 15}


@dataclass(frozen=True)
class CampaignConfig:
    p_max: float = 0.9
    p_min: float = 0.1
    t_fuzz_secs: float = 600.0
    t_a_secs: float = 300.0
    t_b_secs: float = 600.0
    bias_k: int = 5
    exploit_sample_m: int = 32
    exploit_top_k: int = 8
    rng_seed: int = 0
    mode: str = "gfuzz"
    repetitions: int = 20
    timeout_secs: Optional[float] = None
    exec_secs: float = 0.1
    burst_size: int = 16
    initial_seeds: int = 8
    max_calls: int = 12
    coverage: str = "block"
    count_per_occurrence: bool = True
    mutation_weights: Dict[str, int] = field(default_factory=_default_weights)
    workers: int = 1
    indirect: bool = True
    two_sided: bool = False
    dispatch_frames: List[str] = field(
        default_factory=lambda: ["doSyscallInvoke", "doSyscallEnter"])
    dispatch_arg: int = 1

    @property
    def timeout(self):
        """Campaign budget in seconds; defaults to t_fuzz_secs"""
        return self.t_fuzz_secs if self.timeout_secs is None \
            else self.timeout_secs

    def validate(self):
        """Check every parameter invariant

        :return: self
        :raises: ConfigError naming the offending key
        """
        if not 0 <= self.p_min <= self.p_max <= 1:
            raise ConfigError("Need 0 <= p_min <= p_max <= 1")
        for key in ("t_fuzz_secs", "t_a_secs", "t_b_secs", "exec_secs"):
            if getattr(self, key) <= 0:
                raise ConfigError("{} must be positive".format(key))
        if self.timeout_secs is not None and self.timeout_secs <= 0:
            raise ConfigError("timeout_secs must be positive")
        if self.bias_k < 1:
            raise ConfigError("bias_k must be >= 1")
        if not self.exploit_sample_m >= self.exploit_top_k >= 1:
            raise ConfigError("Need exploit_sample_m >= exploit_top_k >= 1")
        if not 0 <= self.rng_seed < 2 ** 64:
            raise ConfigError("rng_seed must be a 64-bit unsigned integer")
        if self.mode not in MODES:
            raise ConfigError("Unknown mode: {}".format(self.mode))
        if self.coverage not in COVERAGE_KINDS:
            raise ConfigError("Unknown coverage kind: {}".format(
                self.coverage))
        for key in ("repetitions", "burst_size", "initial_seeds",
                    "max_calls", "workers"):
            if getattr(self, key) < 1:
                raise ConfigError("{} must be >= 1".format(key))
        if set(self.mutation_weights) != set(MUTATION_OPS) or \
                any(w < 0 for w in self.mutation_weights.values()) or \
                sum(self.mutation_weights.values()) <= 0:
            raise ConfigError("mutation_weights needs non-negative weights "
                              "for {}".format(", ".join(MUTATION_OPS)))
        if self.dispatch_arg < 0:
            raise ConfigError("dispatch_arg must be >= 0")
        return self

    def to_dict(self):
        return asdict(self)


def from_dict(doc, base=None):
    """Overlay a mapping of config keys onto base (or the defaults)

    :raises: ConfigError on an unknown key
    """
    base = base or CampaignConfig()
    known = {f.name for f in fields(CampaignConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError("Unknown config key(s): {}".format(
            ", ".join(sorted(unknown))))
    return replace(base, **doc)


def load_config(path):
    try:
        with open(path, "r") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError("{}: {}".format(path, e))
    if not isinstance(doc, dict):
        raise ConfigError("{}: config must be a JSON object".format(path))
    return doc


def resolve_config(path=None, overrides=None):
    """Build the effective configuration

    :param path: Config file; falls back to ``$GFZ_CONFIG`` when None
    :param overrides: Keys set on the command line; None values are ignored
    :rtype: CampaignConfig
    """
    cfg = CampaignConfig()
    path = path or os.environ.get(ENV_CONFIG)
    if path:
        cfg = from_dict(load_config(path), cfg)
    if overrides:
        cfg = from_dict({k: v for k, v in overrides.items()
                         if v is not None}, cfg)
    return cfg.validate()
