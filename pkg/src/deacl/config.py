"""Run configuration, deterministic seed derivation and hashing.

Every random draw in the pipeline comes from a named substream derived
from the master seed by hashing the stream name; wall-clock seeding is
never used.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np


def parse_fraction(value):
    """Accept floats or strings like '8/255'."""
    if isinstance(value, str):
        if "/" in value:
            num, den = value.split("/", 1)
            return float(num) / float(den)
        return float(value)
    return float(value)


def child_seed(master_seed, *parts):
    """Deterministic 64-bit seed for a named substream."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master_seed)).encode())
    for p in parts:
        h.update(b"/")
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little")


class SeedStreams:
    """Named, disjoint random substreams rooted at one master seed."""

    def __init__(self, master_seed):
        self.master_seed = int(master_seed)

    def rng(self, *name_parts):
        return np.random.default_rng(child_seed(self.master_seed, *name_parts))

    def view_rng_factory(self, stage, epoch):
        """Per-(epoch, sample position, view) substreams for make_views."""
        def factory(sample_pos, view):
            return self.rng(stage, "augment", epoch, sample_pos, view)
        return factory


def config_to_dict(cfg):
    if dataclasses.is_dataclass(cfg):
        out = {}
        for f in dataclasses.fields(cfg):
            out[f.name] = config_to_dict(getattr(cfg, f.name))
        return out
    if isinstance(cfg, dict):
        return {k: config_to_dict(v) for k, v in cfg.items()}
    if isinstance(cfg, (list, tuple)):
        return [config_to_dict(v) for v in cfg]
    if isinstance(cfg, (np.integer,)):
        return int(cfg)
    if isinstance(cfg, (np.floating,)):
        return float(cfg)
    return cfg


def config_hash(cfg):
    """Stable hash of a config dataclass or dict."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
