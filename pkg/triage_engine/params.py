#!/usr/bin/env python
# -*- coding:utf-8 -*-
import hashlib
import json
import logging
import os
from pathlib import Path

import triage_engine.logging_  # noqa
import triage_engine.settings as settings

log = logging.getLogger('triage_engine')

SEED_ENV_VAR = 'TRIAGE_ENGINE_SEED'
TRUE_STRINGS = ('1', 'true', 'yes', 'on')
FALSE_STRINGS = ('0', 'false', 'no', 'off')


def default_params() -> dict:
    return {k: getattr(settings, k) for k in dir(settings) if k.isupper()}


def parse_value(raw: str, default):
    """Parse a config string to the type of the default value."""
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in TRUE_STRINGS:
            return True
        if raw.lower() in FALSE_STRINGS:
            return False
        raise ValueError(f"Expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, list):
        items = [x.strip() for x in raw.strip('[]').split(',') if x.strip()]
        proto = default[0] if default else ''
        return [parse_value(x, proto) for x in items]
    if default is None:
        if raw.lower() in ('', 'none'):
            return None
        try:
            return int(raw)
        except ValueError:
            return raw
    return raw


def load_params_file(fpath: str or Path) -> dict:
    """load_params_file reads a flat key=value file, '#' starts a comment.
    Keys are case-insensitive and returned upper case with raw string values.

    :param fpath: path to the config file
    :type fpath: str or Path
    :return: raw key/value strings
    :rtype: dict
    """
    fpath = Path(fpath)
    if not fpath.exists():
        raise FileNotFoundError(f"Config file not found: {fpath}")
    out = {}
    with open(fpath, 'r') as f:
        for num, line in enumerate(f, start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ValueError(f"{fpath}:{num}: expected key=value, got {line!r}")
            k, v = line.split('=', 1)
            out[k.strip().upper().replace('-', '_')] = v.strip()
    log.debug(f"Loaded {len(out)} keys from {fpath}")
    return out


def write_params_file(fpath: str or Path, data: dict) -> None:
    with open(fpath, 'w') as f:
        for k in sorted(data):
            v = data[k]
            if isinstance(v, list):
                v = ','.join(str(x) for x in v)
            f.write(f"{k.lower()}={'none' if v is None else v}\n")
    log.info(f"Wrote {len(data)} params to {fpath}")


class ParamHandler(object):
    """Effective run parameters: settings defaults, then a config file,
    then the seed environment variable, then explicit overrides (CLI)."""

    def __init__(self, config_file: str or Path = None, overrides: dict = None):
        self.__dict__.update(default_params())
        self.CONFIG_FILE = str(config_file) if config_file else None
        if config_file is not None:
            self.update_from_strings(load_params_file(config_file))
        if self.SEED is None and os.environ.get(SEED_ENV_VAR):
            self.SEED = int(os.environ[SEED_ENV_VAR])
            log.debug(f"Seed {self.SEED} taken from {SEED_ENV_VAR}")
        if overrides:
            self.update(overrides)
        if self.SEED is None:
            self.SEED = 0
        self.validate()

    def update_from_strings(self, data: dict) -> None:
        defaults = default_params()
        for k, v in data.items():
            if k not in defaults:
                log.info(f"Unknown key {k}: skipping key...")
                continue
            self.__dict__[k] = parse_value(v, defaults[k])

    def update(self, data: dict) -> None:
        """Apply overrides, None values are ignored so unset CLI flags
        never clobber the config file."""
        defaults = default_params()
        for k, v in data.items():
            k = k.upper()
            if v is None:
                continue
            if k not in defaults:
                log.info(f"Unknown key {k}: skipping key...")
                continue
            self.__dict__[k] = v

    def validate(self) -> None:
        if self.SEGMENT_LEN < 1:
            raise ValueError(f"SEGMENT_LEN must be >= 1, got {self.SEGMENT_LEN}")
        if not 0 <= self.TAU <= 1:
            raise ValueError(f"TAU must lie in [0, 1], got {self.TAU}")
        if not 0 < self.TRIAGE_THRESHOLD <= 1:
            raise ValueError(f"TRIAGE_THRESHOLD must lie in (0, 1], got {self.TRIAGE_THRESHOLD}")
        if self.RATIO_SOURCE not in ('rank', 'lime'):
            raise ValueError(f"RATIO_SOURCE must be 'rank' or 'lime', got {self.RATIO_SOURCE}")
        if self.MEMORY_SEED not in ('episode', 'base'):
            raise ValueError(f"MEMORY_SEED must be 'episode' or 'base', got {self.MEMORY_SEED}")
        if self.CLASSIFIER not in ('memory', 'head'):
            raise ValueError(f"CLASSIFIER must be 'memory' or 'head', got {self.CLASSIFIER}")
        if self.QUERY_BLEND not in ('class', 'readout'):
            raise ValueError(f"QUERY_BLEND must be 'class' or 'readout', got {self.QUERY_BLEND}")

    def query_count(self, shot: int) -> int:
        return self.QUERY_1SHOT if shot == 1 else self.QUERY_5SHOT

    def reprJSON(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k.isupper() and k != 'CONFIG_FILE'}

    def config_hash(self) -> str:
        blob = json.dumps(self.reprJSON(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def display_logs(self) -> None:
        msg = f"""
##########################################
RUN PARAMETERS
CONFIG FILE:     {self.CONFIG_FILE}
SEED:            {self.SEED}
SEGMENT LEN:     {self.SEGMENT_LEN}
EMBED DIM:       {self.EMBED_DIM} (hidden {self.HIDDEN_DIM})
LEARNING RATE:   {self.LEARNING_RATE} (task {self.TASK_RATE})
TAU:             {self.TAU} (query blend {self.QUERY_BLEND})
CONFIG HASH:     {self.config_hash()}
##########################################"""
        log.info(msg)
