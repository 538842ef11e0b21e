"""Sectioned key=value configuration, strict about unknown keys."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


def _coerce(value, tp, key):
    if isinstance(value, str):
        text = value.strip()
        try:
            if tp is bool:
                low = text.lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(text)
            if tp is int:
                return int(text)
            if tp is float:
                return float(text)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r} as {tp.__name__}") from None
        if typing.get_origin(tp) is tuple or tp is tuple:
            return tuple(int(v) for v in text.replace(",", " ").split())
        return text
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def from_mapping(cls, mapping, section: str = ""):
    """Instantiate dataclass ``cls`` from a mapping; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        where = f"[{section}] " if section else ""
        raise ConfigError(f"{where}unknown config key(s): {', '.join(unknown)}")
    kwargs = {}
    for k, v in mapping.items():
        tp = hints[k]
        if typing.get_origin(tp) is typing.Union:
            tp = next(a for a in typing.get_args(tp) if a is not type(None))
        kwargs[k] = _coerce(v, tp, k)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section or cls.__name__}] {exc}") from exc


def read_sections(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    text = Path(path).read_text()
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    return {s: dict(parser[s]) for s in parser.sections()}


def to_dict(obj) -> dict:
    return dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else dict(obj)


def config_hash(*objs) -> str:
    payload = json.dumps([to_dict(o) for o in objs], sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def substream_seed(base_seed: int, *names) -> int:
    """Derive an independent 63-bit seed from a base seed and a path of names."""
    words = [int(base_seed)]
    for n in names:
        if isinstance(n, str):
            words.extend(hashlib.sha256(n.encode()).digest()[:4])
        else:
            words.append(int(n))
    ss = np.random.SeedSequence(words)
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
