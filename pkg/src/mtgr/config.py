"""Flat TOML-style configuration with ``key=value`` overrides.

Every key maps to a field of :class:`GenConfig`, :class:`TrainConfig`,
:class:`HstuConfig` or one of the :data:`RUN_KEYS`; anything else is rejected.
"""

from __future__ import annotations

import dataclasses
import re
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .datagen import GenConfig
from .encoder import HstuConfig
from .trainer import TrainConfig


class ConfigParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None, source: str = "<config>"):
        self.line, self.column, self.source = line, column, source
        where = source if line is None else f"{source}:{line}:{column or 1}"
        super().__init__(f"{where}: {message}")


RUN_KEYS: Dict[str, Tuple[type, Any]] = {
    "data": (str, None),
    "eval_data": (str, None),
    "out_dir": (str, "runs/default"),
    "checkpoint": (str, None),
    "test_fraction": (float, 0.2),
    "cross_mode": (str, "keep"),
    "max_static": (int, 1000),
    "max_realtime": (int, 100),
    "dtype": (str, "float64"),
    "dedup_workers": (int, 4),
    "sample_index": (int, 0),
    "fixture": (str, None),
    "grad_check_len": (int, 12),
    "bench_static": (int, 1000),
    "bench_realtime": (int, 100),
    "bench_candidates": (int, 10),
}


def _field_types(cls) -> Dict[str, Tuple[Any, Any]]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name == "model":
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        out[f.name] = (f.type, default)
    return out


GEN_KEYS = _field_types(GenConfig)
TRAIN_KEYS = _field_types(TrainConfig)
MODEL_KEYS = _field_types(HstuConfig)
KNOWN_KEYS = {**RUN_KEYS, **GEN_KEYS, **TRAIN_KEYS, **MODEL_KEYS}

_LOC = re.compile(r"\(at line (\d+), column (\d+)\)")


def parse_flat_toml(text: str, source: str = "<config>") -> Dict[str, Any]:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        msg = str(exc)
        m = _LOC.search(msg)
        if m:
            raise ConfigParseError(_LOC.sub("", msg).strip(), int(m.group(1)), int(m.group(2)), source) from None
        raise ConfigParseError(msg, source=source) from None
    for key, value in doc.items():
        if isinstance(value, dict):
            line = _line_of(text, key)
            raise ConfigParseError(f"nested table {key!r} not allowed in a flat config", line, 1, source)
    return doc


def _line_of(text: str, key: str) -> Optional[int]:
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith(f"[{key}]") or s.startswith(f"{key}.") or s.split("=")[0].strip() == key:
            return i
    return None


def _check_type(key: str, value: Any, source: str, line: Optional[int]) -> Any:
    typ = KNOWN_KEYS[key][0]
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if "bool" in name:
        ok = isinstance(value, bool)
    elif "float" in name:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif "int" in name:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigParseError(f"{key}: expected {name}, got {type(value).__name__}", line, 1, source)
    return value


def validate(values: Mapping[str, Any], source: str = "<config>", text: str = "") -> Dict[str, Any]:
    out = {}
    for key, value in values.items():
        line = _line_of(text, key) if text else None
        if key not in KNOWN_KEYS:
            raise ConfigParseError(f"unknown key {key!r}", line, 1, source)
        out[key] = _check_type(key, value, source, line)
    return out


def parse_override(item: str) -> Tuple[str, Any]:
    if "=" not in item:
        raise ConfigParseError(f"override {item!r} is not key=value", source="<override>")
    key, raw = item.split("=", 1)
    key, raw = key.strip(), raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        values.update(validate(parse_flat_toml(text, path), path, text))
    for item in overrides:
        key, value = parse_override(item)
        values.update(validate({key: value}, "<override>"))
    return values


def _pick(values: Mapping[str, Any], keys: Mapping[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in values.items() if k in keys}


def gen_config(values: Mapping[str, Any]) -> GenConfig:
    return GenConfig(**_pick(values, GEN_KEYS))


def model_config(values: Mapping[str, Any]) -> HstuConfig:
    kw = {"n_layer": 2, "d_model": 32, "n_heads": 2}
    kw.update(_pick(values, MODEL_KEYS))
    return HstuConfig(**kw)


def train_config(values: Mapping[str, Any]) -> TrainConfig:
    return TrainConfig(model=model_config(values), **_pick(values, TRAIN_KEYS))


def run_value(values: Mapping[str, Any], key: str):
    return values.get(key, RUN_KEYS[key][1])
