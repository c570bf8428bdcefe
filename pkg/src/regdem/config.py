"""key = value configuration files: architecture profile, latency table, curve."""

from __future__ import annotations

import configparser
from importlib import resources
from pathlib import Path

from .isa import DEFAULT_CLASS_TABLE, ClassInfo, LatencyTable
from .occupancy import ArchProfile
from .predictor import DEFAULT_CURVE, OccupancyCurve

_SECTION = "settings"


def read_pairs(text):
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    parser.read_string(f"[{_SECTION}]\n" + text)
    return dict(parser[_SECTION])


def _text(path):
    return Path(path).read_text(encoding="utf-8")


def default_file(name):
    return resources.files("regdem").joinpath("data", name)


def parse_profile(text):
    """Architecture profile plus the optional ``curve.<x>`` entries."""
    pairs = read_pairs(text)
    curve_pts = {k[len("curve."):]: v for k, v in pairs.items() if k.startswith("curve.")}
    arch = ArchProfile.from_mapping({k: v for k, v in pairs.items() if not k.startswith("curve.")})
    curve = OccupancyCurve(curve_pts) if curve_pts else None
    return arch, curve


def load_profile(path=None):
    text = default_file("maxwell.profile").read_text() if path is None else _text(path)
    return parse_profile(text)


def parse_latency_table(text):
    pairs = read_pairs(text)
    classes = dict(DEFAULT_CLASS_TABLE)
    max_tp = int(pairs.pop("max_throughput", 128))
    fields = {}
    for key, value in pairs.items():
        klass, _, attr = key.rpartition(".")
        if klass not in classes or attr not in ("latency", "throughput"):
            raise ValueError(f"unknown latency-table key {key!r}")
        fields.setdefault(klass, {})[attr] = int(value)
    for klass, attrs in fields.items():
        old = classes[klass]
        info = ClassInfo(klass, attrs.get("throughput", old.throughput), attrs.get("latency", old.latency))
        if info.throughput <= 0 or info.latency < 0:
            raise ValueError(f"invalid values for class {klass}")
        classes[klass] = info
    return LatencyTable(classes, max_tp)


def load_latency_table(path=None):
    text = default_file("latency.table").read_text() if path is None else _text(path)
    return parse_latency_table(text)


def load_curve(path=None, fallback=DEFAULT_CURVE):
    """Curve file of ``<occupancy> = <relative time>`` lines."""
    if path is None:
        return fallback
    pairs = read_pairs(_text(path))
    return OccupancyCurve({k.removeprefix("curve."): v for k, v in pairs.items()})
