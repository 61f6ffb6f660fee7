"""Run configuration: one YAML file plus ``--set section.key=value`` overrides.

Validation errors name the file, line and key they refer to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from m2d import nets
from m2d.data import SplitPlan
from m2d.detector import RetrainConfig

METHODS = ("m2d", "m2d-no-retrain", "vanilla-ae", "msp", "odin")


class ConfigError(ValueError):
    pass


def _mark_lines(node, path=(), out=None) -> dict[tuple, int]:
    """Map every key path in a composed YAML tree to its 1-based line."""
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            _mark_lines(v, path + (key,), out)
            out[path + (key,)] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _mark_lines(v, path + (i,), out)
    return out


class _Source:
    def __init__(self, raw: dict, lines: dict[tuple, int], filename: str):
        self.raw = raw
        self.lines = lines
        self.filename = filename

    def where(self, path: tuple) -> str:
        key = ".".join(str(p) for p in path)
        for cut in range(len(path), -1, -1):
            if path[:cut] in self.lines:
                return f"{self.filename}:{self.lines[path[:cut]]}: {key}"
        return f"{self.filename}: {key}"

    def error(self, path: tuple, msg: str) -> ConfigError:
        return ConfigError(f"{self.where(path)}: {msg}")

    def get(self, path: tuple, default: Any = ..., kind: type | tuple | None = None):
        node: Any = self.raw
        for p in path:
            if not isinstance(node, dict) or p not in node:
                if default is ...:
                    raise self.error(path, "required key is missing")
                return default
            node = node[p]
        if kind is not None and node is not None:
            if kind is float and isinstance(node, int) and not isinstance(node, bool):
                node = float(node)
            if not isinstance(node, kind) or (isinstance(node, bool) and kind in (int, float)):
                name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
                raise self.error(path, f"expected {name}, got {node!r}")
        return node


@dataclass
class DatasetConfig:
    source: str
    options: dict
    ood: dict
    split: SplitPlan
    normalize: bool
    dir: str
    seed: int


@dataclass
class ModelConfig:
    spec: nets.ModelSpec
    epochs: int
    learning_rate: float
    batch_size: int
    seed: int


@dataclass
class DetectorConfig:
    retrain: RetrainConfig
    taps: list[str]
    ridge: float | None
    weights: dict[str, float] | None
    epsilon: float | None


@dataclass
class EvalConfig:
    methods: list[str]
    steps_grid: list[int]
    temperature: float
    odin_epsilon: float
    msp_temperature: float
    workers: int
    timing: bool


@dataclass
class RunConfig:
    seed: int
    dataset: DatasetConfig
    model: ModelConfig
    detector: DetectorConfig
    eval: EvalConfig
    base_dir: Path = field(default_factory=Path.cwd)

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


def parse_override(text: str) -> tuple[tuple[str, ...], Any]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    path = tuple(k for k in key.strip().split(".") if k)
    if not path:
        raise ConfigError(f"--set has an empty key: {text!r}")
    try:
        parsed = yaml.safe_load(value) if value.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"--set {key}: cannot parse value {value!r}: {exc}") from exc
    return path, parsed


def _apply_override(raw: dict, path: tuple, value) -> None:
    node = raw
    for p in path[:-1]:
        nxt = node.get(p)
        if not isinstance(nxt, dict):
            nxt = node[p] = {}
        node = nxt
    node[path[-1]] = value


def load_config(path, overrides=(), seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path), overrides, seed, base_dir=path.parent)


def parse_config(text: str, filename: str = "<config>", overrides=(), seed: int | None = None, base_dir=None) -> RunConfig:
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f"{mark.line + 1}" if mark else "?"
        raise ConfigError(f"{filename}:{line}: invalid YAML: {getattr(exc, 'problem', exc)}") from exc
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{filename}:1: top level must be a mapping")
    lines = _mark_lines(node) if node is not None else {}
    for text_override in overrides:
        opath, value = parse_override(text_override)
        _apply_override(raw, opath, value)
        lines[opath] = lines.get(opath, 0) or 0
    if seed is not None:
        raw["seed"] = seed
    src = _Source(raw, {k: v for k, v in lines.items() if v}, filename)
    cfg = _build(src)
    cfg.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    return cfg


def _positive(src: _Source, path: tuple, value, allow_zero: bool = False):
    if value is None:
        return value
    if value < 0 or (value == 0 and not allow_zero):
        raise src.error(path, f"must be {'>= 0' if allow_zero else '> 0'}, got {value}")
    return value


def _build(src: _Source) -> RunConfig:
    seed = src.get(("seed",), kind=int)

    # dataset
    ds = ("dataset",)
    source = src.get(ds + ("source",), "blobs", str)
    if source not in ("blobs", "idx", "csv", "digits"):
        raise src.error(ds + ("source",), f"unknown source {source!r} (blobs, idx, csv, digits)")
    options = src.get(ds + (source,), {}, dict) or {}
    ood = src.get(ds + ("ood",), {}, dict) or {}
    sp = ds + ("split",)
    try:
        split = SplitPlan(
            src.get(sp + ("train",), 0.6, float),
            src.get(sp + ("fit",), 0.2, float),
            src.get(sp + ("test",), 0.2, float),
            src.get(sp + ("detector_subset",), 100, int),
        )
    except ValueError as exc:
        raise src.error(sp, str(exc)) from exc
    dataset = DatasetConfig(
        source,
        options,
        ood,
        split,
        src.get(ds + ("normalize",), True, bool),
        src.get(ds + ("dir",), "data", str),
        src.get(ds + ("seed",), seed, int),
    )

    # model
    md = ("model",)
    spec = _model_spec(src, md)
    model = ModelConfig(
        spec,
        _positive(src, md + ("epochs",), src.get(md + ("epochs",), 5, int), allow_zero=True),
        _positive(src, md + ("learning_rate",), src.get(md + ("learning_rate",), 0.1, float)),
        _positive(src, md + ("batch_size",), src.get(md + ("batch_size",), 32, int)),
        src.get(md + ("seed",), seed, int),
    )

    # detector
    dt = ("detector",)
    try:
        retrain = RetrainConfig(
            steps=src.get(dt + ("steps",), 10, int),
            learning_rate=src.get(dt + ("learning_rate",), 0.05, float),
            batch_size=src.get(dt + ("batch_size",), 64, int),
            sever_at=src.get(dt + ("sever_at",), max(1, len(spec.layers) - 1), int),
            seed=src.get(dt + ("seed",), seed, int),
            loss=src.get(dt + ("loss",), "mse", str),
        )
    except ValueError as exc:
        raise src.error(dt, str(exc)) from exc
    if not 1 <= retrain.sever_at < len(spec.layers):
        raise src.error(dt + ("sever_at",), f"must be in 1..{len(spec.layers) - 1}")
    taps = src.get(dt + ("taps",), [], list) or []
    for i, t in enumerate(taps):
        if t != nets.INPUT_TAP and t not in spec.tap_points:
            raise src.error(dt + ("taps", i), f"unknown tap {t!r}; model taps: {sorted(spec.tap_points)}")
        if t != nets.INPUT_TAP and spec.tap_points[t] > retrain.sever_at:
            raise src.error(dt + ("taps", i), f"tap {t!r} lies beyond sever_at={retrain.sever_at}")
    weights = src.get(dt + ("weights",), None, dict)
    if weights is not None and set(weights) != set(taps):
        raise src.error(dt + ("weights",), "weights must name exactly the configured taps")
    detector = DetectorConfig(
        retrain,
        list(taps),
        _positive(src, dt + ("ridge",), src.get(dt + ("ridge",), None, float), allow_zero=True),
        {k: float(v) for k, v in weights.items()} if weights else None,
        _positive(src, dt + ("epsilon",), src.get(dt + ("epsilon",), None, float)),
    )

    # eval
    ev = ("eval",)
    methods = src.get(ev + ("methods",), ["m2d", "msp", "odin"], list)
    for i, m in enumerate(methods):
        if m not in METHODS:
            raise src.error(ev + ("methods", i), f"unknown method {m!r} ({', '.join(METHODS)})")
    grid = src.get(ev + ("steps_grid",), [retrain.steps], list)
    for i, s in enumerate(grid):
        if not isinstance(s, int) or s < 1:
            raise src.error(ev + ("steps_grid", i), f"steps must be positive integers, got {s!r}")
    evalc = EvalConfig(
        list(methods),
        list(grid),
        _positive(src, ev + ("temperature",), src.get(ev + ("temperature",), 1000.0, float)),
        _positive(src, ev + ("odin_epsilon",), src.get(ev + ("odin_epsilon",), 0.001, float), allow_zero=True),
        _positive(src, ev + ("msp_temperature",), src.get(ev + ("msp_temperature",), 1.0, float)),
        _positive(src, ev + ("workers",), src.get(ev + ("workers",), 1, int)),
        src.get(ev + ("timing",), False, bool),
    )
    return RunConfig(seed, dataset, model, detector, evalc)


def _model_spec(src: _Source, md: tuple) -> nets.ModelSpec:
    dims = src.get(md + ("dims",), None, list)
    layers_raw = src.get(md + ("layers",), None, list)
    taps = src.get(md + ("taps",), None, dict)
    hidden = src.get(md + ("hidden",), "relu", str)
    if (dims is None) == (layers_raw is None):
        raise src.error(md, "give exactly one of 'dims' (dense stack) or 'layers'")
    try:
        if dims is not None:
            if len(dims) < 2 or not all(isinstance(d, int) and d > 0 for d in dims):
                raise src.error(md + ("dims",), "needs at least two positive integers")
            spec = nets.mlp(dims, hidden, taps)
        else:
            layers = []
            prev = None
            for i, entry in enumerate(layers_raw):
                layers.append(_layer(src, md + ("layers", i), entry, prev))
                prev = layers[-1].out_shape
            if taps is None:
                taps = {f"h{i}": i for i in range(1, len(layers))}
            spec = nets.ModelSpec(tuple(layers), dict(taps))
        spec.validate()
    except nets.SpecError as exc:
        raise src.error(md, str(exc)) from exc
    return spec


def _layer(src: _Source, path: tuple, entry, prev) -> nets.LayerSpec:
    if not isinstance(entry, dict) or "kind" not in entry:
        raise src.error(path, "layer must be a mapping with a 'kind'")
    kind = entry["kind"]
    shape_in = tuple(entry["in"]) if isinstance(entry.get("in"), list) else (
        (entry["in"],) if "in" in entry else prev
    )
    if shape_in is None:
        raise src.error(path, "first layer needs an explicit 'in'")
    act = entry.get("act", "relu")
    if kind == "dense":
        return nets.dense(shape_in[0], int(entry["out"]), act)
    if kind == "conv2d":
        return nets.conv2d(shape_in, int(entry["channels"]), int(entry["kernel"]), int(entry.get("stride", 1)), act)
    if kind == "flatten":
        return nets.flatten(shape_in)
    raise src.error(path + ("kind",), f"unknown layer kind {kind!r}")
