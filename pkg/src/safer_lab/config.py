"""Experiment configuration: YAML loading and static validation.

Every diagnostic carries the dotted key path and, when it can be found,
the line of that key in the source file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .datagen import ConfigError, LabeledDataset, gaussian_blobs, misaligned_entities
from .rng import stream
from .unlearn import ALGORITHMS, DEFAULT_LR, AlgorithmConfig, TrainConfig

SCHEMA = "safer-lab/1"
OUTPUT_ENV = "SAFER_LAB_OUTPUT"

DATASET_KEYS = {
    "gaussian_blobs": {"K", "d", "n_per_class", "center_spread", "noise_sigma", "test_fraction", "seed"},
    "misaligned_entities": {"n_entities", "samples_per_entity", "K_attributes", "d", "noise_sigma", "test_fraction", "seed"},
}
TOP_KEYS = {"schema", "name", "dataset", "schedule", "model", "train", "algorithms", "repeats", "seed", "seeds", "output_dir", "metrics", "workers"}
MODEL_KEYS = {"hidden", "latent_dim", "encoder_hidden", "decoder_hidden", "activation"}
TRAIN_KEYS = {"epochs", "lr", "batch_size", "optimizer", "momentum"}
ALGO_KEYS = set(AlgorithmConfig.__dataclass_fields__)
METRIC_KEYS = {"dbi", "mia", "similarity", "margins", "margin_range", "margin_bins", "similarity_bins"}


@dataclass
class Diagnostic:
    path: str
    message: str
    line: int | None = None

    def __str__(self) -> str:
        where = f"line {self.line}: " if self.line else ""
        return f"{where}{self.path}: {self.message}"


class ConfigInvalid(Exception):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("\n".join(str(d) for d in diagnostics))


@dataclass
class MetricToggles:
    dbi: bool = True
    mia: bool = True
    similarity: bool = True
    margins: bool = True
    margin_range: tuple[float, float] = (-20.0, 20.0)
    margin_bins: int = 40
    similarity_bins: int = 40

    @property
    def margin_edges(self) -> np.ndarray:
        return np.linspace(self.margin_range[0], self.margin_range[1], self.margin_bins + 1)

    @property
    def similarity_edges(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.similarity_bins + 1)


@dataclass
class ExperimentConfig:
    name: str
    dataset: dict
    schedule: list[list[int]]
    train: TrainConfig
    algorithms: list[AlgorithmConfig]
    seeds: list[int]
    output_dir: str
    metrics: MetricToggles = field(default_factory=MetricToggles)
    workers: int = 1
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def class_aligned(self) -> bool:
        return self.dataset["kind"] == "gaussian_blobs"

    def build_dataset(self) -> LabeledDataset:
        return build_dataset(self.dataset)

    def resolved_output(self) -> Path:
        root = os.environ.get(OUTPUT_ENV)
        return Path(root) / self.name if root else Path(self.output_dir)


def build_dataset(spec: dict) -> LabeledDataset:
    params = {k: v for k, v in spec.items() if k != "kind"}
    if spec["kind"] == "gaussian_blobs":
        return gaussian_blobs(**params)
    return misaligned_entities(**params)


def _line_map(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based line, from the YAML node tree."""
    out: dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, path):
        if node is None:
            return
        if path:
            out.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = f"{path}.{k.value}" if path else str(k.value)
                out[key] = k.start_mark.line + 1
                walk(v, key)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, f"{path}[{i}]")

    walk(root, "")
    return out


class _Checker:
    def __init__(self, lines: dict[str, int]):
        self.lines = lines
        self.diags: list[Diagnostic] = []

    def error(self, path: str, message: str) -> None:
        line = self.lines.get(path)
        probe = path
        while line is None and ("." in probe or "[" in probe):
            probe = probe[: max(probe.rfind("."), probe.rfind("["))]
            line = self.lines.get(probe)
        self.diags.append(Diagnostic(path, message, line))

    def unknown(self, section: dict, allowed: set, prefix: str) -> None:
        for k in section:
            if k not in allowed:
                self.error(f"{prefix}.{k}" if prefix else str(k), "unknown key")

    def number(self, section: dict, key: str, prefix: str, default, *, integer=False, lo=None, hi=None, lo_open=False, hi_open=False):
        path = f"{prefix}.{key}" if prefix else key
        v = section.get(key, default)
        if v is None:
            self.error(path, "required")
            return default
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
            self.error(path, f"expected {'an integer' if integer else 'a number'}, got {v!r}")
            return default
        if lo is not None and (v <= lo if lo_open else v < lo):
            self.error(path, f"out of range: {v} must be {'>' if lo_open else '>='} {lo}")
        if hi is not None and (v >= hi if hi_open else v > hi):
            self.error(path, f"out of range: {v} must be {'<' if hi_open else '<='} {hi}")
        return v

    def flag(self, section: dict, key: str, prefix: str, default: bool) -> bool:
        v = section.get(key, default)
        if not isinstance(v, bool):
            self.error(f"{prefix}.{key}", f"expected true/false, got {v!r}")
            return default
        return v

    def widths(self, section: dict, key: str, prefix: str, default) -> tuple[int, ...]:
        v = section.get(key, default)
        if not isinstance(v, (list, tuple)) or not all(isinstance(w, int) and not isinstance(w, bool) and w > 0 for w in v):
            self.error(f"{prefix}.{key}", f"expected a list of positive integers, got {v!r}")
            return tuple(default)
        return tuple(v)


def _dataset(c: _Checker, raw) -> dict | None:
    if not isinstance(raw, dict):
        c.error("dataset", "required section")
        return None
    kind = raw.get("kind")
    if kind not in DATASET_KEYS:
        c.error("dataset.kind", f"expected one of {sorted(DATASET_KEYS)}, got {kind!r}")
        return None
    c.unknown(raw, DATASET_KEYS[kind] | {"kind"}, "dataset")
    out = {"kind": kind}
    p = "dataset"
    if kind == "gaussian_blobs":
        out["K"] = c.number(raw, "K", p, None, integer=True, lo=2)
        out["d"] = c.number(raw, "d", p, None, integer=True, lo=1)
        out["n_per_class"] = c.number(raw, "n_per_class", p, None, integer=True, lo=20)
        out["center_spread"] = c.number(raw, "center_spread", p, 8.0, lo=0, lo_open=True)
        out["noise_sigma"] = c.number(raw, "noise_sigma", p, 1.0, lo=0, lo_open=True)
    else:
        out["n_entities"] = c.number(raw, "n_entities", p, None, integer=True, lo=40)
        out["samples_per_entity"] = c.number(raw, "samples_per_entity", p, None, integer=True, lo=1)
        out["K_attributes"] = c.number(raw, "K_attributes", p, None, integer=True, lo=2)
        out["d"] = c.number(raw, "d", p, None, integer=True, lo=1)
        out["noise_sigma"] = c.number(raw, "noise_sigma", p, 0.5, lo=0, lo_open=True)
        if isinstance(out["K_attributes"], int) and isinstance(out["n_entities"], int) and out["K_attributes"] > out["n_entities"]:
            c.error("dataset.K_attributes", f"K_attributes ({out['K_attributes']}) exceeds n_entities ({out['n_entities']})")
    out["test_fraction"] = c.number(raw, "test_fraction", p, 0.2, lo=0, hi=1, lo_open=True, hi_open=True)
    out["seed"] = c.number(raw, "seed", p, 0, integer=True, lo=0)
    return out


def _schedule(c: _Checker, raw, dataset: LabeledDataset | None) -> list[list[int]]:
    train_units = None
    if dataset is not None:
        train_units = set(int(u) for u in np.unique(dataset.entity_ids[dataset.train_idx]))
    if isinstance(raw, dict):
        c.unknown(raw, {"units_per_phase", "phases", "seed"}, "schedule")
        k = c.number(raw, "units_per_phase", "schedule", None, integer=True, lo=1)
        n = c.number(raw, "phases", "schedule", None, integer=True, lo=1)
        s = c.number(raw, "seed", "schedule", 0, integer=True, lo=0)
        if not all(isinstance(v, int) for v in (k, n, s)) or train_units is None:
            return []
        if k * n > len(train_units):
            c.error("schedule", f"needs {k * n} distinct units but the dataset has {len(train_units)}")
            return []
        picks = stream(s, "schedule").permutation(sorted(train_units))[: k * n]
        return [sorted(int(u) for u in picks[i * k : (i + 1) * k]) for i in range(n)]
    if not isinstance(raw, list) or not raw:
        c.error("schedule", "expected a non-empty list of per-phase unit lists")
        return []
    seen: dict[int, int] = {}
    out = []
    for t, units in enumerate(raw, start=1):
        path = f"schedule[{t - 1}]"
        if not isinstance(units, list) or not all(isinstance(u, int) and not isinstance(u, bool) for u in units):
            c.error(path, f"expected a list of integer unit ids, got {units!r}")
            continue
        for u in units:
            if train_units is not None and u not in train_units:
                c.error(path, f"unit {u} does not exist among the training rows")
            if u in seen:
                c.error(path, f"unit {u} repeated: forgotten in phase {seen[u]} and phase {t}")
            else:
                seen[u] = t
        out.append(list(units))
    return out


def _algorithm(c: _Checker, raw, i: int) -> AlgorithmConfig | None:
    p = f"algorithms[{i}]"
    if isinstance(raw, str):
        raw = {"name": raw}
    if not isinstance(raw, dict):
        c.error(p, "expected a mapping or an algorithm name")
        return None
    c.unknown(raw, ALGO_KEYS, p)
    name = raw.get("name")
    if name not in ALGORITHMS:
        c.error(f"{p}.name", f"expected one of {list(ALGORITHMS)}, got {name!r}")
        return None
    kw = {"name": name, "label": str(raw.get("label", name))}
    kw["epochs"] = c.number(raw, "epochs", p, 10, integer=True, lo=1)
    kw["lr"] = c.number(raw, "lr", p, DEFAULT_LR[name], lo=0)
    kw["batch_size"] = c.number(raw, "batch_size", p, 64, integer=True, lo=1)
    kw["lam"] = c.number(raw, "lam", p, 0.1, lo=0)
    kw["beta"] = c.number(raw, "beta", p, 1.0, lo=0)
    kw["momentum"] = c.number(raw, "momentum", p, 0.9, lo=0, hi=1, hi_open=True)
    kw["ema_decay"] = c.number(raw, "ema_decay", p, 0.99, lo=0, hi=1, lo_open=True, hi_open=True)
    for sw in ("um", "ic", "cd", "per_class_ema"):
        kw[sw] = c.flag(raw, sw, p, sw != "per_class_ema")
    opt = raw.get("optimizer", "momentum")
    if opt not in ("sgd", "momentum"):
        c.error(f"{p}.optimizer", f"expected sgd or momentum, got {opt!r}")
        opt = "momentum"
    kw["optimizer"] = opt
    try:
        return AlgorithmConfig(**kw)
    except (TypeError, ValueError):
        return None


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; raises :class:`ConfigInvalid` listing every problem."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigInvalid([Diagnostic("<file>", f"YAML syntax error: {getattr(exc, 'problem', exc)}", line)]) from None
    c = _Checker(_line_map(text))
    if not isinstance(raw, dict):
        raise ConfigInvalid([Diagnostic("<file>", "top level must be a mapping", 1)])
    if raw.get("schema") != SCHEMA:
        c.error("schema", f"expected schema {SCHEMA!r}, got {raw.get('schema')!r}")
    c.unknown(raw, TOP_KEYS, "")
    name = raw.get("name")
    if not isinstance(name, str) or not name or "/" in name:
        c.error("name", "expected a non-empty name without '/'")
        name = "experiment"

    ds_spec = _dataset(c, raw.get("dataset"))
    dataset = None
    if ds_spec is not None and not c.diags:
        try:
            dataset = build_dataset(ds_spec)
        except ConfigError as exc:
            c.error("dataset", str(exc))
    schedule = _schedule(c, raw.get("schedule"), dataset)

    m = raw.get("model", {}) or {}
    t = raw.get("train", {}) or {}
    if not isinstance(m, dict):
        c.error("model", "expected a mapping")
        m = {}
    if not isinstance(t, dict):
        c.error("train", "expected a mapping")
        t = {}
    c.unknown(m, MODEL_KEYS, "model")
    c.unknown(t, TRAIN_KEYS, "train")
    act = m.get("activation", "tanh")
    if act not in ("tanh", "relu"):
        c.error("model.activation", f"expected tanh or relu, got {act!r}")
        act = "tanh"
    opt = t.get("optimizer", "momentum")
    if opt not in ("sgd", "momentum"):
        c.error("train.optimizer", f"expected sgd or momentum, got {opt!r}")
        opt = "momentum"
    train_kw = dict(
        hidden=c.widths(m, "hidden", "model", (32, 32)),
        latent_dim=c.number(m, "latent_dim", "model", 8, integer=True, lo=1),
        encoder_hidden=c.widths(m, "encoder_hidden", "model", (32,)) if m.get("encoder_hidden", (32,)) != [] else (),
        decoder_hidden=c.widths(m, "decoder_hidden", "model", (32,)) if m.get("decoder_hidden", (32,)) != [] else (),
        activation=act,
        epochs=c.number(t, "epochs", "train", 20, integer=True, lo=1),
        lr=c.number(t, "lr", "train", 0.05, lo=0, lo_open=True),
        batch_size=c.number(t, "batch_size", "train", 64, integer=True, lo=1),
        optimizer=opt,
        momentum=c.number(t, "momentum", "train", 0.9, lo=0, hi=1, hi_open=True),
    )

    algos_raw = raw.get("algorithms")
    algorithms = []
    if not isinstance(algos_raw, list) or not algos_raw:
        c.error("algorithms", "expected a non-empty list")
    else:
        for i, a in enumerate(algos_raw):
            cfg = _algorithm(c, a, i)
            if cfg is not None:
                algorithms.append(cfg)
        labels = [a.label for a in algorithms]
        for lab in sorted(set(labels)):
            if labels.count(lab) > 1:
                c.error("algorithms", f"label {lab!r} used more than once")

    if "seeds" in raw:
        seeds = raw["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
            c.error("seeds", "expected a non-empty list of non-negative integers")
            seeds = [0]
        elif len(set(seeds)) != len(seeds):
            c.error("seeds", "seeds must be distinct across repeats")
    else:
        repeats = c.number(raw, "repeats", "", 3, integer=True, lo=1)
        base = c.number(raw, "seed", "", 0, integer=True, lo=0)
        seeds = [base + k for k in range(repeats if isinstance(repeats, int) else 1)]

    mt = raw.get("metrics", {}) or {}
    if not isinstance(mt, dict):
        c.error("metrics", "expected a mapping")
        mt = {}
    c.unknown(mt, METRIC_KEYS, "metrics")
    mr = mt.get("margin_range", [-20.0, 20.0])
    if not (isinstance(mr, list) and len(mr) == 2 and all(isinstance(v, (int, float)) for v in mr) and mr[0] < mr[1]):
        c.error("metrics.margin_range", f"expected [lo, hi] with lo < hi, got {mr!r}")
        mr = [-20.0, 20.0]
    metrics = MetricToggles(
        dbi=c.flag(mt, "dbi", "metrics", True),
        mia=c.flag(mt, "mia", "metrics", True),
        similarity=c.flag(mt, "similarity", "metrics", True),
        margins=c.flag(mt, "margins", "metrics", True),
        margin_range=(float(mr[0]), float(mr[1])),
        margin_bins=c.number(mt, "margin_bins", "metrics", 40, integer=True, lo=1),
        similarity_bins=c.number(mt, "similarity_bins", "metrics", 40, integer=True, lo=1),
    )
    workers = c.number(raw, "workers", "", 1, integer=True, lo=1)
    out_dir = raw.get("output_dir", f"results/{name}")
    if not isinstance(out_dir, str) or not out_dir:
        c.error("output_dir", "expected a path string")

    if c.diags:
        raise ConfigInvalid(c.diags)
    return ExperimentConfig(
        name=name,
        dataset=ds_spec,
        schedule=schedule,
        train=TrainConfig(**train_kw),
        algorithms=algorithms,
        seeds=list(seeds),
        output_dir=out_dir,
        metrics=metrics,
        workers=workers,
        raw=raw,
    )


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def validate(path) -> list[Diagnostic]:
    try:
        load_config(path)
    except ConfigInvalid as exc:
        return exc.diagnostics
    return []
