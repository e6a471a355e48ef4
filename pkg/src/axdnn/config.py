"""Experiment configuration: a small TOML-subset parser plus validation.

Supported syntax: top-level ``key = value`` pairs, ``[[attack]]`` /
``[[transfer_source]]`` / ``[[transfer_victim]]`` table arrays, comments,
and single-line scalar/array values (strings, ints, floats, booleans).
Every parse or validation failure raises ConfigError carrying the file and
line it came from. Relative paths resolve against the config file's
directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .attacks import VALID_ATTACKS
from .model import PRESETS

_TABLE_KINDS = ("attack", "transfer_source", "transfer_victim")


class ConfigError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line else f"{path}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class AttackTemplate:
    """An attack row without its epsilon; the sweep instantiates one
    AttackSpec per (template, epsilon) grid point."""

    kind: str
    norm: str
    steps: int | None = None
    step_size: float | None = None
    draws: int | None = None

    @property
    def label(self) -> str:
        return f"{self.kind}_{self.norm}"


@dataclass(frozen=True)
class TransferSource:
    name: str
    model_path: str


@dataclass(frozen=True)
class TransferVictim:
    name: str
    model_path: str
    multiplier: str


@dataclass
class HarnessConfig:
    model: str
    model_path: str
    dataset: str
    data_paths: dict[str, object]
    eps_list: list[float]
    attacks: list[AttackTemplate]
    multipliers: list[str]
    seed: int = 42
    ath: float = 90.0
    qlevel: int = 8
    eval_subset_size: int = 1000
    calib_size: int = 1024
    route_dense: bool = False
    study_multiplier: str | None = None
    train_epochs: int = 2
    train_batch_size: int = 64
    train_lr: float = 0.05
    train_momentum: float = 0.9
    train_subset: int = 0  # 0 trains on the full set
    transfer_epsilon: float = 0.05
    transfer_sources: list[TransferSource] = field(default_factory=list)
    transfer_victims: list[TransferVictim] = field(default_factory=list)


def _parse_scalar(text: str, path, line: int):
    text = text.strip()
    if not text:
        raise ConfigError(path, line, "empty value")
    if text.startswith('"'):
        if not (len(text) >= 2 and text.endswith('"')) or '"' in text[1:-1]:
            raise ConfigError(path, line, f"malformed string literal {text}")
        return text[1:-1]
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(path, line, f"cannot parse value {text!r} (only strings, "
                          f"numbers, booleans, and flat arrays are supported)") from None


def _parse_value(text: str, path, line: int):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigError(path, line, "arrays must open and close on one line")
        inner = text[1:-1].strip()
        if not inner:
            return []
        # split on commas outside string literals
        items, depth, buf = [], False, ""
        for ch in inner:
            if ch == '"':
                depth = not depth
            if ch == "," and not depth:
                items.append(buf)
                buf = ""
            else:
                buf += ch
        items.append(buf)
        return [_parse_scalar(item, path, line) for item in items]
    return _parse_scalar(text, path, line)


def _strip_comment(line: str) -> str:
    in_string = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_string = not in_string
        elif ch == "#" and not in_string:
            return line[:i]
    return line


def parse_toml_subset(path) -> tuple[dict, dict]:
    """Return ({key: (value, line)}, {table_kind: [({key: (value, line)}, line)]})."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(path, None, f"cannot read config: {exc.strerror}") from exc

    top: dict[str, tuple[object, int]] = {}
    tables: dict[str, list[tuple[dict, int]]] = {k: [] for k in _TABLE_KINDS}
    current: dict | None = None

    for lineno, raw in enumerate(lines, start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("[["):
            if not line.endswith("]]"):
                raise ConfigError(path, lineno, f"malformed table header {line!r}")
            kind = line[2:-2].strip()
            if kind not in _TABLE_KINDS:
                raise ConfigError(path, lineno, f"unknown table [[{kind}]]; supported: "
                                  + ", ".join(f"[[{k}]]" for k in _TABLE_KINDS))
            current = {}
            tables[kind].append((current, lineno))
            continue
        if line.startswith("["):
            raise ConfigError(path, lineno, f"plain [section] tables are not part of "
                              f"the schema; use top-level keys or [[table]] entries")
        if "=" not in line:
            raise ConfigError(path, lineno, f"expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key or not key.replace("_", "").isalnum():
            raise ConfigError(path, lineno, f"bad key name {key!r}")
        target = current if current is not None else top
        if key in target:
            raise ConfigError(path, lineno, f"duplicate key {key!r}")
        target[key] = (_parse_value(value, path, lineno), lineno)
    return top, tables


_TOP_TYPES = {
    "model": str, "model_path": str, "dataset": str,
    "train_images": str, "train_labels": str, "test_images": str,
    "test_labels": str, "train_batches": list, "test_batches": list,
    "seed": int, "ath": (int, float), "qlevel": int,
    "eval_subset_size": int, "calib_size": int,
    "eps_list": list, "multipliers": list, "route_dense": bool,
    "study_multiplier": str,
    "train_epochs": int, "train_batch_size": int, "train_lr": (int, float),
    "train_momentum": (int, float), "train_subset": int,
    "transfer_epsilon": (int, float),
}

_REQUIRED = ("model", "model_path", "dataset", "eps_list", "multipliers")

_DATA_KEYS = {"mnist": ("train_images", "train_labels", "test_images", "test_labels"),
              "cifar10": ("train_batches", "test_batches")}


def _typecheck(path, key, value, line):
    want = _TOP_TYPES[key]
    if isinstance(value, bool) and want is not bool:
        raise ConfigError(path, line, f"{key} must be {getattr(want, '__name__', want)}, "
                          f"got a boolean")
    if not isinstance(value, want):
        name = want.__name__ if isinstance(want, type) else "number"
        raise ConfigError(path, line, f"{key} must be {name}, got {value!r}")


def parse_config(path) -> HarnessConfig:
    top, tables = parse_toml_subset(path)
    base = os.path.dirname(os.path.abspath(path))

    for key, (value, line) in top.items():
        if key not in _TOP_TYPES:
            raise ConfigError(path, line, f"unknown key {key!r}")
        _typecheck(path, key, value, line)

    for key in _REQUIRED:
        if key not in top:
            raise ConfigError(path, None, f"missing required key {key!r}")

    def get(key, default=None):
        return top[key][0] if key in top else default

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    model = get("model")
    if model not in PRESETS:
        raise ConfigError(path, top["model"][1], f"unknown model preset {model!r}; "
                          f"available: {sorted(PRESETS)}")
    dataset = get("dataset")
    if dataset not in _DATA_KEYS:
        raise ConfigError(path, top["dataset"][1], f"unknown dataset {dataset!r}; "
                          f"available: {sorted(_DATA_KEYS)}")

    data_paths = {}
    for key in _DATA_KEYS[dataset]:
        if key not in top:
            raise ConfigError(path, None, f"dataset {dataset!r} requires key {key!r}")
        value, line = top[key]
        if isinstance(value, list):
            if not value or not all(isinstance(v, str) for v in value):
                raise ConfigError(path, line, f"{key} must be a non-empty list of paths")
            data_paths[key] = [resolve(v) for v in value]
        else:
            data_paths[key] = resolve(value)

    eps_value, eps_line = top["eps_list"]
    if not eps_value:
        raise ConfigError(path, eps_line, "eps_list must not be empty")
    eps_list = []
    for e in eps_value:
        if isinstance(e, bool) or not isinstance(e, (int, float)):
            raise ConfigError(path, eps_line, f"eps_list entries must be numbers, "
                              f"got {e!r}")
        eps_list.append(float(e))
    if eps_list[0] != 0.0:
        raise ConfigError(path, eps_line, f"eps_list must start at 0, got "
                          f"{eps_list[0]}")
    if any(b <= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigError(path, eps_line, "eps_list must be strictly ascending")

    mult_value, mult_line = top["multipliers"]
    if not mult_value or not all(isinstance(m, str) for m in mult_value):
        raise ConfigError(path, mult_line, "multipliers must be a non-empty list of "
                          "names or file paths")
    if mult_value[0] != "exact":
        raise ConfigError(path, mult_line, f"multipliers[0] must be \"exact\" (the "
                          f"reference routing), got {mult_value[0]!r}")
    if len(set(mult_value)) != len(mult_value):
        dup = next(m for i, m in enumerate(mult_value) if m in mult_value[:i])
        raise ConfigError(path, mult_line, f"duplicate multiplier {dup!r}")

    attacks = []
    for entry, line in tables["attack"]:
        known = {"kind": str, "norm": str, "steps": int,
                 "step_size": (int, float), "draws": int}
        for key, (value, kline) in entry.items():
            if key not in known:
                raise ConfigError(path, kline, f"unknown attack key {key!r}")
            if isinstance(value, bool) or not isinstance(value, known[key]):
                raise ConfigError(path, kline, f"attack key {key} has bad value "
                                  f"{value!r}")
        if "kind" not in entry or "norm" not in entry:
            raise ConfigError(path, line, "attack table needs kind and norm")
        kind = entry["kind"][0].lower()
        norm = entry["norm"][0].lower()
        if (kind, norm) not in VALID_ATTACKS:
            raise ConfigError(path, line, f"unsupported attack ({kind}, {norm}); "
                              f"valid rows: {sorted(VALID_ATTACKS)}")
        attacks.append(AttackTemplate(
            kind, norm,
            steps=entry.get("steps", (None, 0))[0],
            step_size=(float(entry["step_size"][0]) if "step_size" in entry else None),
            draws=entry.get("draws", (None, 0))[0]))
    if len(set((a.kind, a.norm) for a in attacks)) != len(attacks):
        raise ConfigError(path, None, "duplicate (kind, norm) attack rows")

    sources = []
    for entry, line in tables["transfer_source"]:
        for key in entry:
            if key not in ("name", "model"):
                raise ConfigError(path, entry[key][1], f"unknown transfer_source key "
                                  f"{key!r}")
        if "name" not in entry or "model" not in entry:
            raise ConfigError(path, line, "transfer_source needs name and model")
        sources.append(TransferSource(str(entry["name"][0]),
                                      resolve(str(entry["model"][0]))))
    victims = []
    for entry, line in tables["transfer_victim"]:
        for key in entry:
            if key not in ("name", "model", "multiplier"):
                raise ConfigError(path, entry[key][1], f"unknown transfer_victim key "
                                  f"{key!r}")
        if any(k not in entry for k in ("name", "model", "multiplier")):
            raise ConfigError(path, line, "transfer_victim needs name, model, and "
                              "multiplier")
        victims.append(TransferVictim(str(entry["name"][0]),
                                      resolve(str(entry["model"][0])),
                                      str(entry["multiplier"][0])))

    cfg = HarnessConfig(
        model=model,
        model_path=resolve(get("model_path")),
        dataset=dataset,
        data_paths=data_paths,
        eps_list=eps_list,
        attacks=attacks,
        multipliers=list(mult_value),
        seed=get("seed", 42),
        ath=float(get("ath", 90.0)),
        qlevel=get("qlevel", 8),
        eval_subset_size=get("eval_subset_size", 1000),
        calib_size=get("calib_size", 1024),
        route_dense=get("route_dense", False),
        study_multiplier=get("study_multiplier"),
        train_epochs=get("train_epochs", 2),
        train_batch_size=get("train_batch_size", 64),
        train_lr=float(get("train_lr", 0.05)),
        train_momentum=float(get("train_momentum", 0.9)),
        train_subset=get("train_subset", 0),
        transfer_epsilon=float(get("transfer_epsilon", 0.05)),
        transfer_sources=sources,
        transfer_victims=victims,
    )

    def bad(key, message):
        raise ConfigError(path, top[key][1] if key in top else None, message)

    if not 0 < cfg.ath <= 100:
        bad("ath", f"ath must be in (0, 100], got {cfg.ath}")
    if not 2 <= cfg.qlevel <= 8:
        bad("qlevel", f"qlevel must be in [2, 8], got {cfg.qlevel}")
    if cfg.eval_subset_size < 1:
        bad("eval_subset_size", "eval_subset_size must be >= 1")
    if cfg.calib_size < 1:
        bad("calib_size", "calib_size must be >= 1")
    if cfg.seed < 0 or cfg.seed >= 2 ** 64:
        bad("seed", "seed must fit an unsigned 64-bit int")
    if cfg.train_epochs < 0:
        bad("train_epochs", "train_epochs must be >= 0")
    if cfg.train_batch_size < 1:
        bad("train_batch_size", "train_batch_size must be >= 1")
    if cfg.train_lr <= 0:
        bad("train_lr", "train_lr must be positive")
    if not 0 <= cfg.train_momentum < 1:
        bad("train_momentum", "train_momentum must be in [0, 1)")
    if cfg.train_subset < 0:
        bad("train_subset", "train_subset must be >= 0 (0 = full set)")
    if cfg.transfer_epsilon < 0:
        bad("transfer_epsilon", "transfer_epsilon must be >= 0")
    if cfg.study_multiplier is not None and cfg.study_multiplier not in cfg.multipliers:
        bad("study_multiplier", f"study_multiplier {cfg.study_multiplier!r} must be "
            f"one of the configured multipliers")
    return cfg
