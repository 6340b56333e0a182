"""Flat ``key = value`` run configuration and seed splitting."""

from __future__ import annotations

import dataclasses
import hashlib
import zlib
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .model import Hyperparameters


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass(frozen=True)
class RunConfig:
    dataset: str = ""
    format: str = "canonical"
    window_days: int = 1
    # trainer
    d: int = 300
    eta: float = 0.05
    negatives: int = 3
    epochs: int = 50
    tau: float = 0.1
    price_clip: float = 10.0
    value_weighting: bool = True
    noise: str = "unigram"
    seed: int = 0
    # rule mining
    num_functions: int = 4
    num_tables: int = 11
    lift_scale: float = 4.3
    top_k: int = 100
    min_count: int = 0
    # evaluation
    M: int = 10
    query_windows: str = "auto"
    num_query_windows: int = 20
    ks: str = "1,5,10"
    scorers: str = "Embedding,Pop,Sup,Lift"
    eval_negatives: str = "popularity"
    one_per_basket: bool = False
    # execution
    mode: str = "deterministic"
    threads: int = 4
    output_dir: str = "omba-out"

    def hyperparameters(self) -> Hyperparameters:
        return Hyperparameters(
            d=self.d, eta=self.eta, negatives=self.negatives, epochs=self.epochs, tau=self.tau,
            price_clip=self.price_clip, seed=self.seed, value_weighting=self.value_weighting, noise=self.noise,
        )

    @property
    def ks_list(self) -> list[int]:
        return [int(k) for k in self.ks.split(",") if k.strip()]

    @property
    def scorer_list(self) -> list[str]:
        return [s.strip() for s in self.scorers.split(",") if s.strip()]

    def explicit_query_windows(self) -> Optional[list[int]]:
        if self.query_windows.strip() == "auto":
            return None
        return sorted({int(x) for x in self.query_windows.split(",") if x.strip()})

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def sub_seed(self, name: str) -> int:
        return sub_seed(self.seed, name)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
CHOICES = {
    "noise": ("unigram", "uniform"),
    "mode": ("deterministic", "parallel"),
    "eval_negatives": ("popularity", "uniform"),
}
POSITIVE = ("window_days", "d", "negatives", "num_functions", "num_tables", "top_k", "M", "threads",
            "num_query_windows", "eta", "price_clip")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(key: str, raw: str):
    typ = FIELD_TYPES[key]
    raw = raw.strip()
    if typ in ("bool", bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if typ in ("int", int):
        return int(raw)
    if typ in ("float", float):
        return float(raw)
    return raw


def _validate(values: dict) -> list[str]:
    problems = []
    for key, allowed in CHOICES.items():
        if key in values and values[key] not in allowed:
            problems.append(f"{key}: must be one of {', '.join(allowed)} (got {values[key]!r})")
    for key in POSITIVE:
        if key in values and not values[key] > 0:
            problems.append(f"{key}: must be positive (got {values[key]!r})")
    for key in ("epochs", "tau", "min_count"):
        if key in values and values[key] < 0:
            problems.append(f"{key}: must be nonnegative (got {values[key]!r})")
    if "ks" in values:
        try:
            ks = [int(k) for k in values["ks"].split(",") if k.strip()]
            if not ks or min(ks) < 1:
                raise ValueError
        except ValueError:
            problems.append(f"ks: expected comma-separated positive integers (got {values['ks']!r})")
    if "query_windows" in values and values["query_windows"].strip() != "auto":
        try:
            [int(x) for x in values["query_windows"].split(",") if x.strip()]
        except ValueError:
            problems.append(f"query_windows: expected 'auto' or comma-separated integers (got {values['query_windows']!r})")
    return problems


def build(pairs: list[tuple[str, str]], base: Optional[RunConfig] = None) -> RunConfig:
    """Apply (key, raw value) pairs over ``base``; every bad key is reported at once."""
    values = {}
    problems = []
    for key, raw in pairs:
        if key not in FIELD_TYPES:
            problems.append(f"{key}: unknown key")
            continue
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    problems += _validate(values)
    if problems:
        raise ConfigError(problems)
    return dataclasses.replace(base or RunConfig(), **values)


def parse(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    pairs = []
    problems = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value'")
            continue
        key, raw = line.split("=", 1)
        pairs.append((key.strip(), raw))
    try:
        cfg = build(pairs, base)
    except ConfigError as exc:
        raise ConfigError(problems + exc.problems) from None
    if problems:
        raise ConfigError(problems)
    return cfg


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def sub_seed(master: int, name: str) -> int:
    """Named child seed: SeedSequence(master, spawn_key=(crc32(name),)), first 63 bits."""
    ss = np.random.SeedSequence(int(master), spawn_key=(zlib.crc32(name.encode("utf-8")),))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


SEED_NAMES = ("init", "negatives", "ensemble", "eval")
