"""Experiment configuration: one versioned JSON document drives every command."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .backtest import StrategySpec
from .env import EnvConfig
from .errors import DataError
from .forecaster import ForecasterConfig
from .ppo import PpoConfig

SCHEMA = "hybridfolio.experiment"
SCHEMA_VERSION = 1


def default_strategies(k_values=(5, 10, 30)) -> list[StrategySpec]:
    out = []
    for kind in ("signal-only", "policy-only", "hybrid"):
        out += [StrategySpec(kind, top_k=k) for k in k_values]
    return out


def derive_seed(seed: int, tag: str, index: int = 0) -> int:
    """Independent, stable sub-seed for one job (an asset, a K value, ...)."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(tag.encode()), int(index)])
    return int(ss.generate_state(1)[0])


@dataclass
class ExperimentConfig:
    manifest: str
    out: str = "runs/default"
    seed: int = 0
    anchor: str = "FRI"
    resample: bool = True
    split_ratio: float = 0.7
    cache_dir: str | None = None
    forecaster: ForecasterConfig = field(default_factory=ForecasterConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    env_per_k: dict[str, dict] = field(default_factory=dict)
    k_values: list[int] = field(default_factory=lambda: [5, 10, 30])
    ppo: PpoConfig = field(default_factory=PpoConfig)
    allocator_scores: bool = True  # False trains the allocator without the forecast segment
    strategies: list[StrategySpec] | None = None
    rf: float = 0.0
    periods_per_year: int = 52
    reported_benchmarks: str | bool = "auto"
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self):
        if self.strategies is None:
            self.strategies = default_strategies(self.k_values)
        if len(set(self.k_values)) != len(self.k_values):
            raise DataError(f"k_values must be unique, got {self.k_values}")
        if not 0 < self.split_ratio < 1:
            raise DataError("split_ratio must lie in (0, 1)")
        if self.reported_benchmarks not in ("auto", True, False):
            raise DataError("reported_benchmarks must be 'auto', true or false")
        for k, extra in self.env_per_k.items():
            bad = set(extra) - {"window", "tau", "lam_sparse"}
            if bad:
                raise DataError(f"env_per_k[{k!r}] may only set window, tau, lam_sparse (got {sorted(bad)})")
        for s in self.strategies:
            if s.kind in ("hybrid", "policy-only") and s.top_k not in self.k_values:
                raise DataError(f"strategy {s.label!r} uses K={s.top_k}, not among k_values {self.k_values}")

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.out)

    def env_for(self, k: int) -> EnvConfig:
        extra = self.env_per_k.get(str(k), {})
        return replace(self.env, top_k=k, **extra)

    def forecaster_for(self, asset_index: int) -> ForecasterConfig:
        return replace(self.forecaster, seed=derive_seed(self.seed, "forecaster", asset_index))

    def ppo_for(self, k: int) -> PpoConfig:
        return replace(self.ppo, seed=derive_seed(self.seed, "allocator", k))

    def echo(self) -> dict:
        """Config as recorded in the run manifest (output location excluded)."""
        d = {"schema": SCHEMA, "version": SCHEMA_VERSION}
        for f in fields(self):
            if f.name in ("out", "base_dir"):
                continue
            v = getattr(self, f.name)
            if f.name == "strategies":
                v = [s.to_dict() for s in v]
            elif hasattr(v, "__dataclass_fields__"):
                v = asdict(v)
            d[f.name] = v
        return d


_NESTED = {"forecaster": ForecasterConfig, "env": EnvConfig, "ppo": PpoConfig}


def _set_key(doc: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def config_from_dict(doc: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    doc = dict(doc)
    schema, version = doc.pop("schema", SCHEMA), doc.pop("version", SCHEMA_VERSION)
    if schema != SCHEMA:
        raise DataError(f"config schema {schema!r} is not {SCHEMA!r}")
    if version > SCHEMA_VERSION:
        raise DataError(f"config version {version} is newer than supported ({SCHEMA_VERSION})")
    known = {f.name for f in fields(ExperimentConfig)} - {"base_dir"}
    unknown = set(doc) - known
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    if "manifest" not in doc:
        raise DataError("config needs a 'manifest' path")
    kwargs = {}
    for k, v in doc.items():
        if k in _NESTED:
            cls = _NESTED[k]
            bad = set(v) - {f.name for f in fields(cls)}
            if bad:
                raise DataError(f"unknown keys in {k!r}: {sorted(bad)}")
            try:
                v = cls(**v)
            except (TypeError, ValueError) as exc:
                raise DataError(f"invalid {k!r} section: {exc}") from exc
        elif k == "strategies" and v is not None:
            try:
                v = [StrategySpec.from_dict(s) for s in v]
            except (KeyError, ValueError) as exc:
                raise DataError(f"invalid strategy entry: {exc}") from exc
        kwargs[k] = v
    return ExperimentConfig(base_dir=base_dir, **kwargs)


def load_config(path: str | Path, overrides: list[str] | None = None, seed: int | None = None,
                out: str | None = None) -> ExperimentConfig:
    """Read a JSON config; ``overrides`` are ``dotted.key=value`` strings (values parsed as JSON)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    for item in overrides or []:
        if "=" not in item:
            raise DataError(f"override {item!r} is not key=value")
        _set_key(doc, *item.split("=", 1))
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc["out"] = str(Path(out).resolve())
    return config_from_dict(doc, path.resolve().parent)
