"""Run configuration: one YAML document, validated as a whole, unknown keys rejected."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .data import PATCH_SIZE, TEST_STRIDE, TRAIN_STRIDE, DatasetId
from .discriminators import DiscriminatorSpec
from .generators import GeneratorSpec
from .losses import LossWeights
from .training import ModelSpecs, TrainConfig, desk_scale


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    data_root: str = ""
    work_dir: str = "runs"


@dataclass(frozen=True)
class EvalConfig:
    test_stride: int = TEST_STRIDE
    threshold: float = 0.5
    ssim_mode: str = "continuous"
    infer_batch_size: int = 64

    def __post_init__(self):
        if self.test_stride < 1:
            raise ConfigError("eval.test_stride must be >= 1")
        if not 0 < self.threshold < 1:
            raise ConfigError("eval.threshold must lie in (0, 1)")
        if self.ssim_mode not in ("continuous", "binary"):
            raise ConfigError("eval.ssim_mode must be 'continuous' or 'binary'")


@dataclass(frozen=True)
class DataConfig:
    patch_size: int = PATCH_SIZE
    train_stride: int = TRAIN_STRIDE
    n_folds: int = 5
    fold_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    dataset_id: DatasetId = DatasetId.DRIVE
    run_name: str = ""
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    specs: ModelSpecs = field(default_factory=ModelSpecs.default)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolved(self) -> "RunConfig":
        """Apply desk-scale shrinking; idempotent."""
        if self.train.desk_scale:
            train, specs = desk_scale(self.train, self.specs)
            return replace(self, train=train, specs=specs)
        return self

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id.value,
            "run_name": self.run_name,
            "paths": vars(self.paths).copy(),
            "data": vars(self.data).copy(),
            "train": self.train.to_dict(),
            "specs": self.specs.to_dict(),
            "eval": vars(self.eval).copy(),
        }

    def digest(self) -> str:
        """Short hash of everything except paths and run name."""
        d = self.to_dict()
        d.pop("paths")
        d.pop("run_name")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]

    @property
    def run_dir(self) -> Path:
        name = self.run_name or f"{self.dataset_id.value.lower()}-{self.digest()}"
        return Path(self.paths.work_dir) / name

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


_SECTIONS = {
    "paths": PathsConfig, "data": DataConfig, "eval": EvalConfig,
}
_TOP_KEYS = {"dataset_id", "run_name", "paths", "data", "train", "specs", "eval"}


def _check_keys(d: dict, allowed, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _fields(cls) -> set[str]:
    return set(cls.__dataclass_fields__)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(d: dict[str, Any]) -> RunConfig:
    """Build a :class:`RunConfig` from a (partial) nested mapping over the defaults."""
    _check_keys(d, _TOP_KEYS, "config")
    full = _merge(RunConfig().to_dict(), d)
    try:
        for name, cls in _SECTIONS.items():
            _check_keys(full[name], _fields(cls), name)
        _check_keys(full["train"], _fields(TrainConfig), "train")
        _check_keys(full["train"]["weights"], _fields(LossWeights), "train.weights")
        _check_keys(full["specs"], set(ModelSpecs.__dataclass_fields__), "specs")
        for net in ("g_coarse", "g_fine"):
            _check_keys(full["specs"][net], _fields(GeneratorSpec), f"specs.{net}")
        for net in ("d_coarse", "d_fine"):
            _check_keys(full["specs"][net], _fields(DiscriminatorSpec), f"specs.{net}")
        return RunConfig(
            dataset_id=DatasetId(full["dataset_id"]),
            run_name=str(full["run_name"] or ""),
            paths=PathsConfig(**full["paths"]),
            data=DataConfig(**full["data"]),
            train=TrainConfig.from_dict(full["train"]),
            specs=ModelSpecs.from_dict(full["specs"]),
            eval=EvalConfig(**full["eval"]),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_override(item: str) -> dict:
    """``"train.epochs=3"`` -> ``{"train": {"epochs": 3}}`` (value parsed as YAML)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads exponent floats without a dot ("1e-4") as strings
        try:
            value = float(value)
        except ValueError:
            pass
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def load_config(path: str | Path | None = None, overrides: list[dict] | None = None) -> RunConfig:
    d: dict = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        d = loaded or {}
    for o in overrides or []:
        d = _merge(d, o)
    return from_dict(d)
