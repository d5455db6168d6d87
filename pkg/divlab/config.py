from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Final, Mapping, Optional, Sequence, Tuple, Type, TypeVar

from divlab.alignment import AlignTrainConfig, ClVariant, SelectionMetric, Variable
from divlab.divergence import ReportParams
from divlab.errors import ConfigurationError
from divlab.neural import MlpConfig
from divlab.synthdata import DatasetConfig, Scheme

output_root_variable: Final = "DIVLAB_OUTPUT_ROOT"

default_seeds: Final = (0, 1, 2, 3, 4)

default_eval_samples: Final = 2000


class LossMode(Enum):
    DasOnly: Final = "das"
    ClOnly: Final = "cl"
    DasPlusCl: Final = "das+cl"


def default_output_dir() -> Path:
    return Path(os.environ.get(output_root_variable, "divlab-output")).expanduser()


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = DatasetConfig()

    mlp: MlpConfig = MlpConfig()

    align: AlignTrainConfig = AlignTrainConfig()

    report: ReportParams = ReportParams()

    scheme: Scheme = Scheme.Default

    loss_mode: LossMode = LossMode.DasOnly

    # Weight of the CL term for ClOnly and DasPlusCl.
    cl_eps: float = 1.0

    seeds: Tuple[int, ...] = default_seeds

    # Intervention samples per IIA evaluation.
    eval_samples: int = default_eval_samples

    output_dir: Path = field(default_factory=default_output_dir)

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigurationError("At least one seed is required.")

        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError(f"Seeds must be distinct: {list(self.seeds)}")

        if any(map(lambda s: s < 0, self.seeds)):
            raise ConfigurationError("Seeds must be non-negative.")

        if self.cl_eps < 0 or (self.loss_mode != LossMode.DasOnly and self.cl_eps == 0):
            raise ConfigurationError(f"The CL weight must be positive when the CL loss is used: {self.cl_eps}")

        if self.eval_samples <= 0:
            raise ConfigurationError(f"eval_samples must be positive: {self.eval_samples}")

    def dataset_config(self, seed: int) -> DatasetConfig:
        return replace(self.dataset, seed=seed)

    def mlp_config(self, seed: int) -> MlpConfig:
        return replace(self.mlp, input_dim=self.dataset.dim, n_classes=self.dataset.n_classes, seed=seed)

    def align_config(self, seed: int) -> AlignTrainConfig:
        weights = {
            LossMode.DasOnly: (1.0, 0.0),
            LossMode.ClOnly: (0.0, self.cl_eps),
            LossMode.DasPlusCl: (1.0, self.cl_eps)
        }

        (behavioral, cl) = weights[self.loss_mode]

        return replace(self.align, behavioral_weight=behavioral, cl_weight=cl, seed=seed)

    def to_dict(self) -> Dict[str, Any]:
        def plain(value: Any) -> Any:
            if isinstance(value, Enum):
                return value.value

            if isinstance(value, Path):
                return str(value)

            if isinstance(value, (tuple, list)):
                return list(map(plain, value))

            if isinstance(value, dict):
                return {k: plain(v) for (k, v) in value.items()}

            return value

        return plain(asdict(self))


sections: Final = {
    "dataset": DatasetConfig,
    "mlp": MlpConfig,
    "align": AlignTrainConfig,
    "report": ReportParams
}

# Field types that cannot be inferred from a non-None default.
_optional_fields: Final = {
    "selection_metric": SelectionMetric,
    "bandwidth": float
}

_enum_fields: Final = {
    "cl_variant": ClVariant,
    "variable": Variable,
    "selection_metric": SelectionMetric,
    "scheme": Scheme,
    "loss_mode": LossMode
}

T = TypeVar("T")


def coerce(name: str, default: Any, value: Any) -> Any:
    """Converts a JSON value to the type of a field, judged by its name and default."""

    if value is None:
        if name in _optional_fields:
            return None

        raise ConfigurationError(f"{name} cannot be null.")

    try:
        if name in _enum_fields:
            return _enum_fields[name](value)

        if name in _optional_fields:
            return _optional_fields[name](value)

        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError(value)

            return value

        if isinstance(default, tuple):
            items = list(value) if isinstance(value, (list, tuple)) else [value]
            kind = type(default[0]) if default else float

            return tuple(map(kind, items))

        if isinstance(default, Path):
            return Path(value).expanduser()

        if isinstance(default, int) and not isinstance(value, bool):
            if isinstance(value, float) and not value.is_integer():
                raise TypeError(value)

            return int(value)

        if isinstance(default, float) and not isinstance(value, bool):
            return float(value)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"Invalid value for {name}: {value!r}") from e

    raise ConfigurationError(f"Invalid value for {name}: {value!r}")


def _build(cls: Type[T], values: Mapping[str, Any], where: str) -> T:
    defaults = cls()

    known = {f.name for f in fields(defaults)}  # type: ignore
    unknown = set(values) - known

    if unknown:
        raise ConfigurationError(f"Unknown keys in {where}: {sorted(unknown)}")

    changes = {k: coerce(k, getattr(defaults, k), v) for (k, v) in values.items()}

    return replace(defaults, **changes)  # type: ignore


def config_from_dict(values: Mapping[str, Any]) -> ExperimentConfig:
    defaults = ExperimentConfig()

    top = {f.name for f in fields(defaults)} - set(sections)
    unknown = set(values) - top - set(sections)

    if unknown:
        raise ConfigurationError(f"Unknown configuration keys: {sorted(unknown)}")

    changes: Dict[str, Any] = {}

    for (name, cls) in sections.items():
        section = values.get(name, {})

        if not isinstance(section, Mapping):
            raise ConfigurationError(f"Section {name} must be an object.")

        changes[name] = _build(cls, section, name)

    for name in top & set(values):
        changes[name] = coerce(name, getattr(defaults, name), values[name])

    return replace(defaults, **changes)


def load_config(path: Path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fin:
            values = json.load(fin)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read configuration {path}: {e}") from e

    if not isinstance(values, Mapping):
        raise ConfigurationError(f"Configuration {path} must hold a JSON object.")

    return config_from_dict(values)


def apply_overrides(config: ExperimentConfig, overrides: Sequence[Tuple[Optional[str], str, Any]]) -> ExperimentConfig:
    """Applies (section, key, value) triples; a None section addresses top-level keys."""

    values = config.to_dict()

    for (section, key, value) in overrides:
        if section is None:
            values[key] = value
        elif section in sections:
            values[section][key] = value
        else:
            raise ConfigurationError(f"Unknown configuration section: {section}")

    return config_from_dict(values)
