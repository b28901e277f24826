"""Run configuration shared by all CLI commands."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

from .ensemble import DEFAULT_C, DEFAULT_EPSILON, DEFAULT_N_MODELS, EnsembleParams
from .features import MIN_KEYS, WINDOW_S
from .keystroke import UPDRS3_MAX

DEFAULT_COST_RATIOS = ("1/1", "2/1", "1/2")


@dataclass(frozen=True)
class RunConfig:
    window_s: float = WINDOW_S
    min_keys: int = MIN_KEYS
    C: float = DEFAULT_C
    epsilon: float = DEFAULT_EPSILON
    n_models: int = DEFAULT_N_MODELS
    normalization_constant: float = UPDRS3_MAX
    max_hold_s: float = 2.0
    n_boot: int = 2000
    seed: int = 0
    cost_ratios: tuple[str, ...] = DEFAULT_COST_RATIOS
    bootstrap_unit: str = "window"
    standardize: bool = False
    # execution only; never echoed into outputs
    workers: int = field(default=1, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "cost_ratios", tuple(str(c) for c in self.cost_ratios))
        for ratio in self.cost_ratios:
            parse_cost_ratio(ratio)
        if self.window_s <= 0 or self.min_keys < 1 or self.n_models < 1:
            raise ValueError("window_s, min_keys and n_models must be positive")

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        data = json.loads(Path(path).read_text())
        return cls.from_mapping(data)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_runtime=True), indent=2) + "\n")

    def to_dict(self, include_runtime: bool = False) -> dict[str, Any]:
        d = asdict(self)
        d["cost_ratios"] = list(self.cost_ratios)
        if not include_runtime:
            d.pop("workers")
        return d

    def override(self, **values: Any) -> RunConfig:
        return replace(self, **{k: v for k, v in values.items() if v is not None})

    def ensemble_params(self) -> EnsembleParams:
        return EnsembleParams(
            C=self.C, epsilon=self.epsilon, n_models=self.n_models, master_seed=self.seed,
            normalization_constant=self.normalization_constant,
            bootstrap_unit=self.bootstrap_unit, standardize=self.standardize, n_jobs=self.workers,
        )


def parse_cost_ratio(text: str) -> tuple[float, float]:
    """'2/1' -> (cost per FN, cost per FP) = (2.0, 1.0)."""
    try:
        fn, fp = (Fraction(p.strip()) for p in str(text).split("/"))
    except ValueError:
        raise ValueError(f"cost ratio must look like 'FN/FP', got {text!r}") from None
    if fn <= 0 or fp <= 0:
        raise ValueError(f"costs must be positive: {text!r}")
    return float(fn), float(fp)
