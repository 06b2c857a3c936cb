"""Experiment configuration: a flat JSON object of documented keys.

Unknown keys are rejected by name so typos never pass silently.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

MODES = ("hfedms-d", "hfedms-s", "fedavg", "static")
GROWTHS = ("linear", "log", "exp")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    mode: str = "hfedms-d"

    # data
    K: int = 40
    F: int = 10
    feature_dim: int = 20
    skew: float = 0.3
    class_sep: float = 1.0
    n: int = 50  # examples drawn per client per round
    test_per_class: int = 100
    static_data: bool = False  # same batch every round instead of fresh draws
    data_csv: str | None = None
    csv_test_fraction: float = 0.2
    csv_replace: bool = True

    # model: extractor widths after the input layer
    hidden: list[int] = field(default_factory=lambda: [400, 10])
    activation: str = "identity"

    # scheduling
    T: int = 5
    R: int = 100
    kappa: float = 0.3
    growth: str = "log"
    alpha: float = 2.0
    beta: int = 10
    lr: float = 0.01
    minibatch: int = 5
    epochs: int = 1
    icg_tau_max: int = 10
    icg_restarts: int = 10

    # semantic replay
    scc: bool | None = None  # None: on in hfedms-d, off elsewhere
    Q: int = 200

    # traffic
    rate_up: float = 4e6
    rate_down: float = 7e6
    bytes_per_param: int = 4
    compute_s_per_round: float = 0.0
    traffic_params: int | None = None  # override the model's own counts for accounting
    traffic_classifier_params: int | None = None

    # forgetting scenario
    forget_classes: list[int] = field(default_factory=list)  # vanish from streams after forget_after
    forget_after: int | None = None
    probe_round: int | None = None

    workers: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        if self.growth not in GROWTHS:
            raise ConfigError(f"growth must be one of {', '.join(GROWTHS)}")
        if self.activation not in ("identity", "relu"):
            raise ConfigError("activation must be identity or relu")
        if self.K < 1 or self.F < 2 or self.feature_dim < 1 or self.n < 1:
            raise ConfigError("need K >= 1, F >= 2, feature_dim >= 1, n >= 1")
        if self.T < 1 or self.R < 1:
            raise ConfigError("need T >= 1 and R >= 1")
        if not 0 < self.kappa <= 1:
            raise ConfigError("kappa must lie in (0, 1]")
        if self.kappa * self.K < 1 - 1e-9:
            raise ConfigError("kappa * K must be at least 1")
        if self.alpha <= 0 or self.beta < 1:
            raise ConfigError("need alpha > 0 and beta >= 1")
        if self.lr < 0 or self.minibatch < 1 or self.epochs < 1:
            raise ConfigError("need lr >= 0, minibatch >= 1, epochs >= 1")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden must list at least one positive width")
        if self.Q < 0:
            raise ConfigError("Q must be >= 0")
        if self.skew <= 0 or self.class_sep < 0:
            raise ConfigError("need skew > 0 and class_sep >= 0")
        if self.rate_up <= 0 or self.rate_down <= 0 or self.bytes_per_param < 1:
            raise ConfigError("link rates and bytes_per_param must be positive")
        if self.scc is True and self.mode != "hfedms-d":
            raise ConfigError("scc is only available in hfedms-d mode (set scc=false)")
        if (self.traffic_params is None) != (self.traffic_classifier_params is None):
            raise ConfigError("traffic_params and traffic_classifier_params go together")
        if self.traffic_params is not None and not 0 < self.traffic_classifier_params <= self.traffic_params:
            raise ConfigError("need 0 < traffic_classifier_params <= traffic_params")
        if any(not 0 <= c < self.F for c in self.forget_classes):
            raise ConfigError("forget_classes out of range")
        if len(set(self.forget_classes)) >= self.F:
            raise ConfigError("at least one class must remain")
        if bool(self.forget_classes) != (self.forget_after is not None):
            raise ConfigError("forget_classes and forget_after go together")
        if self.probe_round is not None and not 0 <= self.probe_round < self.R:
            raise ConfigError("probe_round must be a simulated round")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    @property
    def dims(self) -> list[int]:
        return [self.feature_dim, *map(int, self.hidden)]

    @property
    def effective_T(self) -> int:
        """Rounds per cycle; every round is a full sync outside the alternating mode."""
        return self.T if self.mode == "hfedms-d" else 1

    @property
    def use_scc(self) -> bool:
        return self.mode == "hfedms-d" if self.scc is None else self.scc

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return from_dict({**self.to_dict(), **changes})


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, value: Any) -> Any:
    typ = str(_FIELDS[name].type)  # annotation text, e.g. "int | None"
    if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
        if "None" not in typ:
            raise ConfigError(f"{name}: may not be empty")
        return None
    base = typ.split("|")[0].strip()
    if base == "bool":
        if isinstance(value, str):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ConfigError(f"{name}: expected a boolean, got {value!r}")
            return low in ("true", "1", "yes", "on")
        return bool(value)
    if base == "list[int]":
        if isinstance(value, str):
            value = [v for v in value.strip("[] ").split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list of integers")
        return [int(v) for v in value]
    if base == "int":
        as_float = float(value)
        if not as_float.is_integer():
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(as_float)
    if base == "float":
        out = float(value)
        if not math.isfinite(out):
            raise ConfigError(f"{name}: must be finite")
        return out
    return str(value)


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        try:
            kwargs[k] = _coerce(k, v)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{k}: {exc}") from None
    return ExperimentConfig(**kwargs).validate()


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    data: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be an object")
    data.update(overrides or {})
    return from_dict(data)


def preset_path(name: str) -> Path:
    ref = resources.files("hfedms") / "presets" / f"{name}.cfg"
    return Path(str(ref))


def load_preset(name: str, **overrides: Any) -> ExperimentConfig:
    path = preset_path(name)
    if not path.exists():
        raise ConfigError(f"no preset named {name!r}")
    return load_config(path, overrides)


def parse_override(text: str) -> tuple[str, Any]:
    """``key=value`` with the value parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value
