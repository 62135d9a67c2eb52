"""Flat `key = value` run configuration.

Keys are dotted (model.*, experiment.*, simulate.*, filter.*, kalman.*,
output.*); values are scalars or comma-separated lists.  Full-line comments
start with '#'.  Unknown keys are errors, so a config never silently carries a
typo.  Every run echoes its resolved configuration (defaults applied, seed
resolved) in canonical form, and the echo reparses to the same configuration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

from .experiments import ConvergenceConfig
from .model_core import MODEL_PRESET_PARAMS


class ConfigError(ValueError):
    """Malformed or invalid configuration; message carries line/field context."""


def parse_config_text(text: str) -> dict[str, str]:
    """Parse `key = value` lines into an ordered mapping of raw strings."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_config_file(path: str) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc


def render_config(mapping: Mapping[str, str]) -> str:
    """Canonical text form: one `key = value` line per entry, sorted by key."""
    return "".join(f"{key} = {mapping[key]}\n" for key in sorted(mapping))


# ---------------------------------------------------------------------------
# Typed value handling

def _parse_int(key: str, value: str) -> int:
    try:
        return int(value, 10)
    except ValueError as exc:
        raise ConfigError(f"field {key}: expected integer, got {value!r}") from exc


def _parse_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"field {key}: expected number, got {value!r}") from exc


def _parse_bool(key: str, value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"field {key}: expected boolean, got {value!r}")


def _parse_int_list(key: str, value: str) -> tuple[int, ...]:
    items = [v.strip() for v in value.split(",") if v.strip()]
    if not items:
        raise ConfigError(f"field {key}: expected comma-separated integers, got {value!r}")
    return tuple(_parse_int(key, v) for v in items)


def _parse_float_list(key: str, value: str) -> tuple[float, ...]:
    items = [v.strip() for v in value.split(",") if v.strip()]
    if not items:
        raise ConfigError(f"field {key}: expected comma-separated numbers, got {value!r}")
    return tuple(_parse_float(key, v) for v in items)


def _parse_str_list(key: str, value: str) -> tuple[str, ...]:
    items = [v.strip() for v in value.split(",") if v.strip()]
    if not items:
        raise ConfigError(f"field {key}: expected comma-separated names, got {value!r}")
    return tuple(items)


def _canon(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_canon(v) for v in value)
    return str(value)


_PARSERS = {
    "int": _parse_int,
    "float": _parse_float,
    "bool": _parse_bool,
    "int_list": _parse_int_list,
    "float_list": _parse_float_list,
    "str": lambda key, value: value,
    "str_list": _parse_str_list,
}

# key -> (type name, default or None for required)
_SCHEMAS: dict[str, dict[str, tuple[str, Any]]] = {
    "converge": {
        "experiment.T": ("float", 1.0),
        "experiment.n_list": ("int_list", (4, 8, 16, 32, 64)),
        "experiment.n_ref": ("int", 1024),
        "experiment.p_list": ("float_list", (2.0,)),
        "experiment.M_X": ("int", 20000),
        "experiment.M_Y": ("int", 200),
        "experiment.g": ("str_list", ("identity", "indicator")),
        "experiment.seed": ("int", None),
        "experiment.normalized": ("bool", False),
        "experiment.substeps": ("str", "nref"),
        "output.prefix": ("str", "converge"),
    },
    "simulate": {
        "simulate.T": ("float", 1.0),
        "simulate.n": ("int", 64),
        "simulate.replicas": ("int", 16),
        "simulate.seed": ("int", None),
    },
    "filter": {
        "filter.T": ("float", 1.0),
        "filter.n": ("int", 64),
        "filter.substeps": ("int", 1),
        "filter.particles": ("int", 1000),
        "filter.g": ("str", "identity"),
        "filter.resample": ("bool", False),
        "filter.seed": ("int", None),
    },
    "kalman-check": {
        "kalman.T": ("float", 1.0),
        "kalman.n": ("int", 512),
        "kalman.substeps": ("int", 2),
        "kalman.particles": ("int", 50000),
        "kalman.tolerance": ("float", 0.02),
        "kalman.seed": ("int", None),
    },
}

_SEED_KEY = {
    "converge": "experiment.seed",
    "simulate": "simulate.seed",
    "filter": "filter.seed",
    "kalman-check": "kalman.seed",
}


@dataclass
class RunConfig:
    """Validated, fully-resolved configuration for one subcommand."""

    subcommand: str
    model: str
    model_params: dict[str, float]
    values: dict[str, Any]
    seed: int

    def get(self, key: str) -> Any:
        return self.values[key]

    def echo(self) -> dict[str, str]:
        """Canonical flat mapping; reparses and revalidates to this config."""
        out: dict[str, str] = {"model.preset": self.model}
        for name, value in self.model_params.items():
            out[f"model.{name}"] = _canon(value)
        for key, value in self.values.items():
            out[key] = _canon(value)
        out[_SEED_KEY[self.subcommand]] = str(self.seed)
        return out


def resolve_config(
    subcommand: str,
    raw: Mapping[str, str],
    seed_override: int | None = None,
    env_seed: int | None = None,
) -> RunConfig:
    """Validate raw key/value strings for a subcommand and apply defaults.

    Seed precedence: --seed flag, config seed key, environment fallback, 1.
    """
    if subcommand not in _SCHEMAS:
        raise ConfigError(f"no config schema for subcommand {subcommand!r}")
    schema = _SCHEMAS[subcommand]

    if "model.preset" not in raw:
        raise ConfigError("field model.preset: required")
    model = raw["model.preset"]
    if model not in MODEL_PRESET_PARAMS:
        raise ConfigError(
            f"field model.preset: unknown preset {model!r}; choose from {sorted(MODEL_PRESET_PARAMS)}"
        )
    allowed_model_keys = {f"model.{p}" for p in MODEL_PRESET_PARAMS[model]}

    model_params: dict[str, float] = {}
    values: dict[str, Any] = {}
    config_seed: int | None = None
    for key, value in raw.items():
        if key == "model.preset":
            continue
        if key.startswith("model."):
            if key not in allowed_model_keys:
                raise ConfigError(
                    f"field {key}: unknown parameter for preset {model!r}; "
                    f"allowed: {sorted(allowed_model_keys)}"
                )
            model_params[key.removeprefix("model.")] = _parse_float(key, value)
            continue
        if key not in schema:
            raise ConfigError(f"field {key}: unknown key for subcommand {subcommand!r}")
        type_name, _ = schema[key]
        parsed = _PARSERS[type_name](key, value)
        if key == _SEED_KEY[subcommand]:
            config_seed = parsed
        else:
            values[key] = parsed

    for key, (type_name, default) in schema.items():
        if key == _SEED_KEY[subcommand] or key in values:
            continue
        if default is None:
            raise ConfigError(f"field {key}: required")
        values[key] = default

    if seed_override is not None:
        seed = seed_override
    elif config_seed is not None:
        seed = config_seed
    elif env_seed is not None:
        seed = env_seed
    else:
        seed = 1
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")

    return RunConfig(subcommand, model, model_params, values, seed)


def convergence_config(run: RunConfig) -> ConvergenceConfig:
    """Build the experiment plan from a resolved converge configuration."""
    if run.subcommand != "converge":
        raise ConfigError(f"expected a converge config, got {run.subcommand!r}")
    return ConvergenceConfig(
        model=run.model,
        model_params=tuple(sorted(run.model_params.items())),
        g_names=run.get("experiment.g"),
        horizon=run.get("experiment.T"),
        n_list=run.get("experiment.n_list"),
        n_ref=run.get("experiment.n_ref"),
        p_list=run.get("experiment.p_list"),
        inner_paths=run.get("experiment.M_X"),
        outer_paths=run.get("experiment.M_Y"),
        seed=run.seed,
        normalized=bool(run.get("experiment.normalized")),
        substeps_policy=run.get("experiment.substeps"),
    )
