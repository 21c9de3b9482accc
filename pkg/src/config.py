import copy
from dataclasses import dataclass, field
from typing import Any

import jsonschema

# Run configuration: UTF-8 "key = value" lines, "#" starts a comment. Values
# are coerced by the type the subcommand schema declares for the key, so
# unknown keys stay strings and are rejected by the schema.

subcommands = ("tile", "eig", "harmonic", "mse", "branch", "bifurcate")

default_seed = 20240601


@dataclass(kw_only=True)
class RunConfig:
    subcommand: str
    domain: str = "tetra-face"
    n: int = 3
    h: float = 0.1
    grading: float = 2.0
    refine: int = 2
    count: int = 6
    eig_tolerance: float = 1e-8
    modes: list[str] = field(default_factory=lambda: ["1=1.0"])
    torus_dim: int = 0
    torus_points: int = 8
    period: float = 6.283185307179586
    data: str = "eigen"
    eps: float = 0.1
    tolerance: float = 1e-10
    step: float = 0.25
    max_newton: int = 30
    radii: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.15, 0.2, 0.25, 0.3])
    ray_height: float = 0.5
    fit_window: list[float] = field(default_factory=lambda: [0.05, 0.3])
    grid: int = 21
    warp: str = "cos"
    lam_min: float = 1.3
    lam_max: float = 1.8
    scan_step: float = 0.02
    arc_step: float = 0.02
    output: str = "."
    seed: int = default_seed
    verbose: bool = False
    xlsx: str | None = None
    workers: int = 1


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw key/value pairs of a configuration file; later keys override earlier ones."""
    entries: dict[str, str] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if content == "":
            continue
        key, separator, value = content.partition("=")
        key = key.strip()
        if separator == "" or key == "":
            raise ConfigSyntaxError(source, line_number, line)
        entries[key] = value.strip()
    return entries


def load_config(
    path: str | None,
    overrides: dict[str, str] | None = None,
    subcommand: str | None = None,
) -> RunConfig:
    """Merge subcommand defaults, the config file and command-line overrides, then validate."""
    raw: dict[str, str] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigFileError(path, e.strerror or str(e)) from e
        raw = parse_config_text(text, path)
        if len(raw) == 0 and not overrides:
            raise EmptyConfigError(path)
    raw.update(overrides or {})
    subcommand = raw.pop("subcommand", subcommand)
    if subcommand is None:
        raise MissingSubcommandError()
    if subcommand not in subcommands:
        raise UnknownSubcommandError(subcommand)

    schema = config_schema(subcommand)
    values = copy.deepcopy(_subcommand_defaults.get(subcommand, {}))
    for key, text in raw.items():
        values[key] = coerce_value(key, text, schema["properties"].get(key))
    try:
        jsonschema.validate(values, schema)
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or "config"
        raise InvalidConfigError(where, e.message) from e
    run_config = RunConfig(subcommand=subcommand, **values)
    if subcommand == "bifurcate" and run_config.lam_min >= run_config.lam_max:
        raise InvalidConfigError("lam_min", "lam_min must be below lam_max")
    if subcommand == "branch" and not run_config.fit_window[0] < run_config.fit_window[1]:
        raise InvalidConfigError("fit_window", "the window must be increasing")
    return run_config


def coerce_value(key: str, text: str, schema: dict[str, Any] | None) -> Any:
    if schema is None:
        return text
    match schema.get("type"):
        case "integer":
            try:
                return int(text)
            except ValueError as e:
                raise InvalidConfigError(key, f"{repr(text)} is not an integer") from e
        case "number":
            try:
                return float(text)
            except ValueError as e:
                raise InvalidConfigError(key, f"{repr(text)} is not a number") from e
        case "boolean":
            lowered = text.lower()
            if lowered in _true_words:
                return True
            if lowered in _false_words:
                return False
            raise InvalidConfigError(key, f"{repr(text)} is not a boolean")
        case "array":
            items = [item.strip() for item in text.split(",") if item.strip() != ""]
            return [coerce_value(key, item, schema.get("items")) for item in items]
        case _:
            return text


def config_schema(subcommand: str) -> dict[str, Any]:
    properties = dict(_common_properties)
    for group in _subcommand_groups[subcommand]:
        properties.update(group)
    return {
        "type": "object",
        "properties": properties,
        "additionalProperties": False,
    }


_true_words = {"true", "yes", "on", "1"}
_false_words = {"false", "no", "off", "0"}

_positive = {"type": "number", "exclusiveMinimum": 0}

_common_properties = {
    "output": {"type": "string", "minLength": 1},
    "seed": {"type": "integer", "minimum": 0},
    "verbose": {"type": "boolean"},
    "xlsx": {"type": "string", "minLength": 1},
    "workers": {"type": "integer", "minimum": 1},
}

_mesh_properties = {
    "domain": {"enum": ["tetra-face", "hemisphere"]},
    "h": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
    "grading": {"type": "number", "minimum": 1},
    "refine": {"type": "integer", "minimum": 0, "maximum": 6},
}

_eigen_properties = {
    "count": {"type": "integer", "minimum": 1, "maximum": 50},
    "eig_tolerance": _positive,
}

_tile_properties = {
    "domain": {"enum": ["simplex", "hemisphere"]},
    "n": {"type": "integer", "minimum": 2, "maximum": 5},
}

_harmonic_properties = {
    "modes": {
        "type": "array",
        "items": {
            "type": "string",
            "pattern": r"^[1-9][0-9]*(@-?[0-9]+( +-?[0-9]+)*)?=[-+0-9.eE]+$",
        },
    },
    "torus_dim": {"type": "integer", "minimum": 0, "maximum": 3},
    "torus_points": {"type": "integer", "minimum": 1, "maximum": 64},
    "period": _positive,
}

_mse_properties = {
    "data": {"enum": ["eigen", "affine"]},
    "eps": {"type": "number"},
    "tolerance": _positive,
    "step": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "max_newton": {"type": "integer", "minimum": 1},
}

_branch_properties = {
    "radii": {"type": "array", "minItems": 2, "items": _positive},
    "ray_height": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "fit_window": {"type": "array", "minItems": 2, "maxItems": 2, "items": _positive},
    "grid": {"type": "integer", "minimum": 2, "maximum": 101},
}

_bifurcate_properties = {
    "warp": {"type": "string", "minLength": 1},
    "n": {"type": "integer", "minimum": 1, "maximum": 2},
    "lam_min": {"type": "number", "minimum": 0},
    "lam_max": _positive,
    "scan_step": _positive,
    "arc_step": _positive,
    "tolerance": _positive,
    "count": {"type": "integer", "minimum": 1, "maximum": 50},
}

_subcommand_groups = {
    "tile": [_tile_properties],
    "eig": [_mesh_properties, _eigen_properties],
    "harmonic": [_mesh_properties, _eigen_properties, _harmonic_properties],
    "mse": [_mesh_properties, _eigen_properties, _mse_properties],
    "branch": [_mesh_properties, _eigen_properties, _mse_properties, _branch_properties],
    "bifurcate": [_mesh_properties, _bifurcate_properties],
}

_subcommand_defaults: dict[str, dict[str, Any]] = {
    "tile": {"domain": "simplex", "n": 3},
    "eig": {"refine": 2},
    "harmonic": {"h": 0.15, "refine": 0, "count": 3},
    "mse": {"h": 0.15, "refine": 0, "count": 1, "tolerance": 1e-10},
    "branch": {"h": 0.15, "refine": 0, "count": 1, "tolerance": 1e-10},
    "bifurcate": {"n": 1, "h": 0.02, "refine": 0, "count": 2},
}


class Error(Exception):
    pass


class ConfigSyntaxError(Error):
    def __init__(self, source: str, line_number: int, line: str) -> None:
        super().__init__(f"{source}:{line_number}: expected 'key = value', got {repr(line)}")


class ConfigFileError(Error):
    def __init__(self, path: str, description: str) -> None:
        super().__init__(f"cannot read config file {repr(path)}: {description}")


class EmptyConfigError(Error):
    def __init__(self, path: str) -> None:
        super().__init__(f"config file {repr(path)} has no entries")


class MissingSubcommandError(Error):
    def __init__(self) -> None:
        super().__init__("no subcommand given")


class UnknownSubcommandError(Error):
    def __init__(self, subcommand: str) -> None:
        super().__init__(f"unknown subcommand {repr(subcommand)}")


class InvalidConfigError(Error):
    def __init__(self, key: str, description: str) -> None:
        super().__init__(f"invalid value for {repr(key)}: {description}")
