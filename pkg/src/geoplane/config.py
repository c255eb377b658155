"""Run configuration: ``key = value`` files with command-line overrides."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

from .energy import EnergyParams
from .geodesic import GeodesicWeights
from .pipeline import GraphParams
from .solver import SCHEDULES, SolverConfig


class ConfigError(ValueError):
    pass


def _positive(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit_open(x):
    return 0 < x < 1


def _one_of(*choices):
    def check(x):
        return x in choices

    check.__doc__ = "one of " + ", ".join(choices)
    return check


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_list(s: str) -> tuple:
    s = s.strip()
    if s.startswith("[") and s.endswith("]"):
        s = s[1:-1]
    return tuple(_unquote(x.strip()) for x in s.split(",") if x.strip())


def _unquote(s: str) -> str:
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
        return s[1:-1]
    return s


def _parse_int(s: str) -> int:
    f = float(s)
    if not f.is_integer():
        raise ValueError(f"not an integer: {s!r}")
    return int(f)


def _parse_float(s: str) -> float:
    f = float(s)
    if not math.isfinite(f):
        raise ValueError(f"not finite: {s!r}")
    return f


# key -> (parser, default, constraint or None, constraint text)
KEYS: dict[str, tuple[Callable[[str], Any], Any, Optional[Callable], str]] = {
    "width": (_parse_int, None, lambda x: x >= 1, ">= 1"),
    "height": (_parse_int, None, lambda x: x >= 1, ">= 1"),
    "samples": (str, None, None, ""),
    "edges": (str, None, None, ""),
    "semantics": (str, None, None, ""),
    "image": (str, None, None, ""),
    "gt": (str, None, None, ""),
    "mask": (str, None, None, ""),
    "out_dir": (str, "out", None, ""),
    "units": (str, "depth", _one_of("depth", "inverse-depth"), "depth or inverse-depth"),
    "metric_unit": (str, "inverse-depth", _one_of("depth", "inverse-depth", "disparity"), "depth, inverse-depth or disparity"),
    "w_I": (_parse_float, 20.0, _nonneg, ">= 0"),
    "w_S": (_parse_float, 20.0, _nonneg, ">= 0"),
    "w_D": (_parse_float, 1.0, _positive, "> 0"),
    "N": (_parse_int, 10, lambda x: x >= 1, ">= 1"),
    "D_max": (_parse_float, 1.5, _positive, "> 0"),
    "epsilon": (_parse_float, 1e-3, _unit_open, "in (0, 1)"),
    "w_una": (_parse_float, 1e4, _nonneg, ">= 0"),
    "w_c": (_parse_float, 1.0, _nonneg, ">= 0"),
    "lambda_c": (_parse_float, 1.0, _positive, "> 0"),
    "p_prior": (_parse_float, 0.1, _unit_open, "in (0, 1)"),
    "tau_o": (_parse_float, 0.02, _positive, "> 0"),
    "s_o": (_parse_float, 0.005, _positive, "> 0"),
    "max_iters": (_parse_int, 50, _nonneg, ">= 0"),
    "tol_energy": (_parse_float, 1e-7, _positive, "> 0"),
    "tol_grad": (_parse_float, 1e-6, _nonneg, ">= 0"),
    "schedule": (str, "gauss-seidel", _one_of(*SCHEDULES), " or ".join(SCHEDULES)),
    "mu": (_parse_float, 1e-9, _positive, "> 0"),
    "ground_labels": (_parse_list, (), None, ""),
    "z_max": (_parse_float, 1e4, _positive, "> 0"),
    "stride": (_parse_int, 16, lambda x: x >= 1, ">= 1"),
    "trace": (_parse_bool, True, None, ""),
    "debug_dumps": (_parse_bool, False, None, ""),
}


PATH_KEYS = ("samples", "edges", "semantics", "image", "gt", "mask", "out_dir")


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    @property
    def geodesic_weights(self) -> GeodesicWeights:
        return GeodesicWeights(self.w_I, self.w_S, self.w_D)

    @property
    def graph_params(self) -> GraphParams:
        return GraphParams(self.N, self.D_max, self.epsilon)

    @property
    def energy_params(self) -> EnergyParams:
        return EnergyParams(self.w_una, self.w_c, self.lambda_c, self.p_prior, self.tau_o, self.s_o)

    @property
    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            self.max_iters, self.tol_energy, self.tol_grad, self.schedule, self.mu, self.ground_labels, self.z_max
        )


def _split_line(line: str, where: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"{where}: expected 'key = value'")
    key, value = line.split("=", 1)
    return key.strip(), _unquote(value.strip())


def _strip_comment(line: str) -> str:
    out, quote = [], None
    for ch in line:
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            break
        out.append(ch)
    return "".join(out).strip()


def _coerce(key: str, raw: str, where: str) -> Any:
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    parser, _, check, text = KEYS[key]
    try:
        value = parser(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None
    if check is not None and not check(value):
        raise ConfigError(f"{where}: {key} = {raw} violates constraint ({text})")
    return value


def parse_config(text: str = "", overrides: Iterable[str] = (), source: str = "<config>") -> RunConfig:
    """Documented defaults, then the file's values, then ``key=value`` overrides."""
    values = {k: spec[1] for k, spec in KEYS.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        key, value = _split_line(line, f"{source}:{lineno}")
        values[key] = _coerce(key, value, f"{source}:{lineno}")
    for item in overrides:
        key, value = _split_line(item, "override")
        values[key] = _coerce(key, value, f"override {item!r}")
    return RunConfig(values)


def load_config(path, overrides: Iterable[str] = ()) -> RunConfig:
    if path is None:
        return parse_config("", overrides)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    cfg = parse_config(text, overrides, source=str(p))
    # relative paths written in the file are relative to the file itself
    base = p.resolve().parent
    file_keys = {_split_line(ln, "")[0] for ln in map(_strip_comment, text.splitlines()) if ln}
    over_keys = {_split_line(item, "")[0] for item in overrides}
    for key in PATH_KEYS:
        val = cfg.values.get(key)
        if val and key in file_keys - over_keys and not Path(val).is_absolute():
            cfg.values[key] = str(base / val)
    return cfg
