"""Flat, typed configuration with dotted keys.

Files may be plain ``key = value`` lines (dotted keys allowed) or INI
sections, where ``[shape]`` / ``kind = disc`` means ``shape.kind``.
Precedence is defaults < config file < command-line overrides.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from typing import Any, Callable, Mapping

from .dynamics import PhysicalParams
from .learning import SamplingSpec, TrainConfig
from .mpc import MpcConfig, case_a_config, case_b_config


class ConfigError(ValueError):
    pass


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return float(text)


def _case(text) -> str:
    s = str(text).strip().lower()
    if s not in ("a", "b"):
        raise ValueError("case must be 'a' (point pusher) or 'b' (line pusher)")
    return s


def _str(text) -> str:
    return str(text).strip()


@dataclass(frozen=True)
class Key:
    parse: Callable[[Any], Any]
    default: Any
    default_b: Any = None


_A, _B = case_a_config(), case_b_config()

SCHEMA: dict[str, Key] = {
    "case": Key(_case, "a"),
    "seed": Key(int, 0),
    "mu_p": Key(float, 0.3),
    "mu_g": Key(float, 0.35),
    "mass": Key(float, 0.827),
    "shape.kind": Key(_str, "disc", "square"),
    "shape.radius": Key(float, 0.045),
    "shape.side": Key(float, 0.09),
    "pusher.kind": Key(_str, "point", "line"),
    "pusher.width": Key(float, 0.03),
    "limit_surface.k": Key(_opt_float, None),
    "mpc.h": Key(float, _A.h, _B.h),
    "mpc.horizon": Key(int, _A.N, _B.N),
    "mpc.q": Key(_floats, _A.q, _B.q),
    "mpc.q_n": Key(_floats, _A.q_n, _B.q_n),
    "mpc.r": Key(_floats, _A.r, _B.r),
    "mpc.w": Key(_floats, _A.w, _B.w),
    "mpc.segments": Key(_ints, _A.segments, _B.segments),
    "trajectory.radius": Key(float, 0.15),
    "trajectory.speed": Key(float, 0.05),
    "trajectory.period": Key(float, 0.01),
    "sampling.std": Key(_floats, (0.03, 0.03, 0.4, 0.025), (0.03, 0.03, 0.4, 0.01)),
    "sampling.count": Key(int, 30000),
    "sampling.start": Key(int, 0),
    "sampling.stop": Key(lambda v: None if str(v).strip().lower() in ("", "none") else int(v), None),
    "sampling.origin": Key(_bool, True),
    "train.epochs": Key(int, 50),
    "train.lr": Key(float, 1e-3),
    "train.batch": Key(int, 256),
    "train.val_fraction": Key(float, 1 / 3),
    "train.class_weights": Key(_bool, False),
    "sim.controller": Key(_str, "learned"),
    "sim.laps": Key(float, 1.0),
    "sim.duration": Key(_opt_float, None),
    "sim.plant_step": Key(float, 0.001),
    "sim.controller_period": Key(float, 0.01),
    "sim.mu_g_offset": Key(float, 0.10),
    "sim.initial_error": Key(_floats, (0.0, 0.0, 0.0, 0.0)),
    "sim.perturbations": Key(_str, ""),
    "sim.sensor_noise": Key(float, 0.0),
    "sim.timing": Key(_bool, False),
    "bench.trials": Key(int, 100),
    "bench.enumerate_checks": Key(int, 5),
    "bench.warmup": Key(int, 5),
    "map.ex": Key(_str, "-0.06:0.06:25"),
    "map.ey": Key(_str, "-0.06:0.06:25"),
    "map.etheta_deg": Key(float, 5.0),
    "map.ephi_deg": Key(float, 0.0),
}


def read_config_text(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[__root__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {' '.join(str(exc).split())}") from None
    out: dict[str, str] = {}
    for section in parser.sections():
        prefix = "" if section == "__root__" else section.strip() + "."
        for k, v in parser.items(section):
            out[prefix + k.strip()] = v
    return out


def read_config_file(path) -> dict[str, str]:
    try:
        with open(path) as fh:
            return read_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def parse_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    k, v = item.split("=", 1)
    return k.strip(), v.strip()


def resolve(*layers: Mapping[str, Any]) -> dict[str, Any]:
    """Merge raw layers over the defaults and type-check every key."""
    raw: dict[str, Any] = {}
    for layer in layers:
        for k, v in layer.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            raw[k] = v
    try:
        case = _case(raw.get("case", "a"))
    except ValueError as exc:
        raise ConfigError(f"bad value for case: {exc}") from None
    out: dict[str, Any] = {}
    for k, spec in SCHEMA.items():
        if k in raw:
            try:
                out[k] = spec.parse(raw[k])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {k}: {exc}") from None
        else:
            out[k] = spec.default_b if case == "b" and spec.default_b is not None else spec.default
    if out["mpc.horizon"] != sum(out["mpc.segments"]):
        raise ConfigError("mpc.horizon must equal the sum of mpc.segments")
    return out


def to_jsonable(cfg: Mapping[str, Any]) -> dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


# --------------------------------------------------------------------------
# typed views

def physical_params(cfg: Mapping[str, Any]) -> PhysicalParams:
    return PhysicalParams(mu_p=cfg["mu_p"], mu_g=cfg["mu_g"], mass=cfg["mass"],
                          shape_kind=cfg["shape.kind"], radius=cfg["shape.radius"], side=cfg["shape.side"],
                          pusher_kind=cfg["pusher.kind"], pusher_width=cfg["pusher.width"],
                          k=cfg["limit_surface.k"])


def mpc_config(cfg: Mapping[str, Any]) -> MpcConfig:
    return MpcConfig(h=cfg["mpc.h"], q=cfg["mpc.q"], q_n=cfg["mpc.q_n"], r=cfg["mpc.r"],
                     w=cfg["mpc.w"], segments=cfg["mpc.segments"])


def sampling_spec(cfg: Mapping[str, Any]) -> SamplingSpec:
    return SamplingSpec(std=cfg["sampling.std"], count=cfg["sampling.count"], seed=cfg["seed"],
                        include_origin=cfg["sampling.origin"])


def train_config(cfg: Mapping[str, Any]) -> TrainConfig:
    return TrainConfig(learning_rate=cfg["train.lr"], batch_size=cfg["train.batch"],
                       epochs=cfg["train.epochs"], seed=cfg["seed"], class_weights=cfg["train.class_weights"])


def parse_range(text: str) -> list[float]:
    """``lo:hi:n`` -> n evenly spaced values (endpoints included)."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"grid range {text!r} must be lo:hi:n")
    lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    if n < 1 or not (math.isfinite(lo) and math.isfinite(hi)):
        raise ConfigError(f"grid range {text!r} needs finite bounds and n >= 1")
    if n == 1:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def parse_perturbations(text: str) -> list[tuple[float, float]]:
    """``t:magnitude;t:magnitude`` lateral displacements."""
    out = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        try:
            t, mag = item.split(":")
            out.append((float(t), float(mag)))
        except ValueError:
            raise ConfigError(f"perturbation {item!r} must be time:magnitude") from None
    return out
