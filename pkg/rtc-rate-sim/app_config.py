#!/usr/bin/env python3
import json
import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Iterator, Mapping, Optional, Tuple

from flask import Config
from jinja2 import Template

from args_helper import FieldError
from cca import Algorithm, CcaConfig
from controller import ControllerConfig
from encoder import PRESETS as ENCODER_PRESETS
from encoder import EncoderConfig
from engine import SimConfig, Source
from link import PRESETS as LINK_PRESETS
from link import LinkKind, LinkModel, load_trace
from transport import DummyPolicy

logger = logging.getLogger(__name__)

ENV_PREFIX = "RTCSIM"
NAMESPACES = (
    "LINK",
    "CCA",
    "PACER",
    "DUMMY",
    "ENCODER",
    "CONTROLLER",
    "ENGINE",
    "EXPERIMENT",
)

# switches turned off by each ablation mode:
# (dummy traffic, latency safeguard, bitrate selection)
ABLATIONS = {
    "full": (True, True, True),
    "copa_only": (False, False, False),
    "no_dummy": (False, True, True),
    "no_latency": (True, False, True),
    "no_bitrate_selection": (True, True, False),
}

CONFIG_TEMPLATE = r"""{% for name, value in top -%}
{{ name | lower }} = {{ toml(value) }}
{% endfor -%}
{% for namespace, items in tables %}
[{{ namespace | lower }}]
{% for name, value in items -%}
{{ name | lower }} = {{ toml(value) }}
{% endfor -%}
{% endfor -%}"""


class ConfigException(BaseException):
    pass


def set_defaults(config: Config) -> None:
    # Keys are the dotted names upper-cased: link.owd_ms is LINK_OWD_MS
    # None means "unset" and is never written to snapshots
    config["SEED"] = 0
    config["DURATION_S"] = 120.0
    config["SOURCE"] = Source.VIDEO.value
    config["EVENT_LOG"] = False
    config["ABLATION"] = "full"

    config["LINK_KIND"] = LinkKind.TRACE_DRIVEN.value
    config["LINK_TRACE_PATH"] = None
    config["LINK_PRESET"] = None
    config["LINK_SEGMENTS"] = None
    config["LINK_MEAN_RATE_BPS"] = None
    config["LINK_OWD_MS"] = 25.0
    config["LINK_BUFFER_BYTES"] = None
    config["LINK_MTU"] = 1500
    config["LINK_LOSS_PROB"] = 0.0
    config["LINK_SHARE_OPPORTUNITIES"] = False

    config["CCA_ALGORITHM"] = Algorithm.COPA.value
    config["CCA_COPA_DELTA"] = 0.5
    config["CCA_ROCC_GAMMA"] = 0.5
    config["CCA_ROCC_HEADROOM_MTU"] = 4.0
    config["CCA_INITIAL_RATE_BPS"] = 300e3
    config["CCA_INITIAL_CWND_MTU"] = 10.0
    config["CCA_RTT_MIN_WINDOW_S"] = 10.0
    config["CCA_SRTT_GAIN"] = 0.125
    config["CCA_APP_LIMITED_HEADROOM_MTU"] = 3.0

    config["PACER_MTU"] = 1500

    config["DUMMY_ENABLED"] = True
    config["DUMMY_MAX_SIZE_BYTES"] = 200
    config["DUMMY_FRAME_ETA_FRACTION"] = 0.25
    config["DUMMY_MAX_VIDEO_BITRATE_BPS"] = 12e6

    config["ENCODER_PRESET"] = "low_motion"
    config["ENCODER_FPS"] = 30.0
    config["ENCODER_LAG_UP_S"] = 0.9
    config["ENCODER_LAG_DOWN_S"] = 0.45
    config["ENCODER_NOISE_CV"] = None
    config["ENCODER_FILL_RATIO"] = None
    config["ENCODER_MIN_FRAME_BYTES"] = 100

    config["CONTROLLER_LAMBDA"] = 0.9
    config["CONTROLLER_P_MS"] = 33.0
    config["CONTROLLER_T_S"] = 1.0
    config["CONTROLLER_TAU_MS"] = 33.0
    config["CONTROLLER_EWMA_WEIGHT"] = 0.5
    config["CONTROLLER_ALPHA_FLOOR"] = 0.1
    config["CONTROLLER_BITRATE_SELECTION_ENABLED"] = True
    config["CONTROLLER_SAFEGUARD_ENABLED"] = True

    config["ENGINE_LOSS_TIMEOUT_SRTT"] = 4.0

    config["EXPERIMENT_SWEEP_CAP"] = 256
    config["EXPERIMENT_JOBS"] = 1


def default_config() -> Config:
    config = Config(Path.cwd())
    set_defaults(config)
    return config


DEFAULTS = default_config()
DEFAULT_KEYS = frozenset(DEFAULTS)


def flatten(table: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    "[link] owd_ms = 25 becomes LINK_OWD_MS, [cca.copa] delta becomes CCA_COPA_DELTA"
    flat = {}
    for name, value in table.items():
        key = f"{prefix}_{name}" if prefix else name
        if isinstance(value, dict):
            flat.update(flatten(value, key))
        else:
            flat[key.replace(".", "_").replace("-", "_").upper()] = value
    return flat


def load_toml(file) -> Dict[str, Any]:
    return flatten(tomllib.load(file))


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false"):
                    raise ValueError(f"'{value}' is not a boolean")
                return value.lower() == "true"
            if not isinstance(value, bool):
                raise ValueError(f"'{value}' is not a boolean")
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError(f"'{value}' is not an integer")
            return int(float(value))
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError(f"'{value}' is not a number")
            return float(value)
        if key == "LINK_SEGMENTS":
            if isinstance(value, str):
                value = json.loads(value)
            return [(float(duration), float(rate)) for duration, rate in value]
        if key == "LINK_BUFFER_BYTES":
            return int(value)
        if key in ("LINK_MEAN_RATE_BPS", "ENCODER_NOISE_CV", "ENCODER_FILL_RATIO"):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigException(f"{key} has an invalid value {value!r}: {exc}") from exc


def check_config(config: Config) -> None:
    unknown = sorted(key for key in config if key not in DEFAULT_KEYS)
    if unknown:
        raise ConfigException(f"unknown configuration keys: {', '.join(unknown)}")
    for key in DEFAULT_KEYS:
        config[key] = _coerce(key, config[key])

    if config["ABLATION"] not in ABLATIONS:
        raise ConfigException(
            f"ABLATION must be one of {', '.join(ABLATIONS)}, not {config['ABLATION']}"
        )
    if config["ENCODER_PRESET"] not in ENCODER_PRESETS:
        raise ConfigException(
            f"ENCODER_PRESET must be one of {', '.join(ENCODER_PRESETS)}"
        )
    preset = config["LINK_PRESET"]
    if preset is not None and preset not in LINK_PRESETS:
        raise ConfigException(f"LINK_PRESET must be one of {', '.join(LINK_PRESETS)}")
    for key, enum in (
        ("SOURCE", Source),
        ("LINK_KIND", LinkKind),
        ("CCA_ALGORITHM", Algorithm),
    ):
        values = [member.value for member in enum]
        if config[key] not in values:
            raise ConfigException(f"{key} must be one of {', '.join(values)}")
    if config["EXPERIMENT_SWEEP_CAP"] < 1:
        raise ConfigException("EXPERIMENT_SWEEP_CAP must be >= 1")
    if config["EXPERIMENT_JOBS"] < 1:
        raise ConfigException("EXPERIMENT_JOBS must be >= 1")


def apply_ablation(config: Config) -> None:
    mode = config["ABLATION"]
    if mode == "full":
        return
    dummy, safeguard, selection = ABLATIONS[mode]
    config["DUMMY_ENABLED"] = dummy
    config["CONTROLLER_SAFEGUARD_ENABLED"] = safeguard
    config["CONTROLLER_BITRATE_SELECTION_ENABLED"] = selection


def load_config(
    path: Optional[Path] = None,
    overrides: Optional[Dict[str, Any]] = None,
    env_prefix: str = ENV_PREFIX,
    ablate: bool = True,
) -> Config:
    """Defaults, then the TOML file, then RTCSIM_* environment, then overrides.
    Sweeps keep ablate=False and apply the ablation per point"""
    config = default_config()
    if path is not None:
        try:
            config.from_file(str(Path(path).absolute()), load=load_toml, text=False)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigException(f"cannot load config {path}: {exc}") from exc
    config.from_prefixed_env(env_prefix)
    if overrides:
        config.update(overrides)
    check_config(config)
    if ablate:
        apply_ablation(config)
    return config


def config_from_settings(settings: Mapping[str, Any]) -> Config:
    config = default_config()
    config.update(settings)
    check_config(config)
    apply_ablation(config)
    return config


# dataclass fields fed from a key outside of their namespace
FIELD_KEYS = {
    ("", "loss_timeout_srtt"): "ENGINE_LOSS_TIMEOUT_SRTT",
    ("CCA_", "mtu"): "PACER_MTU",
    ("DUMMY_", "mtu"): "PACER_MTU",
    ("ENCODER_", "max_video_bitrate_bps"): "DUMMY_MAX_VIDEO_BITRATE_BPS",
}


def _build(key_prefix: str, factory, *args, **kwargs):
    try:
        return factory(*args, **kwargs)
    except FieldError as exc:
        key = FIELD_KEYS.get(
            (key_prefix, exc.field), f"{key_prefix}{exc.field.upper()}"
        )
        raise ConfigException(f"{key} {exc.message}") from exc


def build_link(config: Config, trace: Optional[Path] = None) -> LinkModel:
    link = config.get_namespace("LINK_")
    kind = LinkKind(link["kind"])
    if link["preset"] is not None or (trace is None and link["segments"] is not None):
        kind = LinkKind.PIECEWISE_CONSTANT
    if trace is not None:
        kind = LinkKind.TRACE_DRIVEN

    common = dict(
        owd_ms=link["owd_ms"],
        buffer_bytes=link["buffer_bytes"],
        mtu=link["mtu"],
        loss_prob=link["loss_prob"],
        share_opportunities=link["share_opportunities"],
    )
    if kind == LinkKind.TRACE_DRIVEN:
        path = trace if trace is not None else link["trace_path"]
        if path is None:
            raise ConfigException("LINK_TRACE_PATH is required for a trace link")
        model = _build(
            "LINK_", load_trace, path=Path(path), mtu=common["mtu"],
            owd_ms=common["owd_ms"], buffer_bytes=common["buffer_bytes"],
        )
        return _build(
            "LINK_", replace, model, loss_prob=common["loss_prob"],
            share_opportunities=common["share_opportunities"],
        )
    if kind == LinkKind.PIECEWISE_CONSTANT:
        if link["preset"] is not None:
            segments = LINK_PRESETS[link["preset"]]
        elif link["segments"] is not None:
            segments = tuple(tuple(segment) for segment in link["segments"])
        else:
            raise ConfigException("LINK_SEGMENTS or LINK_PRESET is required")
        return _build("LINK_", LinkModel, kind=kind, segments=segments, **common)
    if link["mean_rate_bps"] is None:
        raise ConfigException("LINK_MEAN_RATE_BPS is required for a poisson link")
    return _build(
        "LINK_", LinkModel, kind=kind, mean_rate_bps=link["mean_rate_bps"], **common
    )


def build_components(config: Config) -> Dict[str, Any]:
    "Everything of a SimConfig except the link"
    cca = config.get_namespace("CCA_")
    cca_config = _build(
        "CCA_",
        CcaConfig,
        algorithm=Algorithm(cca["algorithm"]),
        mtu=config["PACER_MTU"],
        copa_delta=cca["copa_delta"],
        rocc_gamma=cca["rocc_gamma"],
        rocc_headroom_mtu=cca["rocc_headroom_mtu"],
        initial_rate_bps=cca["initial_rate_bps"],
        initial_cwnd_mtu=cca["initial_cwnd_mtu"],
        rtt_min_window_s=cca["rtt_min_window_s"],
        srtt_gain=cca["srtt_gain"],
        app_limited_headroom_mtu=cca["app_limited_headroom_mtu"],
    )
    dummy = config.get_namespace("DUMMY_")
    dummy_policy = _build(
        "DUMMY_",
        DummyPolicy,
        enabled=dummy["enabled"],
        max_size_bytes=dummy["max_size_bytes"],
        frame_eta_fraction=dummy["frame_eta_fraction"],
        max_video_bitrate_bps=dummy["max_video_bitrate_bps"],
        mtu=config["PACER_MTU"],
    )
    encoder = config.get_namespace("ENCODER_")
    preset = ENCODER_PRESETS[encoder["preset"]]
    noise_cv, fill_ratio = encoder["noise_cv"], encoder["fill_ratio"]
    encoder_config = _build(
        "ENCODER_",
        EncoderConfig,
        fps=encoder["fps"],
        lag_up_s=encoder["lag_up_s"],
        lag_down_s=encoder["lag_down_s"],
        noise_cv=preset["noise_cv"] if noise_cv is None else noise_cv,
        fill_ratio=preset["fill_ratio"] if fill_ratio is None else fill_ratio,
        min_frame_bytes=encoder["min_frame_bytes"],
        max_video_bitrate_bps=dummy["max_video_bitrate_bps"],
    )
    controller = config.get_namespace("CONTROLLER_")
    controller_config = _build(
        "CONTROLLER_",
        ControllerConfig,
        lam=controller["lambda"],
        p_ms=controller["p_ms"],
        t_s=controller["t_s"],
        tau_ms=controller["tau_ms"],
        ewma_weight=controller["ewma_weight"],
        alpha_floor=controller["alpha_floor"],
        bitrate_selection_enabled=controller["bitrate_selection_enabled"],
        safeguard_enabled=controller["safeguard_enabled"],
    )
    return dict(
        duration_s=config["DURATION_S"],
        seed=config["SEED"],
        source=Source(config["SOURCE"]),
        cca=cca_config,
        encoder=encoder_config,
        controller=controller_config,
        dummy=dummy_policy,
        pacer_mtu=config["PACER_MTU"],
        loss_timeout_srtt=config["ENGINE_LOSS_TIMEOUT_SRTT"],
        event_log=config["EVENT_LOG"],
    )


def build_sim_config(config: Config, trace: Optional[Path] = None) -> SimConfig:
    link = build_link(config, trace)
    return _build("", SimConfig, link=link, **build_components(config))


def validate_config(config: Config) -> None:
    """Raise ConfigException for invalid component settings. Trace links are
    not loaded here, a missing trace fails its own run only"""
    build_components(config)
    link = config.get_namespace("LINK_")
    if link["kind"] != LinkKind.TRACE_DRIVEN.value or link["preset"] or link["segments"]:
        build_link(config)
    checks = (
        ("DURATION_S", config["DURATION_S"] > 0, "must be > 0"),
        ("SEED", config["SEED"] >= 0, "must be >= 0"),
        ("ENGINE_LOSS_TIMEOUT_SRTT", config["ENGINE_LOSS_TIMEOUT_SRTT"] > 0, "must be > 0"),
    )
    for key, valid, message in checks:
        if not valid:
            raise ConfigException(f"{key} {message}")


def toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(toml_value(item) for item in value) + "]"
    return json.dumps(str(value))


def _split(config: Config) -> Tuple[list, list]:
    top = []
    tables = {}  # type: Dict[str, list]
    for key in sorted(config):
        value = config[key]
        if value is None:
            continue
        namespace = next((ns for ns in NAMESPACES if key.startswith(ns + "_")), None)
        if namespace is None:
            top.append((key, value))
        else:
            tables.setdefault(namespace, []).append((key[len(namespace) + 1 :], value))
    ordered = [(ns, tables[ns]) for ns in NAMESPACES if ns in tables]
    return top, ordered


def render_config(config: Config) -> str:
    "A TOML snapshot that load_config() turns back into the same settings"
    top, tables = _split(config)
    return Template(CONFIG_TEMPLATE).render(top=top, tables=tables, toml=toml_value)


def iter_overrides(config: Config) -> Iterator[Tuple[str, Any]]:
    "Settings that differ from the defaults"
    for key in sorted(config):
        if config[key] != DEFAULTS.get(key):
            yield key, config[key]
