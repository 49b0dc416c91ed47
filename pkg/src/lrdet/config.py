"""Run configuration: flat dotted keys, profiles, env and flag overrides.

Config files are plain text, one `key = value` per line, `#` comments.
Values are typed by the key registry below. Precedence, lowest to
highest: built-in defaults, the selected profile, the config file,
environment variables, command-line flags. Environment overrides use
the prefix LRDET_ with dots spelled as double underscores, e.g.
LRDET_MODEL__NUM_HEADS=8 sets model.num_heads. (LRDET_KERNELS is the
kernel-backend selector, not a config key.)
"""

import os

from .data import DataConfig
from .decoder import ModelConfig
from .errors import ContractError
from .matching import LossWeights

_RESERVED_ENV = {"LRDET_KERNELS"}


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _unit(v):
    return 0 <= v <= 1


# key: (type, default, validator or None, choices or None)
REGISTRY = {
    "profile": (str, "mini", None, ("mini", "paper")),
    "seed": (int, 0, _non_negative, None),
    "out": (str, "out", None, None),
    "deterministic": (bool, False, None, None),
    "model.num_stages": (int, 2, _positive, None),
    "model.num_queries": (int, 20, _positive, None),
    "model.dim": (int, 64, _positive, None),
    "model.num_heads": (int, 4, _positive, None),
    "model.num_points": (int, 8, _positive, None),
    "model.num_levels": (int, 3, lambda v: 1 <= v <= 3, None),
    "model.ffn_expansion": (float, 4.0, _positive, None),
    "model.mixer_order": (str, "channel_point", None,
                          ("channel_point", "point_channel")),
    "model.epsilon_mode": (str, "single", None, ("single", "multiple")),
    "model.epsilon": (float, 0.1, _unit, None),
    "model.sigma": (float, 1e-7, _positive, None),
    "model.bias_only": (bool, False, None, None),
    "model.look_back": (bool, True, None, None),
    "model.local_sampling": (bool, True, None, None),
    "data.canvas": (int, 64, _positive, None),
    "data.num_classes": (int, 3, lambda v: 1 <= v <= 3, None),
    "data.max_objects": (int, 4, _positive, None),
    "data.min_size": (int, 5, _positive, None),
    "data.max_size": (int, 40, _positive, None),
    "data.crowding_cap": (float, 0.3, lambda v: 0 < v <= 1, None),
    "data.crowded": (bool, False, None, None),
    "data.train_scenes": (int, 2000, _positive, None),
    "data.eval_scenes": (int, 200, _positive, None),
    "train.steps": (int, 2400, _positive, None),
    "train.batch_size": (int, 8, _positive, None),
    "train.lr": (float, 1e-4, _positive, None),
    "train.weight_decay": (float, 1e-4, _non_negative, None),
    "train.grad_clip": (float, 0.1, _non_negative, None),
    "train.warmup": (int, 100, _non_negative, None),
    "train.lr_schedule": (str, "step", None, ("constant", "step")),
    "train.eval_every": (int, 0, _non_negative, None),
    "train.log_every": (int, 50, _positive, None),
    "train.checkpoint_every": (int, 0, _non_negative, None),
    "train.workers": (int, 1, _positive, None),
    "loss.lambda_cls": (float, 2.0, _non_negative, None),
    "loss.lambda_l1": (float, 5.0, _non_negative, None),
    "loss.lambda_giou": (float, 2.0, _non_negative, None),
    "loss.focal_alpha": (float, 0.25, lambda v: 0 < v < 1, None),
    "loss.focal_gamma": (float, 2.0, _non_negative, None),
    "eval.max_detections": (int, 100, _positive, None),
}

PROFILES = {
    "mini": {},  # the registry defaults are the mini profile
    "paper": {
        "model.num_stages": 6,
        "model.num_queries": 100,
        "model.dim": 256,
        "model.num_heads": 4,
        "model.num_points": 32,
        "model.epsilon_mode": "multiple",
        "train.lr": 2.5e-5,
        "train.steps": 90000,
        "train.log_every": 200,
    },
}


def _parse_value(key, raw):
    typ = REGISTRY[key][0]
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ContractError(f"config key {key}: expected a boolean, got {raw!r}")
    if typ is int:
        try:
            return int(raw)
        except ValueError:
            raise ContractError(f"config key {key}: expected an integer, got {raw!r}")
    if typ is float:
        try:
            return float(raw)
        except ValueError:
            raise ContractError(f"config key {key}: expected a number, got {raw!r}")
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "'\"":
        raw = raw[1:-1]
    return raw


def parse_config_file(path):
    raw = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
    return raw


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith("LRDET_") or name in _RESERVED_ENV:
            continue
        key = name[len("LRDET_"):].lower().replace("__", ".")
        if key not in REGISTRY:
            raise ContractError(
                f"unknown config key {key!r} (from environment {name})"
            )
        out[key] = value
    return out


class RunConfig:
    def __init__(self, values):
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def echo(self):
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def model_config(self):
        return ModelConfig(
            num_stages=self["model.num_stages"],
            num_queries=self["model.num_queries"],
            dim=self["model.dim"],
            num_heads=self["model.num_heads"],
            num_points=self["model.num_points"],
            num_levels=self["model.num_levels"],
            num_classes=self["data.num_classes"],
            ffn_expansion=self["model.ffn_expansion"],
            mixer_order=self["model.mixer_order"],
            epsilon_mode=self["model.epsilon_mode"],
            epsilon=self["model.epsilon"],
            sigma=self["model.sigma"],
            bias_only=self["model.bias_only"],
            look_back=self["model.look_back"],
            local_sampling=self["model.local_sampling"],
        )

    def data_config(self, crowded=None):
        return DataConfig(
            canvas=self["data.canvas"],
            num_classes=self["data.num_classes"],
            max_objects=self["data.max_objects"],
            min_size=self["data.min_size"],
            max_size=self["data.max_size"],
            crowding_cap=self["data.crowding_cap"],
            crowded=self["data.crowded"] if crowded is None else crowded,
        )

    def loss_weights(self):
        return LossWeights(
            lambda_cls=self["loss.lambda_cls"],
            lambda_l1=self["loss.lambda_l1"],
            lambda_giou=self["loss.lambda_giou"],
            focal_alpha=self["loss.focal_alpha"],
            focal_gamma=self["loss.focal_gamma"],
        )


def _cross_validate(values):
    checks = [
        ("model.num_heads", values["model.dim"] % values["model.num_heads"] == 0,
         "model.dim must be divisible by model.num_heads"),
        ("model.epsilon_mode",
         values["model.epsilon_mode"] != "multiple" or values["model.num_stages"] >= 3,
         "multiple-epsilon schedule needs model.num_stages >= 3"),
        ("data.canvas",
         values["data.canvas"] % (4 * 2 ** (values["model.num_levels"] - 1)) == 0,
         "data.canvas must be divisible by the largest pyramid stride"),
        ("data.max_size", values["data.min_size"] <= values["data.max_size"],
         "data.min_size must not exceed data.max_size"),
        ("data.max_size", values["data.max_size"] < values["data.canvas"],
         "objects must fit inside the canvas"),
        ("data.max_objects",
         not values["data.crowded"] or values["data.max_objects"] >= 2,
         "crowded scenes need data.max_objects >= 2"),
        ("loss.lambda_cls",
         values["loss.lambda_cls"] + values["loss.lambda_l1"]
         + values["loss.lambda_giou"] > 0,
         "at least one loss weight must be positive"),
    ]
    for key, ok, msg in checks:
        if not ok:
            raise ContractError(f"config key {key}: {msg}")


def build_config(config_path=None, flag_overrides=None, environ=None):
    """Assemble and validate the effective configuration."""
    file_raw = parse_config_file(config_path) if config_path else {}
    env_raw = env_overrides(environ)
    flags = dict(flag_overrides or {})

    for key in list(file_raw) + list(env_raw) + list(flags):
        if key not in REGISTRY:
            raise ContractError(f"unknown config key {key!r}")

    profile = str(
        flags.get("profile", env_raw.get("profile", file_raw.get("profile", "mini")))
    )
    if profile not in PROFILES:
        raise ContractError(f"config key profile: unknown profile {profile!r}")

    values = {key: spec[1] for key, spec in REGISTRY.items()}
    values.update(PROFILES[profile])
    values["profile"] = profile
    for source in (file_raw, env_raw):
        for key, raw in source.items():
            values[key] = _parse_value(key, str(raw))
    for key, val in flags.items():
        typ = REGISTRY[key][0]
        values[key] = _parse_value(key, str(val)) if isinstance(val, str) else typ(val)

    for key, (typ, _, validator, choices) in REGISTRY.items():
        v = values[key]
        if not isinstance(v, typ):
            raise ContractError(f"config key {key}: expected {typ.__name__}")
        if choices is not None and v not in choices:
            raise ContractError(f"config key {key}: must be one of {choices}")
        if validator is not None and not validator(v):
            raise ContractError(f"config key {key}: invalid value {v!r}")
    _cross_validate(values)
    return RunConfig(values)
