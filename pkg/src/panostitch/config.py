"""Flat key-value configuration: ``key = value`` lines, ``#`` comments.

Every key is declared in :data:`SCHEMA` with a type and default; unknown
keys are rejected by name. ``parse -> serialize -> parse`` is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import geometry, losses, optimizer
from .errors import ConfigError


def parse_kv_text(text):
    """Parse ``key = value`` lines into an ordered dict of raw strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def _parse_floats(s):
    return tuple(float(p) for p in s.split(",") if p.strip())


def _parse_ints(s):
    return tuple(int(p) for p in s.split(",") if p.strip())


def _parse_size(s):
    parts = s.lower().split("x")
    if len(parts) != 2:
        raise ValueError("expected WIDTHxHEIGHT")
    return (int(parts[0]), int(parts[1]))


def _fmt_floats(v):
    return ",".join(repr(float(x)) for x in v)


def _fmt_ints(v):
    return ",".join(str(int(x)) for x in v)


_TYPES = {
    "int": (int, str),
    "float": (float, lambda v: repr(float(v))),
    "floats": (_parse_floats, _fmt_floats),
    "ints": (_parse_ints, _fmt_ints),
    "size": (_parse_size, lambda v: f"{v[0]}x{v[1]}"),
}

# key -> (type name, default)
SCHEMA = {
    "rig.input_yaws": ("floats", (0.0, 120.0, 240.0)),
    "rig.supervision_yaws": ("floats", (60.0, 180.0, 300.0)),
    "rig.fov_deg": ("float", 185.0),
    "rig.fisheye_size": ("int", 256),
    "rig.erp_size": ("size", (512, 256)),
    "color.patch_radius": ("int", 2),
    "color.grid_step": ("int", 4),
    "color.reference_yaw": ("float", 180.0),
    "loss.alpha": ("float", 0.3),
    "loss.lambda": ("float", 0.4),
    "loss.training_levels": ("ints", (3, 4, 5)),
    "loss.metric_levels": ("ints", (1, 2, 3, 4, 5)),
    "loss.ssim.window": ("int", 11),
    "loss.ssim.sigma": ("float", 1.5),
    "loss.ssim.k1": ("float", 0.01),
    "loss.ssim.k2": ("float", 0.03),
    "optim.lr": ("float", 4e-4),
    "optim.beta1": ("float", 0.9),
    "optim.beta2": ("float", 0.999),
    "optim.epsilon": ("float", 1e-8),
    "optim.iters": ("int", 2000),
    "optim.log_every": ("int", 100),
    "optim.seed": ("int", 0),
    "optim.control_scale": ("int", 8),
    "io.threads": ("int", 0),
}


@dataclass
class Config:
    values: dict

    @classmethod
    def defaults(cls):
        return cls(values={k: default for k, (_, default) in SCHEMA.items()})

    @classmethod
    def parse(cls, text):
        cfg = cls.defaults()
        for key, raw in parse_kv_text(text).items():
            cfg.set(key, raw)
        return cfg

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls.parse(f.read())

    def get(self, key):
        return self.values[key]

    def set(self, key, raw):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        type_name, _ = SCHEMA[key]
        parser, _ = _TYPES[type_name]
        try:
            self.values[key] = parser(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r} ({exc})")

    def serialize(self):
        lines = []
        for key in sorted(SCHEMA):
            type_name, _ = SCHEMA[key]
            _, fmt = _TYPES[type_name]
            lines.append(f"{key} = {fmt(self.values[key])}")
        return "\n".join(lines) + "\n"


def describe_defaults():
    """Human-readable default listing for --help output."""
    return Config.defaults().serialize()


def rig_from_config(cfg):
    size = cfg.get("rig.fisheye_size")
    erp_w, erp_h = cfg.get("rig.erp_size")
    template = geometry.FisheyeCamera(
        yaw_deg=0.0, fov_deg=cfg.get("rig.fov_deg"), width=size, height=size
    )
    return geometry.RigConfig(
        input_yaws_deg=cfg.get("rig.input_yaws"),
        supervision_yaws_deg=cfg.get("rig.supervision_yaws"),
        camera_template=template,
        erp_width=erp_w,
        erp_height=erp_h,
    )


def loss_config_from_config(cfg):
    return losses.LossConfig(
        lam=cfg.get("loss.lambda"),
        training_levels=cfg.get("loss.training_levels"),
        metric_levels=cfg.get("loss.metric_levels"),
        ssim_window=cfg.get("loss.ssim.window"),
        ssim_sigma=cfg.get("loss.ssim.sigma"),
        ssim_k1=cfg.get("loss.ssim.k1"),
        ssim_k2=cfg.get("loss.ssim.k2"),
    )


def optim_config_from_config(cfg):
    return optimizer.OptimConfig(
        learning_rate=cfg.get("optim.lr"),
        beta1=cfg.get("optim.beta1"),
        beta2=cfg.get("optim.beta2"),
        epsilon=cfg.get("optim.epsilon"),
        iterations=cfg.get("optim.iters"),
        log_every=cfg.get("optim.log_every"),
        seed=cfg.get("optim.seed"),
    )
