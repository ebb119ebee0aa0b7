"""Flat run configuration shared by the model, trainer and benchmark.

Text form is one ``name = value`` per line with JSON literal values; ``#``
starts a comment.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

ADAPTIVE_MODES = ("fused", "direct", "ones", "zeros")


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # scene / rig
    object_count: int = 5
    scene_seed: int = 7
    resolution: int = 48
    n_views: int = 21
    n_train_views: int = 5
    # model
    channels: int = 16
    width: int = 16
    grid_x: int = 32
    grid_y: int = 32
    grid_z: int = 8
    rank: int = 8
    latent: int = 8
    pe_x: int = 4
    pe_d: int = 2
    cost_stats: str = "var"
    alpha: float = 0.3  # scale of (f^I + f^V) in the fused point feature
    gamma: float = 1.0  # weight of the latent reconstruction loss
    # training
    batch_rays: int = 64
    samples: int = 16
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    diversity_weight: float = 1e-5
    iterations: int = 2000
    log_every: int = 50
    seed: int = 0
    # ablation switches
    adaptive_mode: str = "fused"
    mask_mode: str = "step"
    probabilistic: bool = True
    residual: bool = True
    use_invariance: bool = True
    # evaluation
    image_noise_sigma: float = 0.15
    feature_noise_sigma: float = 0.3
    validation_views: list = field(default_factory=lambda: [7])
    test_views: list = field(default_factory=lambda: [2, 7, 12, 17])
    bench_steps: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("alpha", "gamma", "lr", "diversity_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"field {name!r} must be >= 0")
        if self.batch_rays < 2 or self.samples < 2:
            raise ConfigError("batch_rays and samples must both be >= 2")
        if self.adaptive_mode not in ADAPTIVE_MODES:
            raise ConfigError(f"field 'adaptive_mode' must be one of {ADAPTIVE_MODES}")
        if self.mask_mode not in ("step", "sigmoid", "zeros"):
            raise ConfigError("field 'mask_mode' must be step, sigmoid or zeros")
        if self.cost_stats not in ("var", "mean_var"):
            raise ConfigError("field 'cost_stats' must be var or mean_var")
        if self.iterations < 0:
            raise ConfigError("field 'iterations' must be >= 0")
        if self.n_train_views < 2:
            raise ConfigError("need at least 2 training views")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **changes) -> "Config":
        return replace(self, **changes)


def dump_config(cfg: Config) -> str:
    lines = ["# oponerf config v1"]
    for f in fields(cfg):
        lines.append(f"{f.name} = {json.dumps(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``name = value`` lines on top of ``base`` (defaults if omitted)."""
    known = {f.name: f for f in fields(Config)}
    values = asdict(base or Config())
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'name = value', got {raw.strip()!r}")
        name, _, value = (part.strip() for part in line.partition("="))
        if name not in known:
            raise ConfigError(f"line {lineno}: unknown field {name!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            raise ConfigError(f"line {lineno}: field {name!r} has malformed value {value!r}") from None
        expected = type(values[name])
        if expected is float and isinstance(parsed, int) and not isinstance(parsed, bool):
            parsed = float(parsed)
        if not isinstance(parsed, expected) or (expected is int and isinstance(parsed, bool)):
            raise ConfigError(f"line {lineno}: field {name!r} expects {expected.__name__}, got {value!r}")
        values[name] = parsed
    try:
        return Config(**values)
    except ConfigError as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
