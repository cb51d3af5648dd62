"""Experiment configuration: defaults, flat key=value files, CLI overrides.

The default profile matches the reference training recipe (w=8, T=64,
K=200, d_z=256, hidden sizes 512/1024/200, Adam with warmup 4000, 70/20/10
splits). A config file holds one `key = value` per line with `#` comments;
command-line flags override file values.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .errors import ConfigError, IoError

ENV_CONFIG_PATH = "DYADSYNTH_CONFIG"


@dataclass
class ExperimentConfig:
    seed: int = 7
    # data dimensions
    d_m: int = 53
    d_a: int = 128
    fps: float = 30.0
    rate_multiple: int = 4
    # model geometry
    window: int = 8             # w: frames per token
    train_len: int = 64         # T: predictor window (past + future frames)
    context_len: int = 32       # t: visible past frames
    codebook_size: int = 200    # K
    code_dim: int = 256         # d_z
    vq_hidden: int = 512
    vq_heads: int = 8
    vq_layers: int = 12
    vq_train_len: int = 32
    fusion_hidden: int = 1024   # d_k
    fusion_heads: int = 8
    fusion_layers: int = 12
    fusion_mode: str = "cross"
    extra_summary_step: bool = False
    pred_hidden: int = 200
    pred_heads: int = 10
    pred_layers: int = 5
    conv_kernel: int = 5
    # optimization
    vq_base_lr: float = 2.0
    pred_base_lr: float = 0.01
    warmup: int = 4000
    batch: int = 32
    vq_epochs: int = 1000
    vq_codebook_warmup: int = 1
    pred_epochs: int = 1000
    mask_prob: float = 0.5
    commit_weight: float = 0.25
    aux_weight: float = 1.0
    # sampling
    nucleus_p: float = 0.9
    # metrics
    kmeans_k_expression: int = 15
    kmeans_k_rotation: int = 9
    kmeans_seed: int = 0
    max_lag: int = 60
    smile_channel: int = 0
    # data handling
    train_frac: float = 0.7
    val_frac: float = 0.2
    test_frac: float = 0.1
    window_stride: int = 8
    # baselines
    smooth_radius: int = 3
    mirror_delay: int = 17

    def validate(self) -> "ExperimentConfig":
        if self.window < 2 or (self.window & (self.window - 1)) != 0:
            raise ConfigError(f"window must be a power of two >= 2, got {self.window}")
        if self.train_len % self.window:
            raise ConfigError(f"train_len {self.train_len} not divisible by window {self.window}")
        if self.context_len % self.window:
            raise ConfigError(f"context_len {self.context_len} not divisible by window "
                              f"{self.window}")
        if self.vq_train_len % self.window:
            raise ConfigError(f"vq_train_len {self.vq_train_len} not divisible by window "
                              f"{self.window}")
        if self.train_len != 2 * self.context_len:
            raise ConfigError(f"train_len {self.train_len} must be twice context_len "
                              f"{self.context_len} (past plus supervised future)")
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"split fractions sum to {total}, expected 1.0")
        if self.fusion_mode not in ("cross", "concat", "motion", "audio"):
            raise ConfigError(f"fusion_mode {self.fusion_mode!r} invalid")
        if not 0.0 < self.nucleus_p <= 1.0:
            raise ConfigError(f"nucleus_p must be in (0, 1], got {self.nucleus_p}")
        if self.pred_hidden % self.pred_heads or self.vq_hidden % self.vq_heads \
                or self.fusion_hidden % self.fusion_heads:
            raise ConfigError("hidden sizes must be divisible by their head counts")
        return self

    @property
    def tau(self) -> int:
        return self.context_len // self.window

    @property
    def speaker_window(self) -> int:
        return self.context_len + self.window

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"config key {name}: {e}") from e


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return ExperimentConfig(**values).validate()


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Config from file (or the DYADSYNTH_CONFIG env var) plus overrides."""
    if path is None:
        path = os.environ.get(ENV_CONFIG_PATH)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                cfg = parse_config_text(f.read(), source=str(path))
        except OSError as e:
            raise IoError(f"cannot read config {path}: {e}") from e
    else:
        cfg = ExperimentConfig()
    if overrides:
        values = cfg.to_dict()
        for key, raw in overrides.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config override {key!r}")
            values[key] = _coerce(key, str(raw)) if not isinstance(raw, (int, float, bool)) else raw
        cfg = ExperimentConfig(**values)
    return cfg.validate()


def write_config(cfg: ExperimentConfig, path):
    lines = [f"{k} = {v}" for k, v in cfg.to_dict().items()]
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as e:
        raise IoError(f"cannot write config {path}: {e}") from e
