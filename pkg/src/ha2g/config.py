"""Run configuration: plain-text key=value files plus flag overrides.

Every default is either a published training setting or a documented
desk-scale choice; the CLI exposes each as a flag and HA2G_CONFIG names
a fallback config file.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass


@dataclass
class RunConfig:
    frames: int = 34          # clip length N
    seed_frames: int = 4      # conditioning frames M
    fps: float = 15.0
    joints: int = 43
    audio_dim: int = 32       # d_a, per-level audio feature width
    hidden: int = 300         # decoder GRU width d_s (per direction)
    levels: int = 6           # motion hierarchy depth H
    lambda_h: float = 200.0
    lambda_p: float = 0.1
    lambda_s: float = 0.05
    lambda_k: float = 0.1
    lambda_c: float = 0.1
    tau: float = 0.07
    epsilon_clip: float = 1000.0
    huber_delta: float = 1.0
    lr: float = 1e-4
    lr_schedule: str = "constant"   # "constant" | "cosine"
    bc_threshold: float = 0.05
    sigma: float = 0.1
    seed: int = 0
    mel_bins: int = 128
    sample_rate: int = 16000
    fft_size: int = 1024
    hop: int = 512
    id_dim: int = 18
    text_dim: int = 32
    embed_dim: int = 32
    vocab: int = 32
    audio_ch1: int = 32
    audio_ch2: int = 48
    audio_ch3: int = 64
    disc_hidden: int = 32     # per direction; concatenated = 64 per frame
    batch: int = 32
    epochs: int = 200
    checkpoint_every: int = 50
    teacher_forcing: bool = True
    threads: int = 1
    dtype: str = "f32"

    def np_dtype(self):
        import numpy as np
        return np.float64 if self.dtype == "f64" else np.float32

    def to_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"


class ConfigError(Exception):
    pass


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    f = _FIELDS[name]
    if f.type == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if f.type == "int":
        return int(raw)
    if f.type == "float":
        return float(raw)
    return raw.strip()


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base else RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, _coerce(key, value))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return cfg


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Resolve config: file (or HA2G_CONFIG fallback), then overrides."""
    cfg = RunConfig()
    path = path or os.environ.get("HA2G_CONFIG")
    if path:
        with open(path) as fh:
            cfg = parse_config_text(fh.read(), cfg)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    return cfg
