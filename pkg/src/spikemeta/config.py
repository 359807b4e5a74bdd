"""Flat key=value experiment configuration.

One document drives every command: `key = value` lines, `#` comments, env
overrides via SPIKEMETA_<UPPERCASED_KEY>.  Unknown keys are rejected.
Emitting a parsed config reproduces it byte-identically (modulo comments),
because emission is canonical: schema order, one `key = value` per line.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

from .data import SyntheticTaskFamily, ManifestDataset
from .dynamics import NeuronConfig
from .meta import InnerLoopConfig, OuterLoopConfig
from .plasticity import SoelConfig
from .surrogate import SurrogateConfig

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "emit_config", "apply_env"]

ENV_PREFIX = "SPIKEMETA_"


class ConfigError(ValueError):
    """Malformed configuration document or value."""


@dataclass
class ExperimentConfig:
    """Every tunable of the artifact, flat, with documented defaults."""

    # run control
    seed: int = 7
    out_dir: str = "runs"
    workers: int = 1
    dataset: str = "synthetic"  # "synthetic" or "manifest:PATH"
    trials: int = 200
    way: int = 5
    shot: int = 1
    queries: int = 10
    knn_k: int = 1

    # synthetic task family
    data_classes: int = 100
    data_samples_per_class: int = 30
    data_height: int = 12
    data_width: int = 12
    data_channels: int = 1
    data_steps: int = 100
    data_rate: float = 0.25
    data_background: float = 0.02
    data_blobs: int = 3
    data_blob_sigma: float = 1.6
    data_slots: int = 4
    data_active_slots: int = 2
    data_temporal_depth: float = 1.0
    data_jitter: float = 1.0
    data_temporal_jitter: float = 4.0
    data_rate_jitter: float = 0.15
    data_split: str = "64/16/20"

    # network
    net_hidden: str = "64"  # comma-separated hidden layer sizes
    net_alpha_u: float = 0.82
    net_alpha_v: float = 0.90
    net_threshold_hidden: float = 96.0
    net_threshold_out: float = 32.0
    net_reset: str = "hard"  # "hard" or "soft"
    net_weight_init_std: float = 48.0
    net_rf_sigma: float = 0.0  # >0 smooths first-layer random fields over the grid
    net_fixed_point_bits: int = 0  # 0 = real-valued state arithmetic
    net_quantized: bool = True

    # plasticity
    soel_theta: float = 1.0
    soel_eta: float = 4.0
    soel_window: int = 20
    soel_offset: int = 64
    soel_target: int = 2  # per window; 2 per 20 ms = 10 spikes per 100 ms sample
    soel_off_target: int = 0

    # surrogate (threshold-normalized units)
    surrogate_kind: str = "boxcar"
    surrogate_width: float = 1.0
    surrogate_slope: float = 4.0

    # inner loop
    inner_alpha: float = 0.1
    inner_steps: int = 1
    inner_blank_steps: int = 0
    inner_reset: bool = True

    # outer loop
    outer_lr: float = 0.001
    outer_beta1: float = 0.9
    outer_beta2: float = 0.999
    outer_eps: float = 1e-8
    outer_batch: int = 8
    outer_iterations: int = 400
    outer_first_order: bool = False
    train_queries: int = 2
    val_every: int = 25
    val_episodes: int = 24

    # single-neuron demonstration
    demo_inputs: int = 64
    demo_rate: float = 0.25
    demo_eta: float = 4.0
    demo_theta: float = 1.0
    demo_window: int = 20
    demo_target: int = 2
    demo_init_weight: float = 2.0
    demo_threshold: float = 256.0
    demo_max_windows: int = 50
    demo_hold: int = 5

    # derived constructors ------------------------------------------------

    def hidden_sizes(self) -> tuple[int, ...]:
        try:
            return tuple(int(tok) for tok in self.net_hidden.split(",") if tok.strip())
        except ValueError:
            raise ConfigError(f"net_hidden must be comma-separated integers: {self.net_hidden!r}")

    def split_ratio(self) -> tuple[int, int, int]:
        try:
            a, b, c = (int(tok) for tok in self.data_split.split("/"))
            return (a, b, c)
        except ValueError:
            raise ConfigError(f"data_split must look like 64/16/20: {self.data_split!r}")

    def family(self, jitter: float | None = None) -> SyntheticTaskFamily:
        return SyntheticTaskFamily(
            seed=self.seed,
            classes=self.data_classes,
            samples_per_class=self.data_samples_per_class,
            height=self.data_height,
            width=self.data_width,
            channels=self.data_channels,
            steps=self.data_steps,
            rate=self.data_rate,
            background=self.data_background,
            blobs=self.data_blobs,
            blob_sigma=self.data_blob_sigma,
            slots=self.data_slots,
            active_slots=self.data_active_slots,
            temporal_depth=self.data_temporal_depth,
            jitter=self.data_jitter if jitter is None else jitter,
            temporal_jitter=self.data_temporal_jitter,
            rate_jitter=self.data_rate_jitter,
            split_ratio=self.split_ratio(),
        )

    def episode_source(self):
        if self.dataset == "synthetic":
            return self.family()
        if self.dataset.startswith("manifest:"):
            return ManifestDataset(
                manifest_path=self.dataset.split(":", 1)[1],
                seed=self.seed,
                split_ratio=self.split_ratio(),
                steps=self.data_steps,
            )
        raise ConfigError(f"unknown dataset {self.dataset!r}")

    def neuron_config(self, threshold: float) -> NeuronConfig:
        return NeuronConfig(
            alpha_u=self.net_alpha_u,
            alpha_v=self.net_alpha_v,
            threshold=threshold,
            reset_mode=self.net_reset,
            fixed_point_bits=self.net_fixed_point_bits or None,
        )

    def soel_config(self) -> SoelConfig:
        return SoelConfig(
            theta=self.soel_theta,
            eta=self.soel_eta,
            window=self.soel_window,
            offset=self.soel_offset,
            target_spikes=self.soel_target,
            off_target_spikes=self.soel_off_target,
        )

    def surrogate_config(self) -> SurrogateConfig:
        return SurrogateConfig(
            kind=self.surrogate_kind, width=self.surrogate_width, slope=self.surrogate_slope
        )

    def inner_config(self) -> InnerLoopConfig:
        return InnerLoopConfig(
            alpha=self.inner_alpha,
            steps=self.inner_steps,
            blank_steps=self.inner_blank_steps,
            reset_between_shots=self.inner_reset,
        )

    def outer_config(self) -> OuterLoopConfig:
        return OuterLoopConfig(
            lr=self.outer_lr,
            beta1=self.outer_beta1,
            beta2=self.outer_beta2,
            eps=self.outer_eps,
            meta_batch=self.outer_batch,
            iterations=self.outer_iterations,
            first_order=self.outer_first_order,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _parse_value(name: str, text: str):
    f = _FIELDS[name]
    text = text.strip()
    if f.type in ("int", int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{name}: expected integer, got {text!r}")
    if f.type in ("float", float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{name}: expected number, got {text!r}")
    if f.type in ("bool", bool):
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected true/false, got {text!r}")
    return text


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse a key=value document on top of the defaults (or `base`)."""
    cfg = dataclasses.replace(base) if base is not None else ExperimentConfig()
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected `key = value`, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(key, value))
    return cfg


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_config(cfg: ExperimentConfig) -> str:
    """Canonical emission: schema order, `key = value` per line."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(ExperimentConfig)]
    return "\n".join(lines) + "\n"


def apply_env(cfg: ExperimentConfig, environ=None) -> ExperimentConfig:
    """Override fields from SPIKEMETA_<KEY> environment variables."""
    environ = os.environ if environ is None else environ
    for name in _FIELDS:
        env_key = ENV_PREFIX + name.upper()
        if env_key in environ:
            setattr(cfg, name, _parse_value(name, environ[env_key]))
    return cfg


def load_config(path: str | None, environ=None) -> ExperimentConfig:
    """Config file (optional) + environment overrides."""
    if path is None:
        cfg = ExperimentConfig()
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = parse_config(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    return apply_env(cfg, environ)
