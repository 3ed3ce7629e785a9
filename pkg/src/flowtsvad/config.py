# src/flowtsvad/config.py
"""
Flat run configuration.

Precedence: CLI flag > --config YAML file > --preset > field default.
Every command dumps the effective config next to its outputs.
"""
import argparse
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, get_type_hints

import yaml

from src.flowtsvad.errors import ConfigError
from src.flowtsvad.flow import SOLVERS, FlowConfig
from src.flowtsvad.label_codec import LATENT_DIMS, LabelAEConfig
from src.flowtsvad.presets import get_preset
from src.flowtsvad.scoring import MAPPINGS
from src.flowtsvad.simulator import ConversationSpec, SimulationConfig
from src.flowtsvad.tsvad_model import TrainConfig, TsvadConfig

TRUE_WORDS = ("true", "1", "yes", "on")
FALSE_WORDS = ("false", "0", "no", "off")


@dataclass
class RunConfig:
    # general
    seed: int = 0
    workers: int = 4
    output_dir: str = "runs/desk"
    force: bool = False
    resume: bool = False

    # simulation
    num_segments: int = 1000
    num_speakers: int = 3
    mean_turn: float = 2.0
    mean_pause: float = 0.8
    overlap_prob: float = 0.2
    feat_dim: int = 16
    downsample: int = 8
    speaker_pool: int = 64
    signature_scale: float = 1.0
    feature_noise: float = 0.5
    enroll_noise: float = 0.1
    held_out_fraction: float = 0.1
    dataset: str = ""
    finetune_dataset: str = ""

    # label auto-encoder
    latent_dim: int = 32
    binary_space: bool = False
    ae_epochs: int = 20
    ae_lr: float = 1e-3
    ae_batch_size: int = 64
    threshold: float = 0.5
    label_ae: str = ""

    # flow-tsvad / baseline
    frame_dim: int = 64
    model_dim: int = 64
    heads: int = 4
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    conv_kernel: int = 15
    ff_mult: int = 4
    num_slots: int = 8
    time_dim: int = 64
    frozen_epochs: int = 2
    unfrozen_epochs: int = 4
    finetune_epochs: int = 2
    lr: float = 1e-3
    finetune_lr: float = 2e-4
    batch_size: int = 16
    grad_clip: float = 5.0
    p_zero: float = 0.5
    p_replace_all: float = 0.2
    probe_size: int = 16
    checkpoint: str = ""

    # inference
    sigma_min: float = 0.0
    solver: str = "euler"
    infer_steps: List[int] = field(default_factory=lambda: [2])
    infer_seeds: List[int] = field(default_factory=list)
    infer_runs: int = 1
    infer_split: str = "held_out"
    infer_batch: int = 32
    min_duration: float = 0.0

    # scoring / ensemble
    collar: float = 0.25
    mapping: str = "optimal"
    frame_resolution: float = 0.01

    def __post_init__(self):
        for name in ("overlap_prob", "held_out_fraction", "p_zero", "p_replace_all"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {getattr(self, name)}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        for name in ("num_speakers", "feat_dim", "ae_batch_size", "batch_size", "infer_runs",
                     "infer_batch", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("num_segments", "ae_epochs", "collar", "min_duration"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.binary_space and self.latent_dim not in LATENT_DIMS:
            raise ConfigError(f"latent_dim must be one of {LATENT_DIMS}, got {self.latent_dim}")
        if self.num_speakers > self.num_slots:
            raise ConfigError(f"num_speakers {self.num_speakers} exceeds num_slots {self.num_slots}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.mapping not in MAPPINGS:
            raise ConfigError(f"mapping must be one of {MAPPINGS}, got {self.mapping!r}")
        if not self.infer_steps or min(self.infer_steps) < 1:
            raise ConfigError(f"infer_steps must be non-empty positive integers, got {self.infer_steps}")
        if self.infer_split not in ("train", "held_out", "all"):
            raise ConfigError(f"infer_split must be train, held_out or all, got {self.infer_split!r}")
        # constructing the section configs runs their own validation
        self.simulation_config()
        self.train_config()
        self.model_config(self.latent_dim)

    # --------------------------
    # derived paths
    # --------------------------
    def path(self, name: str) -> str:
        """Artifact path: the explicit key if set, else a default under output_dir."""
        explicit = {"dataset": self.dataset, "label_ae": self.label_ae,
                    "flow-tsvad": self.checkpoint, "baseline": self.checkpoint}
        defaults = {"dataset": "data", "label_ae": "label_ae.ckpt",
                    "flow-tsvad": "flow_tsvad.ckpt", "baseline": "baseline.ckpt"}
        if name not in defaults:
            raise ConfigError(f"unknown artifact {name!r}")
        return explicit[name] or os.path.join(self.output_dir, defaults[name])

    # --------------------------
    # section configs
    # --------------------------
    @property
    def inference_seeds(self) -> List[int]:
        return list(self.infer_seeds) or [self.seed + i for i in range(self.infer_runs)]

    def simulation_config(self, num_segments: Optional[int] = None, seed: Optional[int] = None) -> SimulationConfig:
        spec = ConversationSpec(
            num_speakers=self.num_speakers,
            mean_turn=self.mean_turn,
            mean_pause=self.mean_pause,
            overlap_prob=self.overlap_prob,
            seed=self.seed if seed is None else seed,
        )
        return SimulationConfig(
            spec=spec,
            num_segments=self.num_segments if num_segments is None else num_segments,
            feat_dim=self.feat_dim,
            downsample=self.downsample,
            speaker_pool=self.speaker_pool,
            signature_scale=self.signature_scale,
            feature_noise=self.feature_noise,
            enroll_noise=self.enroll_noise,
            held_out_fraction=self.held_out_fraction,
            workers=self.workers,
        )

    def label_ae_config(self) -> LabelAEConfig:
        return LabelAEConfig(
            latent_dim=self.latent_dim, epochs=self.ae_epochs, lr=self.ae_lr,
            batch_size=self.ae_batch_size, seed=self.seed, threshold=self.threshold,
        )

    def model_config(self, latent_dim: int) -> TsvadConfig:
        return TsvadConfig(
            feat_dim=self.feat_dim, downsample=self.downsample, frame_dim=self.frame_dim,
            model_dim=self.model_dim, heads=self.heads, encoder_blocks=self.encoder_blocks,
            decoder_blocks=self.decoder_blocks, conv_kernel=self.conv_kernel, ff_mult=self.ff_mult,
            num_slots=self.num_slots, embed_dim=self.feat_dim, latent_dim=latent_dim,
            time_dim=self.time_dim,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            frozen_epochs=self.frozen_epochs, unfrozen_epochs=self.unfrozen_epochs,
            finetune_epochs=self.finetune_epochs, lr=self.lr, finetune_lr=self.finetune_lr,
            batch_size=self.batch_size, grad_clip=self.grad_clip, seed=self.seed,
            p_zero=self.p_zero, p_replace_all=self.p_replace_all, probe_size=self.probe_size,
        )

    def flow_config(self, steps: int) -> FlowConfig:
        return FlowConfig(sigma_min=self.sigma_min, steps=steps, solver=self.solver)


# --------------------------
# typed coercion
# --------------------------
def _coerce(key: str, value, kind):
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            word = str(value).strip().lower()
            if word in TRUE_WORDS:
                return True
            if word in FALSE_WORDS:
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if kind in (List[int], List[float]):
            item = int if kind is List[int] else float
            if isinstance(value, str):
                value = [v for v in value.replace(" ", "").split(",") if v]
            elif not isinstance(value, (list, tuple)):
                value = [value]
            return [_coerce(key, v, item) for v in value]
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            if isinstance(value, bool):
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if kind is float:
            return float(value)
        return "" if value is None else str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config key {key}: {e}")


def coerce_settings(settings: Dict) -> Dict:
    hints = get_type_hints(RunConfig)
    unknown = sorted(set(settings) - set(hints))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return {k: _coerce(k, v, hints[k]) for k, v in settings.items()}


def read_settings(path) -> Dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        settings = yaml.safe_load(f) or {}
    if not isinstance(settings, dict):
        raise ConfigError(f"{path}: expected a flat key/value mapping")
    return settings


def load_config(path: Optional[str] = None, preset: Optional[str] = None, overrides: Optional[Dict] = None) -> RunConfig:
    settings = {}
    if preset:
        settings.update(coerce_settings(get_preset(preset)))
    if path:
        settings.update(coerce_settings(read_settings(path)))
    if overrides:
        settings.update(coerce_settings(overrides))
    return RunConfig(**settings)


def config_dict(config: RunConfig) -> Dict:
    return asdict(config)


def save_config(config: RunConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config_dict(config), f, sort_keys=False)


# --------------------------
# CLI flags
# --------------------------
def add_config_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=None, help="flat YAML config file")
    parser.add_argument("--preset", default=None, help="named preset from resources/configs")
    group = parser.add_argument_group("run config")
    for f in fields(RunConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar="VALUE")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(RunConfig)
        if getattr(args, f.name, None) is not None
    }
    return load_config(args.config, args.preset, overrides)
