# src/flowtsvad/tsvad_model.py
"""
Flow-TSVAD: target-speaker VAD as conditional flow matching in Label-AE latent space.

  features (B × R·L × F) -> FrameEncoder (strided convs, total stride R) -> H (B × L × E)
  H + positions -> ContextEncoder (conformer-lite blocks) -> O (B × L × d)
  z_t (B × N × k), t, enrollments (B × N × c), O -> decoder -> v (B × N × k)

Decoder block, one token per speaker slot:
  x += SelfAttn(AdaIN_t(x))
  x += CrossAttn(q = [AdaIN_t(x), e], k = [O, pos], v = O)
  x += FF(LN(x))

The discriminative baseline shares the encoders, starts every slot from one
learned query, uses LayerNorm instead of AdaIN and emits L frame probabilities.
"""
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from src.flowtsvad import numerics
from src.flowtsvad.errors import ConfigError, DataError, DivergenceError, ShapeError
from src.flowtsvad.flow import FlowConfig, cfm_loss, integrate
from src.flowtsvad.label_codec import bce_loss, binarize
from src.flowtsvad.scoring import DiarizationHypothesis, labels_to_hypothesis
from src.flowtsvad.simulator import FRAME_DURATION, derive_rng

STAGES = ("frozen", "unfrozen", "finetune")
VALIDITY = ("real", "zero", "foreign")
TIME_SCALE = 1000.0
AUG_KEY = 0xA06
PROBE_KEY = 0x9B0
STAGE_KEY = 0x57A


@dataclass
class TsvadConfig:
    feat_dim: int = 16
    downsample: int = 8
    frame_dim: int = 64
    model_dim: int = 64
    heads: int = 4
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    conv_kernel: int = 15
    ff_mult: int = 4
    num_slots: int = 8
    embed_dim: int = 16
    latent_dim: int = 32
    label_len: int = 200
    time_dim: int = 64

    def __post_init__(self):
        for name in ("feat_dim", "frame_dim", "model_dim", "heads", "num_slots", "embed_dim",
                     "latent_dim", "label_len", "time_dim", "ff_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.downsample < 1 or self.downsample & (self.downsample - 1):
            raise ConfigError(f"downsample must be a power of two, got {self.downsample}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.model_dim % 2 or self.time_dim % 2:
            raise ConfigError("model_dim and time_dim must be even (sinusoidal embeddings)")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")


@dataclass
class TrainConfig:
    frozen_epochs: int = 2
    unfrozen_epochs: int = 4
    finetune_epochs: int = 2
    lr: float = 1e-3
    finetune_lr: float = 2e-4
    batch_size: int = 16
    grad_clip: float = 5.0
    seed: int = 0
    p_zero: float = 0.5
    p_replace_all: float = 0.2
    probe_size: int = 16

    def __post_init__(self):
        for stage in STAGES:
            if self.epochs(stage) < 0:
                raise ConfigError(f"{stage}_epochs must be >= 0, got {self.epochs(stage)}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("p_zero", "p_replace_all"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {getattr(self, name)}")

    def epochs(self, stage: str) -> int:
        return getattr(self, f"{stage}_epochs")


# --------------------------
# embeddings
# --------------------------
def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    """pe[p, 2i] = sin(p / 10000^(2i/dim)), pe[p, 2i+1] = cos(p / 10000^(2i/dim))."""
    return time_embedding(torch.arange(length, dtype=torch.float64), dim).to(torch.get_default_dtype())


def time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    if dim % 2:
        raise ShapeError(f"sinusoidal embedding needs an even dim, got {dim}")
    freq = torch.exp(
        -math.log(10000.0) * torch.arange(0, dim, 2, dtype=t.dtype) / dim
    )
    angle = t.unsqueeze(-1) * freq
    out = torch.empty(*t.shape, dim, dtype=t.dtype)
    out[..., 0::2] = torch.sin(angle)
    out[..., 1::2] = torch.cos(angle)
    return out


# --------------------------
# building blocks
# --------------------------
class FrameEncoder(nn.Module):
    """log2(R) Conv1D(k=5, s=2, p=2)+SiLU layers: B × R·L × F -> B × L × E."""

    def __init__(self, feat_dim: int, frame_dim: int, downsample: int = 8):
        super().__init__()
        self.downsample = downsample
        layers, c_in = [], feat_dim
        for _ in range(int(math.log2(downsample))):
            layers.append(nn.Conv1d(c_in, frame_dim, 5, stride=2, padding=2))
            c_in = frame_dim
        self.convs = nn.ModuleList(layers)
        self.out_dim = c_in

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-2] % self.downsample:
            raise ShapeError(
                f"FrameEncoder: {features.shape[-2]} frames not divisible by downsample {self.downsample}"
            )
        x = features.transpose(-1, -2)
        for conv in self.convs:
            x = F.silu(numerics.conv1d(x, conv.weight, conv.bias, conv.stride[0], conv.padding[0]))
        return x.transpose(-1, -2)


class MultiHeadAttention(nn.Module):
    def __init__(self, query_dim: int, key_dim: int, model_dim: int, heads: int, project_value: bool = True):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(query_dim, model_dim)
        self.k_proj = nn.Linear(key_dim, model_dim)
        self.v_proj = nn.Linear(model_dim, model_dim) if project_value else None
        self.out_proj = nn.Linear(model_dim, model_dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        return x.unflatten(-1, (self.heads, -1)).transpose(-2, -3)

    def forward(self, queries, keys, values) -> torch.Tensor:
        v = self.v_proj(values) if self.v_proj is not None else values
        out = numerics.attention(self._split(self.q_proj(queries)), self._split(self.k_proj(keys)), self._split(v))
        return self.out_proj(out.transpose(-2, -3).flatten(-2))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, mult * dim)
        self.fc2 = nn.Linear(mult * dim, dim)

    def forward(self, x):
        return self.fc2(F.silu(self.fc1(x)))


class ConvModule(nn.Module):
    """pointwise (GLU) -> depthwise conv -> SiLU -> pointwise, on B × L × d."""

    def __init__(self, dim: int, kernel: int):
        super().__init__()
        self.pointwise_in = nn.Linear(dim, 2 * dim)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.pointwise_out = nn.Linear(dim, dim)

    def forward(self, x):
        h = F.glu(self.pointwise_in(x), dim=-1).transpose(-1, -2)
        h = numerics.conv1d(
            h, self.depthwise.weight, self.depthwise.bias, 1, self.depthwise.padding[0], groups=self.depthwise.groups
        )
        return self.pointwise_out(F.silu(h).transpose(-1, -2))


class ConformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, kernel: int, ff_mult: int):
        super().__init__()
        self.norm_ff1 = nn.LayerNorm(dim)
        self.ff1 = FeedForward(dim, ff_mult)
        self.norm_attn = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, dim, dim, heads)
        self.norm_conv = nn.LayerNorm(dim)
        self.conv = ConvModule(dim, kernel)
        self.norm_ff2 = nn.LayerNorm(dim)
        self.ff2 = FeedForward(dim, ff_mult)

    def sublayers(self) -> List[nn.Module]:
        return [self.ff1, self.attn, self.conv, self.ff2]

    def forward(self, x):
        x = x + 0.5 * self.ff1(self.norm_ff1(x))
        h = self.norm_attn(x)
        x = x + self.attn(h, h, h)
        x = x + self.conv(self.norm_conv(x))
        return x + 0.5 * self.ff2(self.norm_ff2(x))


class ContextEncoder(nn.Module):
    def __init__(self, frame_dim: int, model_dim: int, heads: int, blocks: int, kernel: int, ff_mult: int):
        super().__init__()
        self.model_dim = model_dim
        self.input_proj = nn.Linear(frame_dim, model_dim)
        self.blocks = nn.ModuleList(ConformerBlock(model_dim, heads, kernel, ff_mult) for _ in range(blocks))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        x = self.input_proj(frames)
        x = x + sinusoidal_positions(x.shape[-2], self.model_dim).to(x.dtype)
        for block in self.blocks:
            x = block(x)
        return x


class DecoderBlock(nn.Module):
    """AdaIN-conditioned when a modulation (B × 4d) is given, LayerNorm otherwise."""

    def __init__(self, dim: int, embed_dim: int, heads: int, ff_mult: int, time_conditioned: bool):
        super().__init__()
        self.time_conditioned = time_conditioned
        if not time_conditioned:
            self.norm_self = nn.LayerNorm(dim)
            self.norm_cross = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, dim, dim, heads)
        self.cross_attn = MultiHeadAttention(dim + embed_dim, 2 * dim, dim, heads, project_value=False)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult)

    def forward(self, x, enrollments, keys, values, modulation: Optional[torch.Tensor] = None):
        if self.time_conditioned:
            s1, b1, s2, b2 = modulation.chunk(4, dim=-1)
            h = numerics.adain(x, 1.0 + s1, b1)
        else:
            h = self.norm_self(x)
        x = x + self.self_attn(h, h, h)
        if self.time_conditioned:
            h = numerics.adain(x, 1.0 + s2, b2)
        else:
            h = self.norm_cross(x)
        x = x + self.cross_attn(torch.cat([h, enrollments], dim=-1), keys, values)
        return x + self.ff(self.norm_ff(x))


# --------------------------
# models
# --------------------------
class _TsvadBase(nn.Module):
    def __init__(self, config: TsvadConfig):
        super().__init__()
        self.config = config
        self.frame_encoder = FrameEncoder(config.feat_dim, config.frame_dim, config.downsample)
        self.context_encoder = ContextEncoder(
            self.frame_encoder.out_dim, config.model_dim, config.heads,
            config.encoder_blocks, config.conv_kernel, config.ff_mult,
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.context_encoder.input_proj.weight.dtype

    def encode_frames(self, features) -> torch.Tensor:
        return self.frame_encoder(torch.as_tensor(features).to(self.dtype))

    def context_encode(self, frames: torch.Tensor) -> torch.Tensor:
        return self.context_encoder(frames)

    def encode(self, features) -> torch.Tensor:
        """B × R·L × F (or unbatched) -> O, B × L × d."""
        x = torch.as_tensor(features).to(self.dtype)
        if x.shape[-1] != self.config.feat_dim:
            raise ShapeError(f"encode: feature dim {x.shape[-1]}, model expects {self.config.feat_dim}")
        return self.context_encode(self.encode_frames(x))

    def _keys(self, encoded: torch.Tensor) -> torch.Tensor:
        pos = sinusoidal_positions(encoded.shape[-2], self.config.model_dim).to(encoded.dtype)
        return torch.cat([encoded, pos.expand_as(encoded)], dim=-1)

    def _check_slots(self, tokens: torch.Tensor, enrollments: torch.Tensor):
        if tokens.shape[:-1] != enrollments.shape[:-1]:
            raise ShapeError(
                f"{tokens.shape[-2]} speaker slots but {enrollments.shape[-2]} enrollments "
                f"({tuple(tokens.shape)} vs {tuple(enrollments.shape)})"
            )
        if enrollments.shape[-1] != self.config.embed_dim:
            raise ShapeError(f"enrollment dim {enrollments.shape[-1]}, model expects {self.config.embed_dim}")


class FlowTsvad(_TsvadBase):
    def __init__(self, config: TsvadConfig):
        super().__init__(config)
        d = config.model_dim
        self.token_proj = nn.Linear(config.latent_dim, d)
        self.time_mlp = nn.Sequential(nn.Linear(config.time_dim, d), nn.SiLU(), nn.Linear(d, d), nn.SiLU())
        self.modulations = nn.ModuleList(nn.Linear(d, 4 * d) for _ in range(config.decoder_blocks))
        self.blocks = nn.ModuleList(
            DecoderBlock(d, config.embed_dim, config.heads, config.ff_mult, time_conditioned=True)
            for _ in range(config.decoder_blocks)
        )
        self.out_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.latent_dim)

    def vector_field(self, z_t, t, enrollments, encoded) -> torch.Tensor:
        """z_t B × N × k, t (B,) or scalar, enrollments B × N × c, encoded B × L × d -> B × N × k."""
        z = torch.as_tensor(z_t).to(self.dtype)
        e = torch.as_tensor(enrollments).to(self.dtype)
        unbatched = z.dim() == 2
        if unbatched:
            z, e, encoded = z.unsqueeze(0), e.unsqueeze(0), encoded.unsqueeze(0) if encoded.dim() == 2 else encoded
        if z.shape[-1] != self.config.latent_dim:
            raise ShapeError(f"vector_field: latent dim {z.shape[-1]}, model expects {self.config.latent_dim}")
        x = self.token_proj(z)
        self._check_slots(x, e)
        tt = torch.as_tensor(t, dtype=self.dtype).expand(z.shape[:1])
        temb = self.time_mlp(time_embedding(tt * TIME_SCALE, self.config.time_dim))
        keys = self._keys(encoded)
        for block, modulation in zip(self.blocks, self.modulations):
            x = block(x, e, keys, encoded, modulation(temb))
        v = self.head(self.out_norm(x))
        return v.squeeze(0) if unbatched else v


class DiscriminativeTsvad(_TsvadBase):
    def __init__(self, config: TsvadConfig):
        super().__init__(config)
        d = config.model_dim
        self.query = nn.Parameter(0.02 * torch.randn(d))
        self.blocks = nn.ModuleList(
            DecoderBlock(d, config.embed_dim, config.heads, config.ff_mult, time_conditioned=False)
            for _ in range(config.decoder_blocks)
        )
        self.out_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.label_len)

    def forward(self, features, enrollments) -> torch.Tensor:
        """-> B × N × L speech probabilities."""
        e = torch.as_tensor(enrollments).to(self.dtype)
        encoded = self.encode(features)
        x = self.query.expand(*e.shape[:-1], -1)
        self._check_slots(x, e)
        keys = self._keys(encoded)
        for block in self.blocks:
            x = block(x, e, keys, encoded)
        return torch.sigmoid(self.head(self.out_norm(x)))


def build_model(kind: str, config: TsvadConfig, seed: int) -> _TsvadBase:
    classes = {"flow-tsvad": FlowTsvad, "baseline": DiscriminativeTsvad}
    if kind not in classes:
        raise ConfigError(f"unknown model kind {kind!r}, expected one of {sorted(classes)}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return classes[kind](config)


def predict_vector_field(model: FlowTsvad, z_t, t, enrollments, encoded) -> torch.Tensor:
    return model.vector_field(z_t, t, enrollments, encoded)


# --------------------------
# enrollments
# --------------------------
@dataclass
class EnrollmentSet:
    embeddings: np.ndarray
    validity: List[str]
    names: List[Optional[str]] = field(default_factory=list)

    def __post_init__(self):
        if not self.names:
            self.names = [None] * len(self.validity)
        if not len(self.embeddings) == len(self.validity) == len(self.names):
            raise ShapeError(
                f"EnrollmentSet: {len(self.embeddings)} embeddings, {len(self.validity)} validity flags, "
                f"{len(self.names)} names"
            )
        bad = set(self.validity) - set(VALIDITY)
        if bad:
            raise ConfigError(f"EnrollmentSet: unknown validity {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.validity)


def augment_enrollments(
    real: np.ndarray,
    labels: np.ndarray,
    foreign_pool: np.ndarray,
    num_slots: int,
    rng: np.random.Generator,
    p_zero: float = 0.5,
    p_replace_all: float = 0.2,
    names: Optional[Sequence[str]] = None,
) -> Tuple[EnrollmentSet, np.ndarray]:
    """
    Pad m real speakers (m × c embeddings, m × L labels) to num_slots slots.
    Returns the enrollment set and the per-slot targets (num_slots × L);
    every slot that is not a real speaker targets all-silence.
    """
    real = np.asarray(real, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.uint8)
    m, c = real.shape
    if m > num_slots:
        raise ShapeError(f"augment_enrollments: {m} real speakers exceed {num_slots} slots")
    if len(labels) != m:
        raise ShapeError(f"augment_enrollments: {m} embeddings but {len(labels)} label tracks")
    names = list(names) if names is not None else [None] * m

    embeddings = np.zeros((num_slots, c), dtype=np.float32)
    targets = np.zeros((num_slots, labels.shape[-1]), dtype=np.uint8)
    validity = ["zero"] * num_slots
    slot_names: List[Optional[str]] = [None] * num_slots

    replace_all = rng.random() < p_replace_all
    first_pad = 0 if replace_all else m
    if not replace_all:
        embeddings[:m] = real
        targets[:m] = labels
        validity[:m] = ["real"] * m
        slot_names[:m] = names
    for slot in range(first_pad, num_slots):
        if rng.random() < p_zero or len(foreign_pool) == 0:
            continue
        embeddings[slot] = foreign_pool[rng.integers(len(foreign_pool))]
        validity[slot] = "foreign"
    return EnrollmentSet(embeddings, validity, slot_names), targets


def pad_enrollments(real: np.ndarray, num_slots: int, names: Optional[Sequence[str]] = None) -> EnrollmentSet:
    """Inference-time padding: real speakers first, zero embeddings after."""
    real = np.asarray(real, dtype=np.float32)
    m, c = real.shape
    if m > num_slots:
        raise ShapeError(f"pad_enrollments: {m} real speakers exceed {num_slots} slots")
    embeddings = np.zeros((num_slots, c), dtype=np.float32)
    embeddings[:m] = real
    slot_names = list(names) if names is not None else [f"spk{i}" for i in range(m)]
    return EnrollmentSet(embeddings, ["real"] * m + ["zero"] * (num_slots - m), slot_names + [None] * (num_slots - m))


def prepare_batch(dataset, indices: Sequence[int], rng: np.random.Generator, num_slots: int,
                  p_zero: float, p_replace_all: float, dtype=torch.float32) -> Dict[str, torch.Tensor]:
    raw = dataset.batch(indices)
    enrollments, targets = [], []
    for i in range(len(indices)):
        aug, tgt = augment_enrollments(
            raw["enrollments"][i].numpy(), raw["labels"][i].numpy(),
            dataset.foreign_pool(raw["pool_ids"][i], rng), num_slots, rng, p_zero, p_replace_all,
        )
        enrollments.append(aug.embeddings)
        targets.append(tgt)
    return {
        "features": raw["features"].to(dtype),
        "enrollments": torch.as_tensor(np.stack(enrollments)).to(dtype),
        "targets": torch.as_tensor(np.stack(targets)),
    }


# --------------------------
# training
# --------------------------
@dataclass
class TrainResult:
    model: _TsvadBase
    curve: List[dict]
    stages_completed: List[str]


def _stream_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def _train_stages(
    model: _TsvadBase,
    loss_fn: Callable[[Dict[str, torch.Tensor], torch.Generator], torch.Tensor],
    sources: Dict[str, Tuple[object, List[int]]],
    config: TrainConfig,
    stages_completed: Sequence[str],
    desc: str,
) -> TrainResult:
    """
    Run the frozen / unfrozen / finetune stages not yet in stages_completed.
    Each stage draws its batches and augmentations from generators derived from
    (seed, stage), so resuming after a completed stage reproduces an uninterrupted run.
    """
    completed = list(stages_completed)
    curve: List[dict] = []
    probe_dataset, probe_indices = sources["frozen"]
    probe = None
    if probe_indices and config.probe_size > 0:
        probe = prepare_batch(
            probe_dataset, probe_indices[:config.probe_size], derive_rng(config.seed, PROBE_KEY),
            model.config.num_slots, config.p_zero, config.p_replace_all, model.dtype,
        )

    def _probe_loss() -> float:
        with torch.no_grad():
            return loss_fn(probe, torch.Generator().manual_seed(_stream_seed(config.seed, PROBE_KEY))).item()

    if probe is not None and not completed:
        curve.append({"stage": "init", "epoch": 0, "step": -1, "loss": _probe_loss()})

    step = 0
    try:
        for s_idx, stage in enumerate(STAGES):
            if stage in completed:
                continue
            epochs = config.epochs(stage)
            dataset, indices = sources[stage]
            if epochs > 0 and not indices:
                raise DataError(f"{desc}: stage {stage} has no training segments")
            for p in model.frame_encoder.parameters():
                p.requires_grad_(stage != "frozen")
            params = [p for p in model.parameters() if p.requires_grad]
            opt = torch.optim.Adam(params, lr=config.finetune_lr if stage == "finetune" else config.lr)
            gen = torch.Generator().manual_seed(_stream_seed(config.seed, STAGE_KEY, s_idx))
            rng = derive_rng(config.seed, AUG_KEY, s_idx)

            model.train()
            pbar = tqdm(range(epochs), desc=f"{desc} [{stage}]", dynamic_ncols=True)
            for epoch in pbar:
                perm = torch.randperm(len(indices), generator=gen).tolist()
                for b in range(0, len(perm), config.batch_size):
                    batch_idx = sorted(indices[i] for i in perm[b:b + config.batch_size])
                    batch = prepare_batch(dataset, batch_idx, rng, model.config.num_slots,
                                          config.p_zero, config.p_replace_all, model.dtype)
                    loss = loss_fn(batch, gen)
                    if not torch.isfinite(loss):
                        raise DivergenceError(f"{desc}: non-finite loss in stage {stage} at step {step}")
                    opt.zero_grad()
                    loss.backward()
                    if config.grad_clip > 0:
                        nn.utils.clip_grad_norm_(params, config.grad_clip)
                    opt.step()
                    curve.append({"stage": stage, "epoch": epoch, "step": step, "loss": loss.item()})
                    step += 1
                if probe is not None:
                    probe_loss = _probe_loss()
                    curve.append({"stage": stage, "epoch": epoch, "step": -1, "loss": probe_loss})
                    pbar.set_postfix({"probe": round(probe_loss, 4)})
            pbar.close()
            completed.append(stage)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
        model.eval()
    return TrainResult(model, curve, completed)


def _sources(sim_dataset, finetune_dataset) -> Dict[str, Tuple[object, List[int]]]:
    train = (sim_dataset, sim_dataset.indices("train"))
    tune = (finetune_dataset, finetune_dataset.indices("train")) if finetune_dataset is not None else train
    return {"frozen": train, "unfrozen": train, "finetune": tune}


def train_flow_tsvad(
    sim_dataset,
    finetune_dataset,
    codec: nn.Module,
    model_config: TsvadConfig,
    train_config: TrainConfig,
    flow_config: Optional[FlowConfig] = None,
    model: Optional[FlowTsvad] = None,
    stages_completed: Sequence[str] = (),
) -> TrainResult:
    """
    Per step: targets -> z1 = codec.encode (frozen), O = encode(features),
    CFM loss of the decoder field against u_target on a fresh (t, z0).
    """
    flow_config = flow_config or FlowConfig()
    if model_config.latent_dim != codec.latent_dim:
        raise ShapeError(f"model latent dim {model_config.latent_dim} vs codec latent dim {codec.latent_dim}")
    model = model if model is not None else build_model("flow-tsvad", model_config, train_config.seed)
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)

    def loss_fn(batch, gen):
        with torch.no_grad():
            z1 = codec.encode(batch["targets"]).to(model.dtype)
        encoded = model.encode(batch["features"])
        enrollments = batch["enrollments"]
        return cfm_loss(lambda z, t: predict_vector_field(model, z, t, enrollments, encoded), z1, gen, flow_config)

    return _train_stages(model, loss_fn, _sources(sim_dataset, finetune_dataset), train_config,
                         stages_completed, "flow-tsvad")


def train_baseline(
    sim_dataset,
    finetune_dataset,
    model_config: TsvadConfig,
    train_config: TrainConfig,
    model: Optional[DiscriminativeTsvad] = None,
    stages_completed: Sequence[str] = (),
) -> TrainResult:
    model = model if model is not None else build_model("baseline", model_config, train_config.seed)

    def loss_fn(batch, gen):
        return bce_loss(batch["targets"], model(batch["features"], batch["enrollments"]))

    return _train_stages(model, loss_fn, _sources(sim_dataset, finetune_dataset), train_config,
                         stages_completed, "baseline")


# --------------------------
# inference
# --------------------------
def probabilities_to_hypothesis(
    file_id: str, probs, names, threshold: float, frame_duration: float, min_duration: float = 0.0
) -> DiarizationHypothesis:
    hyp = labels_to_hypothesis(file_id, binarize(probs, threshold).numpy(), names, frame_duration)
    if min_duration > 0:
        hyp.segments = [s for s in hyp.segments if s.duration >= min_duration]
    return hyp


def _slot_key(embedding: np.ndarray, name: Optional[str]) -> bytes:
    h = hashlib.sha256((name or "").encode("utf-8") + b"\x00")
    h.update(np.ascontiguousarray(embedding, dtype="<f8").tobytes())
    return h.digest()


def slot_noise(
    enrollments: EnrollmentSet, latent_dim: int, generator: torch.Generator, dtype=torch.float32
) -> Tuple[torch.Tensor, List[int]]:
    """
    z0 for every slot, keyed on the slot's (name, embedding) rather than its position,
    plus the canonical slot order (sorted by key).
    One draw from `generator` picks the base seed, so the generator still decides the sample.
    """
    base = int(torch.randint(0, 2 ** 62, (1,), generator=generator)).to_bytes(8, "little")
    keys = [_slot_key(e, n) for e, n in zip(enrollments.embeddings, enrollments.names)]
    noise = []
    for key in keys:
        g = torch.Generator().manual_seed(int.from_bytes(hashlib.sha256(base + key).digest()[:8], "little"))
        noise.append(torch.randn(latent_dim, generator=g, dtype=dtype))
    order = sorted(range(len(keys)), key=keys.__getitem__)
    z0 = torch.stack(noise) if noise else torch.zeros((0, latent_dim), dtype=dtype)
    return z0, order


@torch.no_grad()
def diarize_batch(
    features,
    enrollment_sets: Sequence[EnrollmentSet],
    model: FlowTsvad,
    codec: nn.Module,
    flow_config: FlowConfig,
    generators: Sequence[torch.Generator],
) -> torch.Tensor:
    """
    B segments at once; segment b draws its z0 from generators[b].
    Slots run in canonical key order and are scattered back, so permuting a
    segment's enrollments permutes its output rows bit for bit.
    Returns B × N × L speech probabilities.
    """
    if not isinstance(model, FlowTsvad):
        raise ShapeError(f"diarize needs a flow-tsvad model, got {type(model).__name__}")
    if len(enrollment_sets) != len(generators):
        raise ShapeError(f"{len(enrollment_sets)} enrollment sets but {len(generators)} generators")
    encoded = model.encode(features)
    if encoded.shape[0] != len(enrollment_sets):
        raise ShapeError(f"{encoded.shape[0]} feature segments but {len(enrollment_sets)} enrollment sets")
    noise, orders = [], []
    for s, g in zip(enrollment_sets, generators):
        z0, order = slot_noise(s, model.config.latent_dim, g, model.dtype)
        noise.append(z0[order])
        orders.append(order)
    e = torch.as_tensor(np.stack([s.embeddings[o] for s, o in zip(enrollment_sets, orders)])).to(model.dtype)
    z1 = integrate(lambda z, t: predict_vector_field(model, z, t, e, encoded), torch.stack(noise), flow_config)
    decoded = codec.decode(z1)
    index = torch.as_tensor(orders, dtype=torch.long)
    probs = torch.empty_like(decoded)
    probs.scatter_(1, index.unsqueeze(-1).expand_as(decoded), decoded)
    return probs


def diarize(
    features,
    enrollments: EnrollmentSet,
    model: FlowTsvad,
    codec: nn.Module,
    flow_config: FlowConfig,
    generator: torch.Generator,
    file_id: str = "segment",
    threshold: float = 0.5,
    frame_duration: float = FRAME_DURATION,
    min_duration: float = 0.0,
) -> Tuple[torch.Tensor, DiarizationHypothesis]:
    """One segment (R·L × F features): N × L probabilities and the hypothesis of named slots."""
    x = torch.as_tensor(features).unsqueeze(0)
    probs = diarize_batch(x, [enrollments], model, codec, flow_config, [generator])[0]
    hyp = probabilities_to_hypothesis(file_id, probs, enrollments.names, threshold, frame_duration, min_duration)
    return probs, hyp


@torch.no_grad()
def baseline_discriminative(
    features,
    enrollments: EnrollmentSet,
    model: DiscriminativeTsvad,
    file_id: str = "segment",
    threshold: float = 0.5,
    frame_duration: float = FRAME_DURATION,
    min_duration: float = 0.0,
) -> Tuple[torch.Tensor, DiarizationHypothesis]:
    if not isinstance(model, DiscriminativeTsvad):
        raise ShapeError(f"baseline inference needs a baseline model, got {type(model).__name__}")
    x = torch.as_tensor(features).unsqueeze(0)
    probs = model(x, torch.as_tensor(enrollments.embeddings).unsqueeze(0))[0]
    hyp = probabilities_to_hypothesis(file_id, probs, enrollments.names, threshold, frame_duration, min_duration)
    return probs, hyp
