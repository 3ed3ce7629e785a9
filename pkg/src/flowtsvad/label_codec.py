# src/flowtsvad/label_codec.py
"""
Label auto-encoder: an L=200 frame binary voice-activity sequence is encoded
to a k-dim dense latent and decoded back to per-frame speech probabilities.

Layer stack (out_channels, kernel, stride, padding[, output_padding]):

  encoder  Conv1D+SiLU (16,5,2,2) -> (16,100)
           Conv1D+SiLU (32,3,2,1) -> (32,50)
           Conv1D+SiLU (64,3,1,1) -> (64,50)
           Flatten -> 3200, Linear(3200->k) + LayerNorm
  decoder  LayerNorm+SiLU, Linear(k->2k)+SiLU, Linear(2k->3200)+SiLU, Unflatten (64,50)
           ConvT+SiLU (32,3,1,1,0) -> (32,50)
           ConvT+SiLU (16,3,2,1,1) -> (16,100)
           ConvT      (1,5,2,2,1)  -> (1,200)
           Conv1D     (16,5,1,2)   -> (16,200)
           Conv1D+Sigmoid (1,3,1,1) -> (1,200)
"""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from src.flowtsvad import numerics
from src.flowtsvad.errors import ConfigError, DivergenceError, ShapeError

LABEL_LEN = 200
FRAME_DURATION = 0.08
LATENT_DIMS = (16, 32, 64)

ENCODER_CONVS = [(16, 5, 2, 2), (32, 3, 2, 1), (64, 3, 1, 1)]
DECODER_DECONVS = [(32, 3, 1, 1, 0), (16, 3, 2, 1, 1), (1, 5, 2, 2, 1)]
DECODER_CONVS = [(16, 5, 1, 2), (1, 3, 1, 1)]
UNFLATTEN = (64, 50)


@dataclass
class LabelAEConfig:
    latent_dim: int = 32
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    threshold: float = 0.5
    clamp_epsilon: float = 1e-7


def binarize(prob: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must be in (0, 1), got {threshold}")
    return (prob > threshold).to(torch.uint8)


def _check_length(x: torch.Tensor, expected: int, what: str):
    if x.shape[-1] != expected:
        raise ShapeError(f"{what}: expected last dim {expected}, got shape {tuple(x.shape)}")


class LabelAE(nn.Module):
    def __init__(self, latent_dim: int = 32):
        super().__init__()
        if latent_dim not in LATENT_DIMS:
            raise ShapeError(f"latent_dim must be one of {LATENT_DIMS}, got {latent_dim}")
        self.latent_dim = latent_dim
        flat = UNFLATTEN[0] * UNFLATTEN[1]

        convs, c_in = [], 1
        for out, k, s, p in ENCODER_CONVS:
            convs.append(nn.Conv1d(c_in, out, k, stride=s, padding=p))
            c_in = out
        self.encoder_convs = nn.ModuleList(convs)
        self.encoder_linear = nn.Linear(flat, latent_dim)
        self.encoder_norm = nn.LayerNorm(latent_dim)

        self.decoder_norm = nn.LayerNorm(latent_dim)
        self.decoder_fc1 = nn.Linear(latent_dim, 2 * latent_dim)
        self.decoder_fc2 = nn.Linear(2 * latent_dim, flat)
        deconvs, c_in = [], UNFLATTEN[0]
        for out, k, s, p, op in DECODER_DECONVS:
            deconvs.append(nn.ConvTranspose1d(c_in, out, k, stride=s, padding=p, output_padding=op))
            c_in = out
        self.decoder_deconvs = nn.ModuleList(deconvs)
        convs = []
        for out, k, s, p in DECODER_CONVS:
            convs.append(nn.Conv1d(c_in, out, k, stride=s, padding=p))
            c_in = out
        self.decoder_convs = nn.ModuleList(convs)

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder_linear.weight.dtype

    def encode(self, labels) -> torch.Tensor:
        """(..., 200) binary labels -> (..., k) latents."""
        x = torch.as_tensor(labels).to(self.dtype)
        _check_length(x, LABEL_LEN, "LabelAE.encode")
        lead = x.shape[:-1]
        x = x.reshape(-1, 1, LABEL_LEN)
        for conv in self.encoder_convs:
            x = F.silu(numerics.conv1d(x, conv.weight, conv.bias, conv.stride[0], conv.padding[0]))
        x = x.flatten(start_dim=1)
        x = self.encoder_linear(x)
        x = numerics.layer_norm(x, self.encoder_norm.weight, self.encoder_norm.bias)
        return x.reshape(*lead, self.latent_dim)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """(..., k) latents -> (..., 200) speech probabilities."""
        z = torch.as_tensor(latent).to(self.dtype)
        _check_length(z, self.latent_dim, "LabelAE.decode")
        lead = z.shape[:-1]
        h = z.reshape(-1, self.latent_dim)
        h = F.silu(numerics.layer_norm(h, self.decoder_norm.weight, self.decoder_norm.bias))
        h = F.silu(self.decoder_fc1(h))
        h = F.silu(self.decoder_fc2(h))
        h = h.unflatten(1, UNFLATTEN)
        last = len(self.decoder_deconvs) - 1
        for i, deconv in enumerate(self.decoder_deconvs):
            h = numerics.conv_transpose1d(
                h, deconv.weight, deconv.bias, deconv.stride[0], deconv.padding[0],
                deconv.output_padding[0],
            )
            if i < last:
                h = F.silu(h)
        first, final = self.decoder_convs
        h = numerics.conv1d(h, first.weight, first.bias, first.stride[0], first.padding[0])
        h = torch.sigmoid(numerics.conv1d(h, final.weight, final.bias, final.stride[0], final.padding[0]))
        return h.reshape(*lead, LABEL_LEN)

    def forward(self, labels) -> torch.Tensor:
        return self.decode(self.encode(labels))


class BinaryLabelCodec(nn.Module):
    """
    No latent space: the flow runs directly on the 200-dim label vector,
    mapped to {-1, +1} so that the prior N(0, I) is centered between classes.
    """

    def __init__(self):
        super().__init__()
        self.latent_dim = LABEL_LEN

    def encode(self, labels) -> torch.Tensor:
        y = torch.as_tensor(labels)
        y = y.to(y.dtype if y.is_floating_point() else torch.float32)
        _check_length(y, LABEL_LEN, "BinaryLabelCodec.encode")
        return 2.0 * y - 1.0

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        _check_length(latent, LABEL_LEN, "BinaryLabelCodec.decode")
        return ((latent + 1.0) / 2.0).clamp(0.0, 1.0)

    def forward(self, labels) -> torch.Tensor:
        return self.decode(self.encode(labels))


def bce_loss(target, prediction: torch.Tensor, clamp_epsilon: float = 1e-7) -> torch.Tensor:
    """Sum over the L frames of each sequence, mean over sequences."""
    y = torch.as_tensor(target).to(prediction.dtype)
    if y.shape != prediction.shape:
        raise ShapeError(f"bce_loss: target {tuple(y.shape)} vs prediction {tuple(prediction.shape)}")
    p = prediction.clamp(clamp_epsilon, 1.0 - clamp_epsilon)
    loss = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))
    return loss.sum(dim=-1).mean()


def build_label_ae(latent_dim: int, seed: int) -> LabelAE:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return LabelAE(latent_dim)


def train_label_ae(dataset: np.ndarray, config: LabelAEConfig) -> Tuple[LabelAE, List[dict]]:
    """
    Adam on mean-over-sequences BCE. Returns the model and the loss curve
    (one record per optimizer step).
    """
    data = torch.as_tensor(np.asarray(dataset, dtype=np.float32))
    if data.dim() != 2 or len(data) == 0:
        raise ShapeError(f"train_label_ae: need a non-empty N×{LABEL_LEN} dataset, got {tuple(data.shape)}")
    _check_length(data, LABEL_LEN, "train_label_ae")

    model = build_label_ae(config.latent_dim, config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    curve = []
    step = 0

    model.train()
    pbar = tqdm(range(config.epochs), desc=f"label-ae k={config.latent_dim}", dynamic_ncols=True)
    for epoch in pbar:
        perm = torch.randperm(len(data), generator=gen)
        epoch_loss = 0.0
        for b in range(0, len(data), config.batch_size):
            y = data[perm[b:b + config.batch_size]]
            loss = bce_loss(y, model(y), config.clamp_epsilon)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"label-ae loss became non-finite at epoch {epoch} step {step}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            curve.append({"stage": "label-ae", "epoch": epoch, "step": step, "loss": loss.item()})
            epoch_loss += loss.item() * len(y)
            step += 1
        pbar.set_postfix({"bce": round(epoch_loss / len(data), 4)})
    pbar.close()
    model.eval()
    return model, curve


@torch.no_grad()
def reconstruction_der(
    model: nn.Module, dataset: np.ndarray, threshold: float = 0.5, batch_size: int = 1024
) -> float:
    """
    Frame-level DER (collar 0, identity mapping) of thresholded reconstructions
    against the original sequences, in percent.
    """
    data = np.asarray(dataset, dtype=np.uint8).reshape(-1, LABEL_LEN)
    miss = fa = speech = 0
    for b in range(0, len(data), batch_size):
        y = data[b:b + batch_size]
        hyp = binarize(model.decode(model.encode(torch.as_tensor(y))), threshold).numpy()
        miss += int(((y == 1) & (hyp == 0)).sum())
        fa += int(((y == 0) & (hyp == 1)).sum())
        speech += int(y.sum())
    if speech == 0:
        return 0.0 if fa == 0 else float("inf")
    return 100.0 * (miss + fa) / speech
