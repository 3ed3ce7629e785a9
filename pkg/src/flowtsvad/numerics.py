# src/flowtsvad/numerics.py
"""
Differentiable building blocks shared by every network in the package.

Tensors are torch tensors and trainable quantities are `nn.Parameter`s
reachable through `named_parameters()`; reverse-mode gradients come from
torch.autograd. The functions here add the shape contracts (with a
dimension report on failure) and the finite-difference verifier.
"""
import math
from typing import Callable, Iterable, Optional, Sequence

import torch
import torch.nn.functional as F

from src.flowtsvad.errors import DivergenceError, ShapeError

ADAIN_EPSILON = 1e-5
LAYER_NORM_EPSILON = 1e-5


# --------------------------
# convolution
# --------------------------
def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv_transpose_output_length(
    length: int, kernel: int, stride: int = 1, padding: int = 0, output_padding: int = 0
) -> int:
    return (length - 1) * stride - 2 * padding + kernel + output_padding


def _as_batched(x: torch.Tensor, op: str):
    if x.dim() == 2:
        return x.unsqueeze(0), True
    if x.dim() == 3:
        return x, False
    raise ShapeError(f"{op}: expected C×T or B×C×T input, got shape {tuple(x.shape)}")


def conv1d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> torch.Tensor:
    """
    1-D convolution of a C_in×T (or B×C_in×T) input with C_out×(C_in/groups)×K weights.
    Output length is floor((T + 2·padding − K)/stride) + 1.
    """
    xb, squeeze = _as_batched(x, "conv1d")
    if weight.dim() != 3:
        raise ShapeError(f"conv1d: weight must be C_out×C_in×K, got shape {tuple(weight.shape)}")
    c_in, length = xb.shape[1], xb.shape[2]
    c_out, c_w, kernel = weight.shape
    if c_in != c_w * groups:
        raise ShapeError(
            f"conv1d: input has {c_in} channels but weight {tuple(weight.shape)} "
            f"with groups={groups} expects {c_w * groups}"
        )
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    if length + 2 * padding < kernel:
        raise ShapeError(
            f"conv1d: input length {length} with padding {padding} is shorter than kernel {kernel}"
        )
    out = F.conv1d(xb, weight, bias, stride=stride, padding=padding, groups=groups)
    return out.squeeze(0) if squeeze else out


def conv_transpose1d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> torch.Tensor:
    """
    Transposed 1-D convolution with C_in×C_out×K weights, the adjoint of `conv1d`
    with the same weights, stride and padding.
    """
    xb, squeeze = _as_batched(x, "conv_transpose1d")
    if weight.dim() != 3:
        raise ShapeError(
            f"conv_transpose1d: weight must be C_in×C_out×K, got shape {tuple(weight.shape)}"
        )
    if xb.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"conv_transpose1d: input has {xb.shape[1]} channels but weight "
            f"{tuple(weight.shape)} expects {weight.shape[0]}"
        )
    if stride < 1:
        raise ShapeError(f"conv_transpose1d: stride must be >= 1, got {stride}")
    if not 0 <= output_padding < stride:
        raise ShapeError(
            f"conv_transpose1d: output_padding {output_padding} must be in [0, stride={stride})"
        )
    out = F.conv_transpose1d(
        xb, weight, bias, stride=stride, padding=padding, output_padding=output_padding
    )
    return out.squeeze(0) if squeeze else out


# --------------------------
# attention / normalization
# --------------------------
def attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    return_weights: bool = False,
):
    """
    softmax(Q·Kᵀ/√d)·V over the last two axes; leading axes are batch axes.
    """
    if queries.shape[-1] != keys.shape[-1]:
        raise ShapeError(
            f"attention: query dim {queries.shape[-1]} != key dim {keys.shape[-1]}"
        )
    if keys.shape[-2] != values.shape[-2]:
        raise ShapeError(
            f"attention: {keys.shape[-2]} keys but {values.shape[-2]} values"
        )
    scores = queries @ keys.transpose(-1, -2) / math.sqrt(queries.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    out = weights @ values
    if return_weights:
        return out, weights
    return out


def adain(
    features: torch.Tensor,
    scale: torch.Tensor,
    shift: torch.Tensor,
    epsilon: float = ADAIN_EPSILON,
) -> torch.Tensor:
    """
    Adaptive instance normalization: statistics over the N axis (−2) per feature,
    then an externally supplied scale and shift (shape d, or batch×d).
    """
    if features.dim() < 2 or features.shape[-2] < 1:
        raise ShapeError(f"adain: expected ...×N×d features with N >= 1, got {tuple(features.shape)}")
    d = features.shape[-1]
    if scale.shape[-1] != d or shift.shape[-1] != d:
        raise ShapeError(
            f"adain: feature dim {d} but scale {tuple(scale.shape)} / shift {tuple(shift.shape)}"
        )
    mean = features.mean(dim=-2, keepdim=True)
    var = features.var(dim=-2, unbiased=False, keepdim=True)
    normed = (features - mean) / torch.sqrt(var + epsilon)
    return scale.unsqueeze(-2) * normed + shift.unsqueeze(-2)


def layer_norm(
    x: torch.Tensor,
    weight: Optional[torch.Tensor] = None,
    bias: Optional[torch.Tensor] = None,
    epsilon: float = LAYER_NORM_EPSILON,
) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), weight, bias, epsilon)


def squared_error_sum(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Sum of squares over the last axis, mean over every other axis."""
    if prediction.shape != target.shape:
        raise ShapeError(
            f"squared_error_sum: prediction {tuple(prediction.shape)} vs target {tuple(target.shape)}"
        )
    return ((prediction - target) ** 2).sum(dim=-1).mean()


# --------------------------
# finite-difference verification
# --------------------------
def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    epsilon: float = 1e-6,
    params: Optional[Iterable[torch.Tensor]] = None,
    samples_per_tensor: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-12,
) -> float:
    """
    Compare autograd gradients with central differences.

    fn(*inputs) may return any shape; it is reduced to a scalar with a fixed
    seeded random projection. Gradients are checked w.r.t. every input and every
    tensor in `params` (module parameters, perturbed in place). With
    `samples_per_tensor`, only that many seeded coordinates per tensor are checked.

    Returns max |analytic − fd| / max(|analytic|, |fd|, floor).
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ShapeError(f"grad_check: epsilon {epsilon} outside [1e-7, 1e-4]")

    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    extra = list(params or [])
    tensors = leaves + extra
    for t in tensors:
        if t.dtype != torch.float64:
            raise ShapeError(f"grad_check: requires float64 tensors, got {t.dtype}")

    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out0 = fn(*leaves)
    if not torch.isfinite(out0).all():
        raise DivergenceError("grad_check: non-finite function output")
    proj = torch.randn(out0.shape, generator=gen, dtype=torch.float64)

    def scalar():
        return (fn(*leaves) * proj).sum()

    value = scalar()
    if value.requires_grad:
        grads = torch.autograd.grad(value, tensors, allow_unused=True)
    else:
        grads = [None] * len(tensors)
    grads = [torch.zeros_like(t) if g is None else g.detach() for t, g in zip(tensors, grads)]

    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            if not torch.isfinite(g).all():
                raise DivergenceError("grad_check: non-finite analytic gradient")
            flat = t.data.view(-1)
            gflat = g.reshape(-1)
            n = flat.numel()
            if samples_per_tensor is not None and samples_per_tensor < n:
                idx = torch.randperm(n, generator=gen)[:samples_per_tensor].tolist()
            else:
                idx = range(n)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                f_plus = scalar().item()
                flat[i] = orig - epsilon
                f_minus = scalar().item()
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * epsilon)
                analytic = gflat[i].item()
                if not (math.isfinite(fd) and math.isfinite(analytic)):
                    raise DivergenceError(f"grad_check: non-finite value at coordinate {i}")
                rel = abs(analytic - fd) / max(abs(analytic), abs(fd), floor)
                worst = max(worst, rel)
    return worst
