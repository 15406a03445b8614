"""
Differentiable building blocks for the autoencoders and the latent GAN.

Operators are thin, checked wrappers over torch autograd; modules wrap them
with parameters. Conventions: 1D tensors are (batch, channels, time), 2D
tensors are (batch, channels, freq, time). Layers use torch's default
fan-in scaled uniform initialization.
"""
import logging
import math
from typing import Callable, Iterable, Optional, Sequence, Union

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parametrize

from latentwave import settings
from latentwave.errors import NumericalError, ShapeError

logger = logging.getLogger("latentwave.nn_core")

Padding = Union[int, str, None]


def _padding(padding: Padding) -> int:
    if padding in (None, "none"):
        return 0
    return int(padding)


def conv1d(x, weight, bias=None, stride: int = 1, padding: Padding = None) -> torch.Tensor:
    """Cross-correlation over time. With no padding, T_out = (T - K) // stride + 1."""
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d expects {weight.shape[1]} input channels, got {x.shape[1]}")
    pad = _padding(padding)
    if x.shape[-1] + 2 * pad < weight.shape[-1]:
        raise ShapeError(f"Kernel of {weight.shape[-1]} is longer than input of {x.shape[-1]}")
    return F.conv1d(x, weight, bias, stride=stride, padding=pad)


def conv_transpose1d(x, weight, bias=None, stride: int = 1) -> torch.Tensor:
    """Adjoint of `conv1d`; T_out = (T - 1) * stride + K."""
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose1d expects {weight.shape[0]} input channels, got {x.shape[1]}")
    if x.shape[-1] < 1:
        raise ShapeError("Empty input")
    return F.conv_transpose1d(x, weight, bias, stride=stride)


def conv2d(x, weight, bias=None, stride=1, padding: Padding = None) -> torch.Tensor:
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d expects {weight.shape[1]} input channels, got {x.shape[1]}")
    pad = _padding(padding)
    if any(s + 2 * pad < k for s, k in zip(x.shape[-2:], weight.shape[-2:])):
        raise ShapeError(f"Kernel {tuple(weight.shape[-2:])} is larger than input {tuple(x.shape[-2:])}")
    return F.conv2d(x, weight, bias, stride=stride, padding=pad)


def tanh(x):
    return torch.tanh(x)


def leaky_relu(x, slope: float = settings.LEAKY_SLOPE):
    return F.leaky_relu(x, slope)


def sigmoid(x):
    return torch.sigmoid(x)


# Fixed-order operators
# ---------------------
# Built from correctly rounded elementwise ops only, reduced in an order fixed
# per output position: the bits at a position depend on its receptive field
# and not on the window it was computed in.

# Elements of the (batch, out, in, time) product built per conv tap.
ORDERED_CHUNK = 1 << 22

_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_INV_LN2 = 1.44269504088896338700e00
_EXP_LIMIT = 60.0
_EXP_DEGREE = 13
_POW2_MIN = -90


def _pairwise_sum(p: torch.Tensor, dim: int) -> torch.Tensor:
    while p.shape[dim] > 1:
        n = p.shape[dim]
        half = n // 2
        s = p.narrow(dim, 0, half) + p.narrow(dim, half, half)
        if n % 2:
            s = torch.cat([s, p.narrow(dim, n - 1, 1)], dim=dim)
        p = s
    return p.squeeze(dim)


def ordered_conv1d(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Stride-1, padding-free cross-correlation. Input channels are summed
    pairwise, taps left to right, bias last; the result at a position depends
    only on its receptive field.
    """
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d expects {weight.shape[1]} input channels, got {x.shape[1]}")
    B, C, K = x.shape[0], x.shape[1], weight.shape[-1]
    T = x.shape[-1] - K + 1
    if T < 1:
        raise ShapeError(f"Kernel of {K} is longer than input of {x.shape[-1]}")
    step = max(1, ORDERED_CHUNK // max(1, B * C * T))
    outs = []
    for lo in range(0, weight.shape[0], step):
        w = weight[lo:lo + step]
        acc = None
        for k in range(K):
            tap = _pairwise_sum(w[None, :, :, k, None] * x[:, None, :, k:k + T], dim=2)
            acc = tap if acc is None else acc + tap
        if bias is not None:
            acc = acc + bias[lo:lo + step, None]
        outs.append(acc)
    return outs[0] if len(outs) == 1 else torch.cat(outs, dim=1)


def _pow2_table(like: torch.Tensor) -> torch.Tensor:
    return torch.tensor([2.0 ** i for i in range(_POW2_MIN, -_POW2_MIN + 1)], dtype=like.dtype, device=like.device)


def ordered_exp(x: torch.Tensor) -> torch.Tensor:
    """exp on [-60, 60] by range reduction and a degree-13 Taylor polynomial."""
    x = x.clamp(-_EXP_LIMIT, _EXP_LIMIT)
    n = torch.round(x * _INV_LN2)
    r = (x - n * _LN2_HI) - n * _LN2_LO
    coefs = [1.0 / math.factorial(k) for k in range(_EXP_DEGREE + 1)]
    p = r * coefs[-1] + coefs[-2]
    for c in reversed(coefs[:-2]):
        p = p * r + c
    scale = _pow2_table(x)[(n - _POW2_MIN).long()]
    return p * scale


def ordered_tanh(x: torch.Tensor) -> torch.Tensor:
    return 1.0 - 2.0 / (ordered_exp(2.0 * x) + 1.0)


def ordered_sigmoid(x: torch.Tensor) -> torch.Tensor:
    return 1.0 / (1.0 + ordered_exp(-x))


def window_mean(x: torch.Tensor, window: int) -> torch.Tensor:
    """Valid sliding mean over time, summed left to right."""
    if window > x.shape[-1]:
        raise ShapeError(f"Window {window} is longer than input of {x.shape[-1]}")
    T = x.shape[-1] - window + 1
    acc = x[..., :T]
    for j in range(1, window):
        acc = acc + x[..., j:j + T]
    return acc / window


def instance_norm(x: torch.Tensor, window: Optional[int] = None, eps: float = 1e-5) -> torch.Tensor:
    """
    Per-channel normalization over time.

    With `window=None` the statistics span the whole sequence. With an integer
    window they are computed over a sliding window (no padding), and the output
    is the centre-cropped input of length T - window + 1.
    """
    if window is None:
        mean = x.mean(dim=-1, keepdim=True)
        var = x.var(dim=-1, unbiased=False, keepdim=True)
        return (x - mean) / torch.sqrt(var + eps)
    if window % 2 != 1 or window > x.shape[-1]:
        raise ShapeError(f"Normalization window {window} must be odd and <= {x.shape[-1]}")
    mean = window_mean(x, window)
    var = (window_mean(x * x, window) - mean * mean).clamp(min=0.0)
    half = window // 2
    center = x[..., half:x.shape[-1] - half]
    return (center - mean) / torch.sqrt(var + eps)


def sa_adain(
    x: torch.Tensor,
    coords: torch.Tensor,
    style: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    window: Optional[int] = None,
) -> torch.Tensor:
    """
    Spatially aligned AdaIN.

    Args:
        x: features (B, C, T).
        coords: per-timestep vectors (B, D, T_out) aligned with the normalized output.
        style: (B, S), shared by every timestep.
        weight, bias: linear map from D + S to 2C (scale offsets, then shifts).
        window: statistics window, see `instance_norm`.

    Returns:
        norm(x) * (1 + scale(t)) + shift(t), shape (B, C, T_out).
    """
    normed = instance_norm(x, window)
    if coords.shape[-1] != normed.shape[-1]:
        raise ShapeError(f"coords length {coords.shape[-1]} != feature length {normed.shape[-1]}")
    z = torch.cat([coords, style[:, :, None].expand(-1, -1, coords.shape[-1])], dim=1)
    mod = ordered_conv1d(z, weight[:, :, None], bias)
    scale, shift = mod.chunk(2, dim=1)
    return normed * (1.0 + scale) + shift


def moving_average(x: torch.Tensor, window: Optional[int]) -> torch.Tensor:
    """Global average over time (window None, keeps a length-1 axis) or valid sliding mean."""
    if window is None:
        return x.mean(dim=-1, keepdim=True)
    return window_mean(x, window)


def sle_gate(
    low_res: torch.Tensor,
    high_res: torch.Tensor,
    w1: torch.Tensor,
    b1: torch.Tensor,
    w2: torch.Tensor,
    b2: torch.Tensor,
    window: Optional[int] = None,
) -> torch.Tensor:
    """
    Skip-layer excitation: pool `low_res`, two 1x1 convs, sigmoid gate on `high_res`.

    `window=None` pools globally and broadcasts the gate over time; an integer
    window pools locally so that the gate stays aligned with `high_res`.
    """
    if w2.shape[0] != high_res.shape[1]:
        raise ShapeError(f"Gate has {w2.shape[0]} channels, high_res has {high_res.shape[1]}")
    pooled = moving_average(low_res, window)
    if window is not None and pooled.shape[-1] != high_res.shape[-1]:
        raise ShapeError(f"Pooled length {pooled.shape[-1]} != high_res length {high_res.shape[-1]}")
    h = leaky_relu(ordered_conv1d(pooled, w1[:, :, None], b1))
    gate = ordered_sigmoid(ordered_conv1d(h, w2[:, :, None], b2))
    return high_res * gate


def spectral_norm_apply(
    weight: torch.Tensor,
    u: torch.Tensor,
    n_power_iterations: int = 1,
    eps: float = settings.SPECTRAL_NORM_EPS,
    v: Optional[torch.Tensor] = None,
):
    """
    Power-iteration estimate of the largest singular value.

    Returns:
        (weight / sigma, u, v, sigma). The singular-vector estimates carry no
        gradient; sigma = u^T W v does.
    """
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        for _ in range(n_power_iterations):
            v = F.normalize(mat.t() @ u, dim=0, eps=eps)
            u = F.normalize(mat @ v, dim=0, eps=eps)
        if v is None:
            v = F.normalize(mat.t() @ u, dim=0, eps=eps)
    sigma = torch.dot(u, mat @ v).clamp(min=eps)
    return weight / sigma, u, v, sigma


class SpectralNorm(nn.Module):
    """Parametrization dividing a weight by its running spectral-norm estimate."""

    def __init__(self, weight: torch.Tensor, n_power_iterations: int = 1):
        super().__init__()
        self.n_power_iterations = n_power_iterations
        u = F.normalize(torch.randn(weight.shape[0], dtype=weight.dtype), dim=0, eps=settings.SPECTRAL_NORM_EPS)
        _, u, v, _ = spectral_norm_apply(weight.detach(), u, 15)
        self.register_buffer("u", u)
        self.register_buffer("v", v)

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        if not self.training:
            return spectral_norm_apply(weight, self.u, 0, v=self.v)[0]
        w, u, v, _ = spectral_norm_apply(weight, self.u, self.n_power_iterations)
        with torch.no_grad():
            self.u.copy_(u)
            self.v.copy_(v)
        return w


def spectral_norm(module: nn.Module, name: str = "weight") -> nn.Module:
    parametrize.register_parametrization(module, name, SpectralNorm(getattr(module, name)))
    return module


def make_conv1d(in_ch, out_ch, kernel_size, stride=1, padding=0, sn=False, bias=True) -> nn.Module:
    layer = nn.Conv1d(in_ch, out_ch, kernel_size, stride=stride, padding=padding, bias=bias)
    return spectral_norm(layer) if sn else layer


def make_conv_transpose1d(in_ch, out_ch, kernel_size, stride=1, sn=False, bias=True) -> nn.Module:
    layer = nn.ConvTranspose1d(in_ch, out_ch, kernel_size, stride=stride, bias=bias)
    return spectral_norm(layer) if sn else layer


def make_conv2d(in_ch, out_ch, kernel_size, stride=1, padding=0, sn=False, bias=True) -> nn.Module:
    layer = nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=padding, bias=bias)
    return spectral_norm(layer) if sn else layer


class SAAdaIN(nn.Module):
    def __init__(self, channels: int, coord_dim: int, style_dim: int, window: Optional[int] = None):
        super().__init__()
        self.window = window
        self.weight = nn.Parameter(torch.randn(2 * channels, coord_dim + style_dim) * 0.02)
        self.bias = nn.Parameter(torch.zeros(2 * channels))

    @property
    def shrink(self) -> int:
        return 0 if self.window is None else self.window - 1

    def forward(self, x, coords, style):
        return sa_adain(x, coords, style, self.weight, self.bias, self.window)


class SLE(nn.Module):
    def __init__(self, low_channels: int, high_channels: int, window: Optional[int] = None):
        super().__init__()
        hidden = max(4, high_channels // 2)
        self.window = window
        self.w1 = nn.Parameter(torch.randn(hidden, low_channels) / low_channels ** 0.5)
        self.b1 = nn.Parameter(torch.zeros(hidden))
        self.w2 = nn.Parameter(torch.randn(high_channels, hidden) / hidden ** 0.5)
        self.b2 = nn.Parameter(torch.zeros(high_channels))

    def forward(self, low_res, high_res):
        return sle_gate(low_res, high_res, self.w1, self.b1, self.w2, self.b2, self.window)


def make_optimizer(params: Iterable[torch.nn.Parameter], lr: float = settings.ADAM_LR) -> torch.optim.Adam:
    return torch.optim.Adam(
        [p for p in params if p.requires_grad],
        lr=lr,
        betas=(settings.ADAM_BETA1, settings.ADAM_BETA2),
        eps=settings.ADAM_EPS,
    )


def adam_step(optimizer: torch.optim.Optimizer):
    """Bias-corrected Adam update; refuses non-finite gradients."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericalError("Non-finite gradient before optimizer step")
    optimizer.step()


def hinge_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return F.relu(1.0 - d_real).mean() + F.relu(1.0 + d_fake).mean()


def hinge_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return -d_fake.mean()


def r1_penalty(d: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor, gamma: float = settings.R1_GAMMA):
    """(gamma / 2) * E ||grad_x D(x)||^2 over real inputs, differentiable w.r.t. D's weights."""
    real = real.detach().requires_grad_(True)
    out = d(real)
    if not out.requires_grad:
        return torch.zeros((), dtype=real.dtype, device=real.device)
    (grad,) = torch.autograd.grad(out.sum(), real, create_graph=True, allow_unused=True)
    if grad is None:
        return torch.zeros((), dtype=real.dtype, device=real.device)
    return 0.5 * gamma * grad.square().flatten(1).sum(dim=1).mean()


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    modules: Sequence[nn.Module] = (),
    eps: float = 1e-6,
    seed: int = 0,
) -> float:
    """
    Max relative error between autograd and central finite differences.

    The output of `fn` is reduced with a fixed random projection; every input
    and every parameter of `modules` is checked. Run in float64.
    """
    modes = [m.training for m in modules]
    for m in modules:
        m.eval()
    try:
        inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
        params = [p for m in modules for p in m.parameters() if p.requires_grad]
        targets = inputs + params
        gen = torch.Generator().manual_seed(seed)
        out = fn(*inputs)
        proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)

        def loss():
            return (fn(*inputs) * proj).sum()

        analytic = torch.autograd.grad((out * proj).sum(), targets, allow_unused=True)
        worst = 0.0
        with torch.no_grad():
            for t, a in zip(targets, analytic):
                a = torch.zeros_like(t) if a is None else a
                numeric = torch.zeros_like(t)
                flat, nflat = t.view(-1), numeric.view(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + eps
                    plus = loss().item()
                    flat[i] = orig - eps
                    minus = loss().item()
                    flat[i] = orig
                    nflat[i] = (plus - minus) / (2 * eps)
                scale = max(a.abs().max().item(), numeric.abs().max().item(), 1e-12)
                worst = max(worst, (a - numeric).abs().max().item() / scale)
        return worst
    finally:
        for m, mode in zip(modules, modes):
            m.train(mode)
