"""Past-motion encoder and noise predictor.

Both share the same per-frame building block: every joint's 3D coordinate is
lifted to ``c`` dims by one shared affine map, a fixed sinusoidal joint
encoding is added, and a small transformer attends across joints. The
encoder pools each frame over joints and runs a GRU over time; the final
hidden state is the condition ``C``. The predictor flattens each frame's
joint tokens, fuses them with ``C``, the step encoding and a frame encoding,
runs a transformer across frames and maps every frame back to per-joint 3D
noise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError


@dataclass
class NetworkConfig:
    J: int = 17
    T: int = 25
    f: int = 100
    c: int = 32
    d_model: int = 512
    n_heads: int = 4
    n_spatial_layers: int = 2
    n_temporal_layers: int = 2
    d_c: int = 512
    head_dims: tuple[int, int] = (256, 128)
    ff_mult: int = 2
    spatial_transformer: bool = True
    encoder_pool: str = "mean"  # "mean" over joint tokens, or "flatten" them
    # what the chain diffuses: raw future positions, or their offset from the
    # last observed frame; either is multiplied by target_scale
    target: str = "absolute"
    target_scale: float = 1.0

    def __post_init__(self):
        if self.encoder_pool not in ("mean", "flatten"):
            raise ValueError("network.encoder_pool must be 'mean' or 'flatten'")
        if self.target not in ("absolute", "offset"):
            raise ValueError("network.target must be 'absolute' or 'offset'")
        if not self.target_scale > 0:
            raise ValueError("network.target_scale must be positive")
        self._check()

    def _check(self):
        self.head_dims = tuple(self.head_dims)
        for name in ("J", "T", "f", "c", "d_model", "n_heads", "d_c", "ff_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"network.{name} must be positive")
        if self.n_spatial_layers < 0 or self.n_temporal_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.d_model % self.n_heads or self.c % self.n_heads:
            raise ValueError(f"d_model={self.d_model} and c={self.c} must be divisible "
                             f"by n_heads={self.n_heads}")
        if len(self.head_dims) != 2 or min(self.head_dims) < 1:
            raise ValueError("head_dims must be two positive widths")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_dims"] = list(self.head_dims)
        return d


def sinusoidal_encoding(positions: torch.Tensor, dim: int, dtype=torch.float64) -> torch.Tensor:
    """Fixed sin/cos encoding, ``[..., dim]`` for integer or real positions."""
    positions = positions.to(torch.float64)
    half = (dim + 1) // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = positions[..., None] * freqs
    enc = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    return enc[..., :dim].to(dtype)


def softmax(x: torch.Tensor) -> torch.Tensor:
    # explicit form; much faster than torch.softmax on CPU for short rows
    e = torch.exp(x - x.amax(dim=-1, keepdim=True))
    return e / e.sum(dim=-1, keepdim=True)


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, return_attn=False):
        *lead, L, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).reshape(*lead, L, 3, h, d // h).unbind(-3)
        q, k, v = (t.transpose(-2, -3) for t in (q, k, v))  # [..., h, L, dh]
        attn = softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h))
        y = (attn @ v).transpose(-2, -3).reshape(*lead, L, d)
        y = self.out(y)
        return (y, attn) if return_attn else y


class TransformerLayer(nn.Module):
    """Pre-norm self-attention + feed-forward block with residuals."""

    def __init__(self, d: int, n_heads: int, ff_mult: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, n_heads)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ff_mult * d), nn.GELU(), nn.Linear(ff_mult * d, d))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class SpatialTransformer(nn.Module):
    def __init__(self, d: int, n_heads: int, n_layers: int, ff_mult: int = 2):
        super().__init__()
        # no final norm: each token carries one joint's absolute position, and
        # normalizing it would discard that position's scale
        self.layers = nn.ModuleList(TransformerLayer(d, n_heads, ff_mult) for _ in range(n_layers))

    def forward(self, tokens):
        if not torch.isfinite(tokens).all():
            raise NumericError("spatial_transformer: non-finite input tokens")
        for layer in self.layers:
            tokens = layer(tokens)
        return tokens


class FrameEncoder(nn.Module):
    """Joint embedding + joint encoding + spatial transformer: ``[..., J, 3] -> [..., J, c]``."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.embed = nn.Linear(3, cfg.c)
        self.register_buffer("joint_pe", sinusoidal_encoding(torch.arange(cfg.J), cfg.c))
        self.transformer = SpatialTransformer(cfg.c, cfg.n_heads, cfg.n_spatial_layers, cfg.ff_mult)

    def joint_embed(self, frames):
        return self.embed(frames)

    def forward(self, frames):
        J = frames.shape[-2]
        return self.transformer(self.embed(frames) + self.joint_pe[:J])


class PastEncoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        width = cfg.c * cfg.J if cfg.encoder_pool == "flatten" else cfg.c
        if cfg.spatial_transformer:
            self.frames = FrameEncoder(cfg)
        else:
            self.pose_embed = nn.Linear(3 * cfg.J, width)
        self.gru = nn.GRU(width, cfg.d_c, batch_first=True)

    def forward(self, D):
        """``[B, T, J, 3] -> [B, d_c]``; T is read from the input."""
        if D.shape[1] < 1:
            raise ValueError("encode_past needs at least one observed frame")
        if not self.cfg.spatial_transformer:
            per_frame = self.pose_embed(D.flatten(-2))
        elif self.cfg.encoder_pool == "flatten":
            per_frame = self.frames(D).flatten(-2)
        else:
            per_frame = self.frames(D).mean(dim=-2)
        _, h = self.gru(per_frame)
        return h[-1]


class NoisePredictor(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        J, c, d = cfg.J, cfg.c, cfg.d_model
        if cfg.spatial_transformer:
            self.frames = FrameEncoder(cfg)
        else:
            self.pose_embed = nn.Linear(3 * J, c * J)
        self.cond_proj = nn.Linear(cfg.d_c, d)
        self.fuse = nn.Linear(c * J + d, d)
        self.temporal = nn.ModuleList(
            TransformerLayer(d, cfg.n_heads, cfg.ff_mult) for _ in range(cfg.n_temporal_layers))
        self.temporal_norm = nn.LayerNorm(d)
        h1, h2 = cfg.head_dims
        self.head1 = nn.Linear(d, h1)
        self.head2 = nn.Linear(h1, J * h2)
        self.head3 = nn.Linear(h2, 3)
        nn.init.zeros_(self.head3.weight)
        nn.init.zeros_(self.head3.bias)

    def forward(self, xk, k, C):
        """``xk [B, f, J, 3]``, ``k`` int/0-d/``[B]`` tensor, ``C [B, d_c]``."""
        B, f, J, _ = xk.shape
        if self.cfg.spatial_transformer:
            tok = self.frames(xk).reshape(B, f, J * self.cfg.c)
        else:
            tok = self.pose_embed(xk.reshape(B, f, J * 3))
        cond = self.cond_proj(C)[:, None, :].expand(B, f, -1)
        h = self.fuse(torch.cat([tok, cond], dim=-1))
        k = torch.as_tensor(k).reshape(-1).expand(B)
        d = self.cfg.d_model
        h = (h + sinusoidal_encoding(k, d, h.dtype)[:, None, :]
             + sinusoidal_encoding(torch.arange(f), d, h.dtype))
        for layer in self.temporal:
            h = layer(h)
        h = self.temporal_norm(h)
        h = F.gelu(self.head1(h))
        h = F.gelu(self.head2(h)).reshape(B, f, J, -1)
        return self.head3(h)


class DiffusionModel(nn.Module):
    """Encoder f_psi and noise predictor eps_theta trained together."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = PastEncoder(cfg)
        self.predictor = NoisePredictor(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return self.predictor.cond_proj.weight.dtype

    def encode_past(self, D) -> torch.Tensor:
        D = torch.as_tensor(D, dtype=self.dtype)
        if D.ndim == 3:
            return self.encoder(D[None])[0]
        return self.encoder(D)

    def predict_noise(self, xk, k, C) -> torch.Tensor:
        xk = torch.as_tensor(xk, dtype=self.dtype)
        C = torch.as_tensor(C, dtype=self.dtype)
        if xk.ndim == 3:
            return self.predictor(xk[None], k, C.reshape(1, -1))[0]
        return self.predictor(xk, k, C)

    def forward(self, xk, k, C):
        return self.predict_noise(xk, k, C)

    def to_target(self, future: torch.Tensor, observed: torch.Tensor) -> torch.Tensor:
        """Map futures ``[..., f, J, 3]`` to the diffused representation X^0."""
        if self.cfg.target == "offset":
            future = future - observed[..., -1:, :, :]
        return future * self.cfg.target_scale

    def from_target(self, x: torch.Tensor, observed: torch.Tensor) -> torch.Tensor:
        """Inverse of :meth:`to_target`; ``x`` may carry an extra sample axis
        after the batch axes of ``observed``."""
        x = x / self.cfg.target_scale
        if self.cfg.target == "offset":
            last = observed[..., -1:, :, :]
            if x.ndim == observed.ndim + 1:
                last = last.unsqueeze(-4)
            x = x + last.to(x.dtype)
        return x


def build_model(cfg: NetworkConfig, seed: int = 0, dtype=torch.float64) -> DiffusionModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DiffusionModel(cfg).double()
    return model.to(dtype)


def flatten_params(module: nn.Module) -> torch.Tensor:
    return nn.utils.parameters_to_vector(module.parameters()).detach().clone()


def unflatten_params(module: nn.Module, flat: torch.Tensor) -> None:
    n = sum(p.numel() for p in module.parameters())
    if flat.numel() != n:
        raise ValueError(f"flat vector has {flat.numel()} entries, module has {n}")
    with torch.no_grad():
        nn.utils.vector_to_parameters(flat, module.parameters())


def gradient(closure: Callable[[], torch.Tensor], module: nn.Module | Iterable) -> torch.Tensor:
    """Exact reverse-mode gradient of a scalar closure, as one flat vector."""
    if isinstance(module, nn.Module):
        named = list(module.named_parameters())
    else:
        named = [(f"param{i}", p) for i, p in enumerate(module)]
    loss = closure()
    if not torch.isfinite(loss):
        raise NumericError(f"gradient: loss closure returned {loss.item()}")
    params = [p for _, p in named]
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    else:
        grads = [None] * len(params)
    flat = []
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericError(f"gradient: non-finite gradient for parameter {name}")
        flat.append(g.reshape(-1))
    return torch.cat(flat).detach()
