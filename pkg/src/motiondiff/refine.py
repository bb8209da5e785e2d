"""Residual graph-convolutional refiner and its training loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .diffusion import PredictionSet


@dataclass
class RefineConfig:
    n_gcn_layers: int = 12
    gcn_hidden: int = 256
    cond_dim: int = 32
    lam: float = 0.01
    gamma: float = 0.005
    sigma: float = 100.0

    def __post_init__(self):
        if self.n_gcn_layers < 2:
            raise ValueError("refine.n_gcn_layers must be >= 2")
        if self.gcn_hidden < 1 or self.cond_dim < 1:
            raise ValueError("refine widths must be positive")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("refine.lam and refine.gamma must be >= 0")
        if not self.sigma > 0:
            raise ValueError("refine.sigma must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class GraphConv(nn.Module):
    """``y = A x W + b`` over J nodes with a dense learnable adjacency."""

    def __init__(self, in_dim: int, out_dim: int, J: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        self.adjacency = nn.Parameter(torch.eye(J) + 0.01 * torch.randn(J, J))

    def forward(self, x):
        return self.adjacency @ self.linear(x)


class GCNRefiner(nn.Module):
    """``Z = Y + eps_phi(Y, C)``; each joint node carries its whole trajectory."""

    def __init__(self, J: int, f: int, d_c: int, cfg: RefineConfig):
        super().__init__()
        self.J, self.f, self.cfg = J, f, cfg
        self.cond = nn.Linear(d_c, cfg.cond_dim)
        self.gc_in = GraphConv(3 * f + cfg.cond_dim, cfg.gcn_hidden, J)
        self.hidden = nn.ModuleList(
            GraphConv(cfg.gcn_hidden, cfg.gcn_hidden, J) for _ in range(cfg.n_gcn_layers - 2))
        self.gc_out = GraphConv(cfg.gcn_hidden, 3 * f, J)
        nn.init.zeros_(self.gc_out.linear.weight)
        nn.init.zeros_(self.gc_out.linear.bias)

    def forward(self, Y, C):
        """``Y [..., f, J, 3]`` with ``C [..., d_c]`` matching Y's leading dims
        (or broadcastable to them)."""
        *lead, f, J, _ = Y.shape
        if (f, J) != (self.f, self.J):
            raise ValueError(f"refiner built for f={self.f}, J={self.J}; got f={f}, J={J}")
        nodes = Y.movedim(-2, -3).reshape(*lead, J, 3 * f)
        cond = self.cond(C)[..., None, :].expand(*lead, J, -1)
        h = torch.tanh(self.gc_in(torch.cat([nodes, cond], dim=-1)))
        for layer in self.hidden:
            h = h + torch.tanh(layer(h))
        out = self.gc_out(h).reshape(*lead, J, f, 3).movedim(-3, -2)
        return Y + out


def build_refiner(J: int, f: int, d_c: int, cfg: RefineConfig, seed: int = 0) -> GCNRefiner:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = GCNRefiner(J, f, d_c, cfg).double()
    return model


def _tensor(x):
    if isinstance(x, PredictionSet):
        x = x.samples
    return torch.as_tensor(x, dtype=torch.float64)


def refine_loss(Z, Y, X, cfg: RefineConfig) -> torch.Tensor:
    """Best-of-N reconstruction + lam * proximity to the unrefined samples +
    gamma * mean pairwise kernel exp(-d^2 / sigma).

    ``Z``, ``Y`` are ``[N, f, J, 3]`` (or ``[B, N, ...]``), ``X`` is
    ``[f, J, 3]`` (or ``[B, ...]``); a batch is averaged.
    """
    Z, Y, X = _tensor(Z), _tensor(Y), _tensor(X)
    if Z.shape != Y.shape:
        raise ValueError(f"Z {tuple(Z.shape)} and Y {tuple(Y.shape)} are not aligned")
    if Z.ndim == 4:
        Z, Y, X = Z[None], Y[None], X[None]
    N = Z.shape[1]
    if N < 2:
        raise ValueError("refine_loss needs N >= 2 (diversity term divides by N(N-1))")
    Zf, Yf, Xf = Z.flatten(2), Y.flatten(2), X.flatten(1)
    recon = ((Zf - Xf[:, None]) ** 2).sum(-1)  # [B, N]
    best = recon.argmin(dim=1, keepdim=True)  # first index on ties
    term_recon = recon.gather(1, best)[:, 0]
    term_prox = ((Zf - Yf) ** 2).sum(-1).sum(-1)
    d2 = ((Zf[:, :, None] - Zf[:, None, :]) ** 2).sum(-1)  # [B, N, N]
    off = ~torch.eye(N, dtype=torch.bool)
    kernel = torch.exp(-d2 / cfg.sigma)[:, off].sum(-1) / (N * (N - 1))
    loss = term_recon + cfg.lam * term_prox + cfg.gamma * kernel
    return loss.mean()
