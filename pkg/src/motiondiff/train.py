"""Optimization loops for the diffusion model and the refiner."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint, state_digest
from .config import OptimConfig, ScheduleConfig, TrainConfig
from .data import WindowPair
from .diffusion import sample_chains, simplified_loss
from .errors import NumericError
from .networks import DiffusionModel, NetworkConfig, build_model
from .refine import GCNRefiner, RefineConfig, build_refiner, refine_loss
from .schedule import NoiseSchedule, build_linear_schedule

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "loss", "lr", "wallclock_s"]


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for g in grads:
        if not torch.isfinite(g).all():
            raise NumericError("adam_step: non-finite gradient")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


def lr_at(opt: OptimConfig, epoch: int) -> float:
    """Constant through ``decay_start``, then linear down to ``decay_final * lr``
    at the last epoch. ``epoch`` is 1-based."""
    if epoch <= opt.decay_start or opt.epochs == opt.decay_start:
        return opt.lr
    frac = (epoch - opt.decay_start) / (opt.epochs - opt.decay_start)
    return opt.lr * (1.0 - (1.0 - opt.decay_final) * frac)


def schedule_from(cfg: ScheduleConfig) -> NoiseSchedule:
    return build_linear_schedule(cfg.K, cfg.beta_1, cfg.beta_K)


def stack_windows(windows: Sequence[WindowPair]) -> tuple[torch.Tensor, torch.Tensor]:
    if not windows:
        raise ValueError("empty dataset: no training windows")
    obs = torch.from_numpy(np.stack([w.observed for w in windows]))
    fut = torch.from_numpy(np.stack([w.future for w in windows]))
    return obs, fut


def dtype_of(opt: OptimConfig) -> torch.dtype:
    return torch.float32 if opt.precision == "float32" else torch.float64


def _epoch_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, epoch]))


class CSVLog:
    def __init__(self, path, wallclock: bool = True):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        self.wallclock = wallclock
        self.t0 = time.perf_counter()

    def add(self, epoch: int, loss: float, lr: float) -> None:
        wall = time.perf_counter() - self.t0 if self.wallclock else 0.0
        self.rows.append({"epoch": epoch, "loss": loss, "lr": lr, "wallclock_s": wall})
        if self.path:
            with open(self.path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(LOG_COLUMNS)
                for r in self.rows:
                    w.writerow([r["epoch"], f"{r['loss']:.9g}", f"{r['lr']:.9g}",
                                f"{r['wallclock_s']:.3f}"])

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]


@dataclass
class DiffusionRun:
    model: DiffusionModel
    schedule: NoiseSchedule
    losses: list[float] = field(default_factory=list)
    best_state: dict | None = None


def diffusion_checkpoint_payload(model: DiffusionModel, schedule_cfg: ScheduleConfig) -> tuple[dict, dict]:
    config = {"network": model.cfg.to_dict(),
              "schedule": {"K": schedule_cfg.K, "beta_1": schedule_cfg.beta_1,
                           "beta_K": schedule_cfg.beta_K}}
    return config, model.state_dict()


def save_diffusion(path, model: DiffusionModel, schedule_cfg: ScheduleConfig,
                   state: dict | None = None, meta: dict | None = None) -> None:
    config, cur = diffusion_checkpoint_payload(model, schedule_cfg)
    save_checkpoint(path, "diffusion", config, state if state is not None else cur, meta)


def load_diffusion(path, dtype=torch.float64) -> tuple[DiffusionModel, NoiseSchedule, ScheduleConfig]:
    kind, config, state, _ = load_checkpoint(path)
    if kind != "diffusion":
        raise ValueError(f"{path}: expected a diffusion checkpoint, got {kind!r}")
    net = NetworkConfig(**config["network"])
    model = DiffusionModel(net).double()
    model.load_state_dict(state)
    model.eval()
    scfg = ScheduleConfig(**config["schedule"])
    return model.to(dtype), schedule_from(scfg), scfg


def train_diffusion(windows: Sequence[WindowPair], cfg: TrainConfig, out_dir=None,
                    wallclock: bool = True) -> DiffusionRun:
    """Minimize the noise-prediction loss jointly over encoder and predictor.

    Each epoch reshuffles the windows and draws one (k, eps) pair per window
    per ``k_per_example`` repeat from a generator seeded by (seed, epoch).
    """
    opt = cfg.train
    dtype = dtype_of(opt)
    obs, fut = (t.to(dtype) for t in stack_windows(windows))
    schedule = schedule_from(cfg.schedule)
    model = build_model(cfg.network, seed=opt.seed, dtype=dtype)
    fut = model.to_target(fut, obs)
    model.train()
    params = list(model.parameters())
    state = AdamState.zeros_like(params)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    logger = CSVLog(out_dir / "diffusion_log.csv" if out_dir else None, wallclock)
    best = (float("inf"), None)
    M = obs.shape[0]
    shape = tuple(fut.shape[1:])
    for epoch in range(1, opt.epochs + 1):
        rng = _epoch_rng(opt.seed, epoch)
        lr = lr_at(opt, epoch)
        order = rng.permutation(M)
        total = 0.0
        for s in range(0, M, opt.batch_size):
            idx = torch.from_numpy(order[s:s + opt.batch_size])
            D = obs[idx].repeat(opt.k_per_example, 1, 1, 1)
            x0 = fut[idx].repeat(opt.k_per_example, 1, 1, 1)
            B = x0.shape[0]
            k = torch.from_numpy(rng.integers(1, schedule.K + 1, size=B))
            eps = torch.from_numpy(rng.standard_normal((B, *shape))).to(dtype)
            C = model.encoder(D)
            loss = simplified_loss(schedule, model.predictor, x0, C, k, eps)
            if not torch.isfinite(loss):
                raise NumericError(f"train_diffusion: non-finite loss at epoch {epoch}")
            grads = torch.autograd.grad(loss, params)
            adam_step(params, grads, state, lr, opt.beta1, opt.beta2, opt.eps)
            total += loss.item() * B
        epoch_loss = total / (M * opt.k_per_example)
        logger.add(epoch, epoch_loss, lr)
        log.info("diffusion epoch %d loss %.6f lr %.3g", epoch, epoch_loss, lr)
        if epoch_loss < best[0]:
            best = (epoch_loss, {k: v.detach().clone() for k, v in model.state_dict().items()})
        if out_dir:
            save_diffusion(out_dir / "diffusion_last.ckpt", model, cfg.schedule,
                           meta={"epoch": epoch, "loss": epoch_loss})
            save_diffusion(out_dir / "diffusion_best.ckpt", model, cfg.schedule, state=best[1],
                           meta={"loss": best[0]})
    model.eval()
    return DiffusionRun(model, schedule, logger.losses, best[1])


@dataclass
class RefineRun:
    refiner: GCNRefiner
    losses: list[float] = field(default_factory=list)


def save_refiner(path, refiner: GCNRefiner, state: dict | None = None,
                 meta: dict | None = None) -> None:
    config = {"refine": refiner.cfg.to_dict(), "J": refiner.J, "f": refiner.f,
              "d_c": refiner.cond.in_features}
    save_checkpoint(path, "refiner", config, state if state is not None else refiner.state_dict(), meta)


def load_refiner(path, dtype=torch.float64) -> GCNRefiner:
    kind, config, state, _ = load_checkpoint(path)
    if kind != "refiner":
        raise ValueError(f"{path}: expected a refiner checkpoint, got {kind!r}")
    ref = GCNRefiner(config["J"], config["f"], config["d_c"], RefineConfig(**config["refine"])).double()
    ref.load_state_dict(state)
    return ref.to(dtype)


def sample_seeds(seed: int, keys: Sequence, stream: int = 0) -> list[int]:
    """One sampling seed per key (an int or a tuple of ints), derived from a base seed."""
    out = []
    for key in keys:
        key = key if isinstance(key, tuple) else (key,)
        ss = np.random.SeedSequence([int(seed), stream, *map(int, key)])
        out.append(int(ss.generate_state(1, np.uint64)[0] >> 1))
    return out


@torch.no_grad()
def sample_windows(model: DiffusionModel, schedule: NoiseSchedule, obs: torch.Tensor, N: int,
                   seeds: Sequence[int], shape, chunk: int = 64, record=()):
    """Diffusion samples ``[M, N, *shape]`` for observations ``[M, T, J, 3]``,
    processed ``chunk`` observations at a time. Samples and recorded
    intermediate states are mapped back to joint positions."""
    outs, kept = [], {}
    for s in range(0, obs.shape[0], chunk):
        D = obs[s:s + chunk].to(model.dtype)
        C = model.encoder(D)
        Y, rec = sample_chains(schedule, model.predictor, C, N, seeds[s:s + chunk], shape, record)
        outs.append(model.from_target(Y, D))
        for k, v in rec.items():
            kept.setdefault(k, []).append(model.from_target(v, D))
    return torch.cat(outs), {k: torch.cat(v) for k, v in kept.items()}


def train_refiner(windows: Sequence[WindowPair], diffusion: DiffusionModel, schedule: NoiseSchedule,
                  cfg: TrainConfig, out_dir=None, wallclock: bool = True) -> RefineRun:
    """Fit the residual GCN on N diffusion samples per window, with the
    diffusion model frozen. Samples are redrawn with fresh seeds every
    ``resample_every`` epochs."""
    rt, opt = cfg.refine_train, cfg.train
    if rt.N < 2:
        raise ValueError("refiner training needs N >= 2")
    dtype = dtype_of(opt)
    obs, fut = (t.to(dtype) for t in stack_windows(windows))
    diffusion = diffusion.to(dtype).eval()
    for p in diffusion.parameters():
        p.requires_grad_(False)
    frozen = state_digest(diffusion)
    net = diffusion.cfg
    refiner = build_refiner(net.J, net.f, net.d_c, cfg.refine, seed=rt.seed).to(dtype)
    params = list(refiner.parameters())
    state = AdamState.zeros_like(params)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    logger = CSVLog(out_dir / "refine_log.csv" if out_dir else None, wallclock)
    M = obs.shape[0]
    shape = tuple(fut.shape[1:])
    best = (float("inf"), None)
    with torch.no_grad():
        C_all = diffusion.encoder(obs)
    Y_all = None
    for epoch in range(1, rt.epochs + 1):
        if (epoch - 1) % rt.resample_every == 0:
            seeds = sample_seeds(rt.seed, [(epoch, i) for i in range(M)], stream=2)
            Y_all, _ = sample_windows(diffusion, schedule, obs, rt.N, seeds, shape)
        rng = _epoch_rng(rt.seed, epoch, stream=1)
        order = rng.permutation(M)
        total = 0.0
        for s in range(0, M, rt.batch_size):
            idx = torch.from_numpy(order[s:s + rt.batch_size])
            Y, C = Y_all[idx], C_all[idx]
            Z = refiner(Y, C[:, None, :])
            loss = refine_loss(Z, Y, fut[idx], cfg.refine)
            if not torch.isfinite(loss):
                raise NumericError(f"train_refiner: non-finite loss at epoch {epoch}")
            grads = torch.autograd.grad(loss, params)
            adam_step(params, grads, state, rt.lr, opt.beta1, opt.beta2, opt.eps)
            total += loss.item() * len(idx)
        epoch_loss = total / M
        logger.add(epoch, epoch_loss, rt.lr)
        log.info("refine epoch %d loss %.6f", epoch, epoch_loss)
        if epoch_loss < best[0]:
            best = (epoch_loss, {k: v.detach().clone() for k, v in refiner.state_dict().items()})
        if out_dir:
            save_refiner(out_dir / "refiner_last.ckpt", refiner, meta={"epoch": epoch})
            save_refiner(out_dir / "refiner_best.ckpt", refiner, state=best[1], meta={"loss": best[0]})
    if state_digest(diffusion) != frozen:
        raise RuntimeError("diffusion parameters changed during refiner training")
    return RefineRun(refiner, logger.losses)
