"""Slow, loop-based reference implementations shared by unit and acceptance tests.

Nothing here imports the vectorized code paths under test.
"""
import math

import mpmath
import numpy as np
import torch

from motiondiff.networks import flatten_params, unflatten_params


def alpha_bar_product(K, b1, bK, digits=50):
    """Product of (1 - beta_k) at extended precision, betas interpolated in exact decimals."""
    with mpmath.workdps(digits):
        b1, bK = mpmath.mpf(str(b1)), mpmath.mpf(str(bK))
        prod = mpmath.mpf(1)
        for i in range(K):
            prod *= 1 - (b1 + (bK - b1) * i / (K - 1))
        return prod


def iterate_single_steps(s, x0, k, M, rng):
    """M scalar chains pushed through k single noising steps."""
    x = np.full(M, x0)
    for j in range(1, k + 1):
        x = math.sqrt(s.alpha(j)) * x + math.sqrt(s.beta(j)) * rng.standard_normal(M)
    return x


def central_difference(closure, module, h=1e-4):
    flat = flatten_params(module)
    fd = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            vals = []
            for sign in (1, -1):
                pert = flat.clone()
                pert[i] += sign * h
                unflatten_params(module, pert)
                vals.append(closure().item())
            fd[i] = (vals[0] - vals[1]) / (2 * h)
    unflatten_params(module, flat)
    return fd


def max_rel_err(g, fd, floor=1e-6):
    return ((g - fd).abs() / torch.clamp(torch.maximum(g.abs(), fd.abs()), min=floor)).max().item()


def dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(np.ravel(a), np.ravel(b))))


def apd_loop(Z):
    N = len(Z)
    return sum(dist(Z[i], Z[j]) for i in range(N) for j in range(N) if i != j) / (N * (N - 1))


def ade_loop(Z, X):
    return min(sum(dist(Z[i][t], X[t]) for t in range(len(X))) for i in range(len(Z))) / len(X)


def fde_loop(Z, X):
    return min(dist(z[-1], X[-1]) for z in Z)


def group_loop(obs, i, delta):
    return [g for g in range(len(obs)) if dist(obs[g][-1], obs[i][-1]) < delta]


def refine_loss_loop(Z, Y, X, lam, gamma, sigma):
    Z, Y, X = (np.asarray(a, dtype=np.float64) for a in (Z, Y, X))
    N = len(Z)
    recon = min(float(np.sum((Z[i] - X) ** 2)) for i in range(N))
    prox = sum(float(np.sum((Z[i] - Y[i]) ** 2)) for i in range(N))
    div = 0.0
    for i in range(N):
        for j in range(N):
            if i != j:
                div += math.exp(-float(np.sum((Z[i] - Z[j]) ** 2)) / sigma)
    return recon + lam * prox + gamma * div / (N * (N - 1))
