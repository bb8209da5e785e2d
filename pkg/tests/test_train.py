import csv

import numpy as np
import pytest
import torch

from motiondiff.config import desk_profile
from motiondiff.data import make_windows, synth_kinematic_chain
from motiondiff.diffusion import sample_chains
from motiondiff.errors import NumericError
from motiondiff.metrics import apd
from motiondiff.train import (AdamState, adam_step, load_diffusion, lr_at, sample_seeds,
                              sample_windows, train_diffusion, train_refiner)


def tiny_cfg(seed=0, epochs=2):
    cfg = desk_profile()
    cfg.data.T, cfg.data.f = 3, 4
    cfg.network.T, cfg.network.f = 3, 4
    cfg.network.J, cfg.network.c, cfg.network.d_model, cfg.network.d_c = 3, 4, 8, 8
    cfg.network.n_heads, cfg.network.head_dims = 2, (8, 4)
    cfg.schedule.K = 10
    cfg.train.seed, cfg.train.epochs, cfg.train.decay_start = seed, epochs, 1
    cfg.train.batch_size, cfg.train.lr = 4, 5e-3
    cfg.refine.n_gcn_layers, cfg.refine.gcn_hidden, cfg.refine.cond_dim = 2, 8, 4
    cfg.refine_train.N, cfg.refine_train.epochs, cfg.refine_train.batch_size = 3, 2, 4
    return cfg


def tiny_windows(n=8, seed=0):
    seq = synth_kinematic_chain(3, 7 + n - 1, seed)
    return make_windows(seq, 3, 4, 1, source="s")[:n]


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    state = AdamState([torch.tensor([0.5, 0.5], dtype=torch.float64)],
                      [torch.tensor([0.25, 0.25], dtype=torch.float64)], t=3)
    before = p.clone()
    adam_step([p], [torch.zeros(2, dtype=torch.float64)], state, lr=0.0, beta1=0.9, beta2=0.99)
    assert torch.equal(p, before)
    assert torch.allclose(state.m[0], torch.tensor([0.45, 0.45], dtype=torch.float64))
    assert torch.allclose(state.v[0], torch.tensor([0.2475, 0.2475], dtype=torch.float64))
    assert state.t == 4


def test_adam_first_step_has_size_lr():
    # bias correction makes the first step exactly lr * sign(g) (up to eps)
    p = torch.tensor([0.0, 0.0], dtype=torch.float64)
    adam_step([p], [torch.tensor([3.0, -1e-3], dtype=torch.float64)],
              AdamState.zeros_like([p]), lr=0.1, eps=0.0)
    assert torch.allclose(p, torch.tensor([-0.1, 0.1], dtype=torch.float64), rtol=1e-12)


def test_adam_quadratic_converges():
    p = torch.tensor([1.0], dtype=torch.float64)
    state = AdamState.zeros_like([p])
    for _ in range(500):
        adam_step([p], [2 * p], state, lr=0.1)
    assert abs(p.item()) < 1e-3


def test_adam_rejects_nonfinite_gradient():
    p = torch.zeros(1, dtype=torch.float64)
    with pytest.raises(NumericError):
        adam_step([p], [torch.tensor([float("nan")], dtype=torch.float64)], AdamState.zeros_like([p]), 0.1)


def test_lr_schedule():
    opt = desk_profile().train
    opt.lr, opt.epochs, opt.decay_start, opt.decay_final = 1.0, 10, 4, 0.1
    lrs = [lr_at(opt, e) for e in range(1, 11)]
    assert lrs[:4] == [1.0] * 4
    assert all(a > b for a, b in zip(lrs[3:], lrs[4:]))
    assert lrs[-1] == pytest.approx(0.1)
    opt.decay_start = 10
    assert lr_at(opt, 10) == 1.0


def test_sample_seeds_are_stable_and_distinct():
    a = sample_seeds(0, range(5))
    assert a == sample_seeds(0, range(5))
    assert len(set(a)) == 5
    assert a[:3] == sample_seeds(0, range(3))
    assert sample_seeds(0, [(1, 2)], stream=2) != sample_seeds(0, [(1, 2)], stream=1)


def test_tiny_run_loss_trend_over_seeds():
    # one window per step and 64 (k, eps) draws per window keep the epoch-mean
    # noise below the progress made in one epoch
    drops = 0
    for seed in range(10):
        cfg = tiny_cfg(seed)
        cfg.schedule.K, cfg.train.lr = 50, 3e-2
        cfg.train.batch_size, cfg.train.k_per_example = 1, 64
        run = train_diffusion(tiny_windows(8, seed), cfg)
        assert len(run.losses) == 2
        drops += run.losses[1] <= run.losses[0]
    assert drops >= 8


def test_training_is_deterministic(tmp_path):
    wins = tiny_windows()
    a = train_diffusion(wins, tiny_cfg(3), tmp_path / "a", wallclock=False)
    b = train_diffusion(wins, tiny_cfg(3), tmp_path / "b", wallclock=False)
    assert a.losses == b.losses
    for name in ("diffusion_log.csv", "diffusion_last.ckpt", "diffusion_best.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.reader((tmp_path / "a" / "diffusion_log.csv").open()))
    assert rows[0] == ["epoch", "loss", "lr", "wallclock_s"]
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert not list((tmp_path / "a").glob("*.tmp"))


def test_checkpoint_reload_matches_trained_model(tmp_path):
    run = train_diffusion(tiny_windows(), tiny_cfg(1, epochs=1), tmp_path)
    model, sched, _ = load_diffusion(tmp_path / "diffusion_last.ckpt", torch.float32)
    obs = torch.from_numpy(np.stack([w.observed for w in tiny_windows(2)]))
    seeds = sample_seeds(0, range(2))
    ya, _ = sample_windows(run.model, run.schedule, obs, 3, seeds, (4, 3, 3))
    yb, _ = sample_windows(model, sched, obs, 3, seeds, (4, 3, 3))
    assert torch.equal(ya, yb)


def test_sampled_offsets_are_mapped_back_to_positions():
    cfg = tiny_cfg(4, epochs=1)
    cfg.network.target, cfg.network.target_scale = "offset", 3.0
    run = train_diffusion(tiny_windows(), cfg)
    obs = torch.from_numpy(np.stack([w.observed for w in tiny_windows(2)]))
    seeds = sample_seeds(0, range(2))
    Y, kept = sample_windows(run.model, run.schedule, obs, 3, seeds, (4, 3, 3), record=(0,))
    with torch.no_grad():
        C = run.model.encoder(obs.float())
        raw, _ = sample_chains(run.schedule, run.model.predictor, C, 3, seeds, (4, 3, 3))
    assert torch.allclose(Y, raw / 3.0 + obs[:, None, -1:].float(), rtol=0, atol=1e-6)
    assert torch.equal(kept[0], Y)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        train_diffusion([], tiny_cfg())


def test_refiner_keeps_diffusion_frozen(tmp_path):
    cfg = tiny_cfg(2)
    run = train_diffusion(tiny_windows(), cfg)
    before = [p.detach().clone() for p in run.model.parameters()]
    rr = train_refiner(tiny_windows(), run.model, run.schedule, cfg, tmp_path, wallclock=False)
    assert len(rr.losses) == 2
    assert all(torch.equal(a, b) for a, b in zip(before, run.model.parameters()))
    assert (tmp_path / "refiner_best.ckpt").is_file()
    assert (tmp_path / "refine_log.csv").read_text().startswith("epoch,loss,lr,wallclock_s\n")


def test_refiner_needs_two_samples():
    cfg = tiny_cfg()
    run = train_diffusion(tiny_windows(), cfg)
    cfg.refine_train.N = 1
    with pytest.raises(ValueError, match="N >= 2"):
        train_refiner(tiny_windows(), run.model, run.schedule, cfg)


def test_diversity_weight_raises_refined_apd():
    # with lam = 0, a large gamma should spread the refined samples more than gamma = 0
    wins = tiny_windows(8)
    obs = torch.from_numpy(np.stack([w.observed for w in wins]))
    mean_apd = {}
    for gamma in (0.0, 50.0):
        per_seed = []
        for seed in range(3):
            cfg = tiny_cfg(seed, epochs=3)
            cfg.refine.lam, cfg.refine.gamma, cfg.refine.sigma = 0.0, gamma, 1.0
            cfg.refine_train.epochs, cfg.refine_train.lr, cfg.refine_train.seed = 20, 1e-2, seed
            run = train_diffusion(wins, cfg)
            rr = train_refiner(wins, run.model, run.schedule, cfg)
            Y, _ = sample_windows(run.model, run.schedule, obs, 3, sample_seeds(9, range(len(wins))),
                                  (4, 3, 3))
            with torch.no_grad():
                Z = rr.refiner(Y, run.model.encoder(obs.float())[:, None]).double().numpy()
            per_seed.append(np.mean([apd(z) for z in Z]))
        mean_apd[gamma] = np.mean(per_seed)
    assert mean_apd[50.0] > mean_apd[0.0]
