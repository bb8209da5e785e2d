"""Train desk models at several step counts K and report held-out diversity and accuracy.

Usage: python3 scripts/k_sweep.py --work runs/ksweep --k 20,100 --seeds 0-4 [--epochs 40]
Writes <work>/k_sweep.csv with one row per (K, seed).
"""
import argparse
import csv
from pathlib import Path

from motiondiff.cli import main
from motiondiff.config import desk_profile, save_config


def seeds_arg(text):
    lo, _, hi = text.partition("-")
    return list(range(int(lo), int(hi or lo) + 1))


def run(work: Path, K: int, seed: int, epochs: int | None, sequences: int) -> dict:
    data = work / f"data_{seed}"
    if not (data / "train" / "manifest.csv").is_file():
        main(["synth-data", "--out", str(data / "train"), "--sequences", str(sequences), "--seed", str(seed)])
        main(["synth-data", "--out", str(data / "test"), "--sequences", "4", "--seed", str(1000 + seed)])
    out = work / f"K{K}_s{seed}"
    cfg = desk_profile(str(data / "train"))
    cfg.schedule.K, cfg.train.seed = K, seed
    if epochs:
        cfg.train.epochs, cfg.train.decay_start = epochs, min(cfg.train.decay_start, epochs)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.toml", cfg)
    for argv in (["train", "--config", str(out / "config.toml"), "--stage", "diffusion", "--out", str(out)],
                 ["sample", "--checkpoint", str(out / "diffusion_best.ckpt"), "--data", str(data / "test"),
                  "--n", "10", "--out", str(out / "pred")],
                 ["evaluate", "--pred", str(out / "pred"), "--data", str(data / "test"),
                  "--out", str(out / "eval.csv")]):
        if main(argv) != 0:
            raise SystemExit(f"command failed: {' '.join(argv)}")
    rows = list(csv.DictReader(open(out / "eval.csv", newline="")))
    return {"K": K, "seed": seed, **{k: rows[-1][k] for k in ("APD", "ADE", "FDE")}}


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--work", type=Path, default=Path("runs/ksweep"))
    ap.add_argument("--k", default="20,100")
    ap.add_argument("--seeds", type=seeds_arg, default=seeds_arg("0-4"))
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--sequences", type=int, default=128)
    a = ap.parse_args()
    a.work.mkdir(parents=True, exist_ok=True)
    results = []
    with open(a.work / "k_sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["K", "seed", "APD", "ADE", "FDE"], lineterminator="\n")
        w.writeheader()
        for K in (int(k) for k in a.k.split(",")):
            for seed in a.seeds:
                row = run(a.work, K, seed, a.epochs, a.sequences)
                w.writerow(row)
                fh.flush()
                print(row, flush=True)
