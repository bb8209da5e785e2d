"""Command-line entry point: synth-data, train, sample, evaluate, diagnose.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np
import tomli
import torch

from .checkpoint import CheckpointError
from .config import load_config, save_config
from .data import (MotionFormatError, MotionSequence, Skeleton, load_motion_dir, load_motion_file,
                   remove_global_translation, save_motion_file, synth_kinematic_chain,
                   windows_from_dir)
from .diffusion import PredictionSet
from .errors import ConfigError, NumericError
from .metrics import CSV_COLUMNS, evaluate_sets, mean_record, write_eval_csv
from .train import (dtype_of, load_diffusion, load_refiner, sample_seeds, sample_windows,
                    train_diffusion, train_refiner)

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
INDEX_COLUMNS = ["obs_id", "sample", "file", "source", "start", "T", "f"]
DTYPES = {"float32": torch.float32, "float64": torch.float64}

log = logging.getLogger("motiondiff")


class UsageError(Exception):
    pass


def _write_csv(path: Path, header, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


def cmd_synth_data(a) -> None:
    if a.sequences < 1:
        raise UsageError("--sequences must be >= 1")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = sample_seeds(a.seed, range(a.sequences), stream=3)
    rows = []
    for i, s in enumerate(seeds):
        seq = synth_kinematic_chain(a.joints, a.frames, s, fps=a.fps)
        name = f"seq_{i:04d}.txt"
        save_motion_file(out / name, seq)
        rows.append([name, seq.num_frames, seq.num_joints, f"{seq.fps:g}", s])
    _write_csv(out / "manifest.csv", ["file", "frames", "joints", "fps", "seed"], rows)
    print(f"wrote {len(rows)} sequences to {out}")


def cmd_train(a) -> None:
    if not Path(a.config).is_file():
        raise UsageError(f"config file not found: {a.config}")
    try:
        cfg = load_config(a.config)
    except tomli.TOMLDecodeError as e:
        raise UsageError(f"{a.config}: {e}") from None
    if a.epochs is not None and a.stage == "diffusion":
        cfg.train.epochs = a.epochs
        cfg.train.decay_start = min(cfg.train.decay_start, a.epochs)
    elif a.epochs is not None:
        cfg.refine_train.epochs = a.epochs
    out = Path(a.out)
    if a.stage == "refine":
        ckpt = Path(a.diffusion) if a.diffusion else out / "diffusion_best.ckpt"
        if not ckpt.is_file():
            raise UsageError(f"stage refine needs a diffusion checkpoint; not found: {ckpt}")
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / f"{a.stage}_config.toml", cfg)
    d = cfg.data
    if a.stage == "diffusion":
        windows = windows_from_dir(d.dir, d.T, d.f, d.stride, d.root)
        run = train_diffusion(windows, cfg, out, wallclock=not a.no_wallclock)
        print(f"diffusion: {len(windows)} windows, final loss {run.losses[-1]:.6f}")
    else:
        model, schedule, _ = load_diffusion(ckpt, dtype_of(cfg.train))
        if (model.cfg.T, model.cfg.f, model.cfg.J) != (d.T, d.f, cfg.network.J):
            raise UsageError("diffusion checkpoint shape does not match the config's T, f, J")
        windows = windows_from_dir(d.dir, d.T, d.f, cfg.refine_train.stride, d.root)
        run = train_refiner(windows, model, schedule, cfg, out, wallclock=not a.no_wallclock)
        print(f"refine: {len(windows)} windows, final loss {run.losses[-1]:.6f}")


def _draw(model, schedule, windows, n, seed, record=()):
    net = model.cfg
    obs = torch.from_numpy(np.stack([w.observed for w in windows]))
    seeds = sample_seeds(seed, range(len(windows)))
    return sample_windows(model, schedule, obs, n, seeds, (net.f, net.J, 3), record=record)


def _dump(out: Path, prefix: str, windows, Y: np.ndarray, fps: float, T: int, f: int):
    J = Y.shape[-2]
    skel = Skeleton.chain(J)
    rows = []
    for i, w in enumerate(windows):
        for n in range(Y.shape[1]):
            name = f"{prefix}_{w.obs_id}_{n}.txt"
            save_motion_file(out / name, MotionSequence(skel, Y[i, n], fps))
            rows.append([w.obs_id, n, name, w.source, w.start, T, f])
    _write_csv(out / ("index.csv" if prefix == "sample" else f"{prefix}_index.csv"),
               INDEX_COLUMNS, rows)


def cmd_sample(a) -> None:
    if a.n < 1:
        raise UsageError("--n must be >= 1")
    dtype = DTYPES[a.precision]
    model, schedule, _ = load_diffusion(a.checkpoint, dtype)
    net = model.cfg
    stride = a.stride or net.T + net.f
    windows = windows_from_dir(a.data, net.T, net.f, stride, a.root)
    fps = load_motion_dir(a.data)[0][1].fps
    Y, _ = _draw(model, schedule, windows, a.n, a.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out, "sample", windows, Y.double().numpy(), fps, net.T, net.f)
    if a.refiner:
        refiner = load_refiner(a.refiner, dtype)
        with torch.no_grad():
            obs = torch.from_numpy(np.stack([w.observed for w in windows])).to(dtype)
            C = model.encoder(obs)
            Z = refiner(Y, C[:, None, :])
        _dump(out, "refined", windows, Z.double().numpy(), fps, net.T, net.f)
    print(f"wrote {len(windows)} x {a.n} samples to {out}")


def _read_index(pred: Path, prefix: str):
    index = pred / ("index.csv" if prefix == "sample" else f"{prefix}_index.csv")
    if not index.is_file():
        raise FileNotFoundError(f"prediction index not found: {index}")
    groups: "OrderedDict[str, list]" = OrderedDict()
    with open(index, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != INDEX_COLUMNS:
            raise MotionFormatError(f"{index}: expected columns {INDEX_COLUMNS}")
        for row in reader:
            groups.setdefault(row["obs_id"], []).append(row)
    return groups


def cmd_evaluate(a) -> None:
    pred = Path(a.pred)
    groups = _read_index(pred, "refined" if a.refined else "sample")
    seqs = {name: remove_global_translation(s, a.root) for name, s in load_motion_dir(a.data)}
    sets, observations, futures = [], [], []
    for obs_id, rows in groups.items():
        rows.sort(key=lambda r: int(r["sample"]))
        src, start, T, f = rows[0]["source"], int(rows[0]["start"]), int(rows[0]["T"]), int(rows[0]["f"])
        if src not in seqs:
            raise FileNotFoundError(f"source sequence {src!r} not found in {a.data}")
        frames = seqs[src].frames
        if start + T + f > len(frames):
            raise MotionFormatError(f"window {obs_id} runs past the end of {src}")
        observations.append(frames[start:start + T])
        futures.append(frames[start + T:start + T + f])
        Z = np.stack([load_motion_file(pred / r["file"]).frames for r in rows])
        if Z.shape[1:] != futures[-1].shape:
            raise MotionFormatError(f"{obs_id}: sample shape {Z.shape[1:]} != {futures[-1].shape}")
        sets.append(PredictionSet(Z, obs_id))
    records = evaluate_sets(sets, observations, futures, a.delta)
    write_eval_csv(a.out, records)
    m = mean_record(records)
    print(f"{len(records)} observations: APD {m.APD:.4f} ADE {m.ADE:.4f} FDE {m.FDE:.4f}")


def parse_grid(text: str) -> list[int]:
    try:
        grid = [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise UsageError(f"--k-grid must be comma-separated integers, got {text!r}") from None
    if not grid:
        raise UsageError("--k-grid is empty")
    return grid


def cmd_diagnose(a) -> None:
    dtype = DTYPES[a.precision]
    model, schedule, _ = load_diffusion(a.checkpoint, dtype)
    net = model.cfg
    grid = parse_grid(a.k_grid)
    bad = [k for k in grid if not 0 <= k <= schedule.K]
    if bad:
        raise UsageError(f"--k-grid values must lie in [0, {schedule.K}], got {bad}")
    windows = windows_from_dir(a.data, net.T, net.f, a.stride or net.T + net.f, a.root)
    _, kept = _draw(model, schedule, windows, a.n, a.seed, record=grid)
    rows = []
    for k in sorted(set(grid), reverse=True):
        Y = kept[k].double().numpy()
        sets = [PredictionSet(Y[i], w.obs_id) for i, w in enumerate(windows)]
        m = mean_record(evaluate_sets(sets, [w.observed for w in windows],
                                      [w.future for w in windows], a.delta))
        rows.append([k] + [f"{getattr(m, c):.6f}" for c in CSV_COLUMNS[1:]])
    _write_csv(Path(a.out), ["k"] + CSV_COLUMNS[1:], rows)
    print(f"diagnosed {len(rows)} steps on {len(windows)} observations")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motiondiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write synthetic kinematic-chain sequences")
    s.add_argument("--out", required=True)
    s.add_argument("--sequences", type=int, default=8)
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--joints", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fps", type=float, default=25.0)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train the diffusion model or the refiner")
    s.add_argument("--config", required=True)
    s.add_argument("--stage", choices=["diffusion", "refine"], required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--diffusion", help="diffusion checkpoint for --stage refine "
                   "(default: OUT/diffusion_best.ckpt)")
    s.add_argument("--epochs", type=int, help="override the epoch count of this stage")
    s.add_argument("--no-wallclock", action="store_true",
                   help="write 0 in the wallclock_s log column so logs are byte-reproducible")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("sample", cmd_sample, "draw future motions per observation"),
                                 ("diagnose", cmd_diagnose, "metrics at intermediate reverse steps")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--n", type=int, default=50)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--stride", type=int, default=0, help="window stride (default T+f)")
        s.add_argument("--root", type=int, default=0)
        s.add_argument("--precision", choices=sorted(DTYPES), default="float32")
        s.set_defaults(func=func)
        if name == "sample":
            s.add_argument("--refiner", help="also write refined samples from this refiner checkpoint")
        else:
            s.add_argument("--k-grid", required=True, help="comma-separated reverse steps, 0 = final")
            s.add_argument("--delta", type=float, default=0.5)

    s = sub.add_parser("evaluate", help="APD/ADE/FDE/MMADE/MMFDE per observation")
    s.add_argument("--pred", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--delta", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.add_argument("--root", type=int, default=0)
    s.add_argument("--refined", action="store_true", help="score the refined samples")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)  # fixed reduction order keeps outputs byte-identical
    try:
        args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MotionFormatError, CheckpointError, FileNotFoundError, ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
