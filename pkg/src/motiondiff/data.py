"""Skeleton/sequence data model, the motion text format, windowing and a
synthetic kinematic-chain generator.

Motion text format::

    J=<int> F=<int> FPS=<float>
    x0 y0 z0 x1 y1 z1 ...      # F rows of 3J floats, joint-major

Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

H36M_JOINTS = [
    "hip", "r_hip", "r_knee", "r_foot", "l_hip", "l_knee", "l_foot", "spine",
    "thorax", "neck", "head", "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
]
H36M_PARENTS = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15]

HUMANEVA_JOINTS = [
    "pelvis", "thorax", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
    "r_elbow", "r_wrist", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee",
    "r_ankle", "head",
]
HUMANEVA_PARENTS = [-1, 0, 1, 2, 3, 1, 5, 6, 0, 8, 9, 0, 11, 12, 1]

_FLOAT_FMT = "{:.9g}"


class MotionFormatError(ValueError):
    """Malformed motion file; the message carries the offending line number."""


@dataclass(frozen=True)
class Skeleton:
    num_joints: int
    joint_names: list[str] = field(default_factory=list)
    parents: list[int] | None = None

    def __post_init__(self):
        if self.num_joints < 2:
            raise ValueError(f"skeleton needs at least 2 joints, got {self.num_joints}")
        if not self.joint_names:
            object.__setattr__(self, "joint_names", [f"j{i}" for i in range(self.num_joints)])
        if len(self.joint_names) != self.num_joints:
            raise ValueError("joint_names length does not match num_joints")
        if self.parents is not None:
            _check_tree(self.parents, self.num_joints)

    @classmethod
    def chain(cls, num_joints: int) -> "Skeleton":
        return cls(num_joints, parents=[-1] + list(range(num_joints - 1)))


def _check_tree(parents: Sequence[int], num_joints: int) -> None:
    if len(parents) != num_joints:
        raise ValueError("parents length does not match num_joints")
    if parents[0] != -1:
        raise ValueError("joint 0 must be the root (parent -1)")
    for j in range(1, num_joints):
        # parent must precede child; this rules out cycles and extra roots
        if not 0 <= parents[j] < j:
            raise ValueError(f"joint {j} has invalid parent {parents[j]}")


H36M_SKELETON = Skeleton(17, H36M_JOINTS, H36M_PARENTS)
HUMANEVA_SKELETON = Skeleton(15, HUMANEVA_JOINTS, HUMANEVA_PARENTS)


@dataclass
class MotionSequence:
    """Joint positions in meters, shape ``[num_frames, J, 3]``."""

    skeleton: Skeleton
    frames: np.ndarray
    fps: float = 50.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError(f"frames must be [F, J, 3], got {self.frames.shape}")
        if self.frames.shape[1] != self.skeleton.num_joints:
            raise ValueError("frames joint axis does not match skeleton")
        if self.frames.shape[0] < 1:
            raise ValueError("sequence needs at least one frame")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite coordinates")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]


@dataclass
class WindowPair:
    observed: np.ndarray  # [T, J, 3]
    future: np.ndarray  # [f, J, 3]
    source: str = ""
    start: int = 0

    @property
    def obs_id(self) -> str:
        return f"{self.source}_{self.start}" if self.source else str(self.start)


def _parse_header(line: str, lineno: int) -> tuple[int, int, float]:
    fields = {}
    for tok in line.split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise MotionFormatError(f"malformed header at line {lineno}: {line!r}")
        fields[key] = val
    if set(fields) != {"J", "F", "FPS"}:
        raise MotionFormatError(f"malformed header at line {lineno}: expected J=, F=, FPS=")
    try:
        J, F, fps = int(fields["J"]), int(fields["F"]), float(fields["FPS"])
    except ValueError:
        raise MotionFormatError(f"malformed header at line {lineno}: {line!r}") from None
    if J < 2 or F < 1 or not fps > 0:
        raise MotionFormatError(f"malformed header at line {lineno}: J={J} F={F} FPS={fps}")
    return J, F, fps


def parse_motion_text(text: str, skeleton: Skeleton | None = None) -> MotionSequence:
    header = None
    rows: list[list[float]] = []
    lineno = 0
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if header is None:
            header = _parse_header(line, lineno)
            continue
        J, F, _ = header
        if len(rows) == F:
            raise MotionFormatError(f"frame count mismatch at line {lineno}: more than {F} rows")
        toks = line.split()
        if len(toks) != 3 * J:
            raise MotionFormatError(
                f"row length {len(toks)} != {3 * J} at line {lineno}")
        try:
            rows.append([float(t) for t in toks])
        except ValueError:
            bad = next(t for t in toks if not _is_float(t))
            raise MotionFormatError(f"non-numeric token {bad!r} at line {lineno}") from None
    if header is None:
        raise MotionFormatError("malformed header at line 1: file is empty")
    J, F, fps = header
    if len(rows) != F:
        # the text ends with a newline, so the last split element is the line after it
        missing_at = lineno if text.endswith("\n") else lineno + 1
        raise MotionFormatError(f"frame count mismatch at line {missing_at}: "
                                f"header declares {F}, found {len(rows)}")
    frames = np.asarray(rows, dtype=np.float64).reshape(F, J, 3)
    if not np.all(np.isfinite(frames)):
        raise MotionFormatError("non-finite coordinate in motion file")
    if skeleton is None:
        skeleton = Skeleton.chain(J)
    elif skeleton.num_joints != J:
        raise MotionFormatError(f"file has J={J}, skeleton has {skeleton.num_joints}")
    return MotionSequence(skeleton, frames, fps)


def _is_float(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def load_motion_file(path, skeleton: Skeleton | None = None) -> MotionSequence:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return parse_motion_text(text, skeleton)
    except MotionFormatError as e:
        raise MotionFormatError(f"{path}: {e}") from None


def format_motion_text(seq: MotionSequence) -> str:
    F, J, _ = seq.frames.shape
    lines = [f"J={J} F={F} FPS={_FLOAT_FMT.format(seq.fps)}"]
    flat = seq.frames.reshape(F, 3 * J)
    for row in flat:
        lines.append(" ".join(_FLOAT_FMT.format(v) for v in row))
    return "\n".join(lines) + "\n"


def save_motion_file(path, seq: MotionSequence) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_motion_text(seq))
    os.replace(tmp, path)


def remove_global_translation(seq: MotionSequence, root: int = 0) -> MotionSequence:
    if not 0 <= root < seq.num_joints:
        raise IndexError(f"root index {root} out of range for J={seq.num_joints}")
    centered = seq.frames - seq.frames[:, root:root + 1, :]
    return MotionSequence(seq.skeleton, centered, seq.fps)


def window_count(num_frames: int, T: int, f: int, stride: int) -> int:
    if num_frames < T + f:
        return 0
    return (num_frames - T - f) // stride + 1


def make_windows(seq: MotionSequence, T: int, f: int, stride: int = 1,
                 source: str = "") -> list[WindowPair]:
    if T < 1 or f < 1:
        raise ValueError(f"T and f must be positive, got T={T} f={f}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n = window_count(seq.num_frames, T, f, stride)
    if n == 0:
        raise ValueError(f"empty input: sequence has {seq.num_frames} frames, "
                         f"need at least T+f={T + f}")
    out = []
    for i in range(n):
        s = i * stride
        out.append(WindowPair(seq.frames[s:s + T].copy(),
                              seq.frames[s + T:s + T + f].copy(),
                              source=source, start=s))
    return out


def _directions(azimuth: np.ndarray, elevation: np.ndarray) -> np.ndarray:
    ce = np.cos(elevation)
    return np.stack([ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)], axis=-1)


def synth_kinematic_chain(J: int, num_frames: int, seed: int,
                          fps: float = 25.0) -> MotionSequence:
    """A J-joint chain rooted at the origin with smoothly swinging joints.

    Each bone has a fixed length; its direction is given by azimuth/elevation
    angles accumulated down the chain, each a sum of two sinusoids with
    seed-drawn amplitudes, frequencies (0.3-1.2 Hz) and phases.
    """
    if J < 2:
        raise ValueError(f"J must be >= 2, got {J}")
    if num_frames < 1:
        raise ValueError(f"num_frames must be >= 1, got {num_frames}")
    rng = np.random.default_rng(seed)
    nb = J - 1
    lengths = rng.uniform(0.15, 0.35, size=nb)
    t = np.arange(num_frames, dtype=np.float64)[:, None] / fps

    def angles(base_scale, amp_scale):
        base = rng.uniform(-base_scale, base_scale, size=nb)
        amp = rng.uniform(0.2, 1.0, size=(2, nb)) * amp_scale
        freq = rng.uniform(0.3, 1.2, size=(2, nb))
        phase = rng.uniform(0.0, 2 * np.pi, size=(2, nb))
        wave = (amp[:, None] * np.sin(2 * np.pi * freq[:, None] * t[None] + phase[:, None])).sum(0)
        return base + wave  # [F, nb]

    azimuth = np.cumsum(angles(np.pi, 0.8), axis=1)
    elevation = np.cumsum(angles(0.5, 0.4), axis=1)
    bones = _directions(azimuth, elevation) * lengths[None, :, None]
    frames = np.zeros((num_frames, J, 3))
    frames[:, 1:] = np.cumsum(bones, axis=1)
    return MotionSequence(Skeleton.chain(J), frames, fps)


def bone_lengths(seq: MotionSequence) -> np.ndarray:
    """Per-frame bone lengths ``[F, J-1]`` for a skeleton with parents."""
    parents = seq.skeleton.parents
    if parents is None:
        raise ValueError("skeleton has no parent indices")
    child = np.arange(1, seq.num_joints)
    par = np.asarray(parents[1:])
    return np.linalg.norm(seq.frames[:, child] - seq.frames[:, par], axis=-1)


def load_motion_dir(directory) -> list[tuple[str, MotionSequence]]:
    """All ``*.txt`` motion files in a directory, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory not found: {directory}")
    files = sorted(p for p in directory.glob("*.txt"))
    if not files:
        raise FileNotFoundError(f"no motion files (*.txt) in {directory}")
    return [(p.stem, load_motion_file(p)) for p in files]


def windows_from_dir(directory, T: int, f: int, stride: int, root: int = 0) -> list[WindowPair]:
    out = []
    for name, seq in load_motion_dir(directory):
        seq = remove_global_translation(seq, root)
        if window_count(seq.num_frames, T, f, stride) == 0:
            continue
        out.extend(make_windows(seq, T, f, stride, source=name))
    if not out:
        raise ValueError(f"empty input: no sequence in {directory} has >= {T + f} frames")
    return out
