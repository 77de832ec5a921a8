"""Kinematic trajectories: CSV ingestion, standardization, windowing, synthesis."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import (ConfigError, EmptyInputError, InsufficientLengthError,
                     ParseError, ShapeError)

STD_FLOOR = 1e-8
LABEL_COLUMN = "label"


@dataclass(frozen=True, eq=False)
class Trajectory:
    frames: np.ndarray
    sample_rate_hz: float = 10.0
    labels: tuple | None = None
    subject_id: str = "s0"
    trial_id: str = "t0"

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] < 1:
            raise ShapeError(f"frames must be (n_frames, n_x) with n_x >= 1, got {frames.shape}")
        if not self.sample_rate_hz > 0:
            raise ConfigError("sample_rate_hz must be positive")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != len(frames):
                raise ShapeError(f"{len(labels)} labels for {len(frames)} frames")
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def n_x(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames) -> "Trajectory":
        return replace(self, frames=frames)


@dataclass(frozen=True, eq=False)
class WindowPair:
    past: np.ndarray
    future: np.ndarray
    source: tuple = ("s0", "t0", 0)


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def to_json(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_json(cls, obj) -> "ChannelStats":
        mean = np.asarray(obj["mean"], dtype=np.float64)
        std = np.asarray(obj["std"], dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ShapeError("stats mean/std must be equal-length vectors")
        return cls(mean, std)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ChannelStats":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- CSV I/O

def load_csv(path, channels: Sequence[str] | None = None, *, sample_rate_hz: float = 10.0,
             subject_id: str | None = None, trial_id: str | None = None) -> Trajectory:
    """Read one trial. Row numbers in errors count data rows from 1."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EmptyInputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    has_labels = bool(header) and header[-1] == LABEL_COLUMN
    names = header[:-1] if has_labels else header
    if not names:
        raise ParseError(f"{path}: header names no channels", row=0)
    if channels is not None and list(channels) != names:
        raise ParseError(f"{path}: header {names} does not match schema {list(channels)}", row=0)
    if len(rows) == 1:
        raise EmptyInputError(f"{path}: no data rows")

    n_x = len(names)
    frames = np.empty((len(rows) - 1, n_x))
    labels = []
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {i} has {len(row)} fields, expected {len(header)}", row=i)
        try:
            frames[i - 1] = [float(v) for v in row[:n_x]]
        except ValueError:
            raise ParseError(f"{path}: row {i} has a non-numeric field", row=i) from None
        if has_labels:
            labels.append(row[-1].strip())
    return Trajectory(frames, sample_rate_hz, tuple(labels) if has_labels else None,
                      subject_id if subject_id is not None else path.stem,
                      trial_id if trial_id is not None else path.stem)


def write_csv(t: Trajectory, path) -> None:
    header = [f"ch_{k}" for k in range(t.n_x)]
    if t.labels is not None:
        header.append(LABEL_COLUMN)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, frame in enumerate(t.frames):
            row = [repr(float(v)) for v in frame]
            if t.labels is not None:
                row.append(t.labels[i])
            w.writerow(row)


# ---------------------------------------------------------- standardization

def compute_stats(corpus: Iterable[Trajectory]) -> ChannelStats:
    corpus = list(corpus)
    if not corpus:
        raise EmptyInputError("empty corpus")
    dims = {t.n_x for t in corpus}
    if len(dims) != 1:
        raise ShapeError(f"inconsistent channel counts {sorted(dims)}")
    stacked = np.concatenate([t.frames for t in corpus], axis=0)
    if len(stacked) < 2:
        raise EmptyInputError("need at least 2 frames to compute statistics")
    mean = stacked.mean(axis=0)
    std = np.sqrt(((stacked - mean) ** 2).mean(axis=0))
    return ChannelStats(mean, np.maximum(std, STD_FLOOR))


def _check_dims(t: Trajectory, s: ChannelStats):
    if t.n_x != s.mean.shape[0]:
        raise ShapeError(f"trajectory has {t.n_x} channels, stats have {s.mean.shape[0]}")


def standardize(t: Trajectory, s: ChannelStats) -> Trajectory:
    _check_dims(t, s)
    return t.with_frames((t.frames - s.mean) / s.std)


def unstandardize(t: Trajectory, s: ChannelStats) -> Trajectory:
    _check_dims(t, s)
    return t.with_frames(t.frames * s.std + s.mean)


# ---------------------------------------------------------------- windowing

def n_window_starts(t: Trajectory, T_p: int, T_f: int) -> int:
    return max(len(t) - T_p - T_f + 1, 0)


def window_pair_at(t: Trajectory, start: int, T_p: int, T_f: int) -> WindowPair:
    if T_p < 1 or T_f < 1:
        raise ConfigError("T_p and T_f must be >= 1")
    if start < 0 or start + T_p + T_f > len(t):
        raise InsufficientLengthError(
            f"window [{start}, {start + T_p + T_f}) outside trajectory of length {len(t)}")
    f = t.frames
    return WindowPair(f[start:start + T_p], f[start + T_p:start + T_p + T_f],
                      (t.subject_id, t.trial_id, start))


def sample_window_pair(t: Trajectory, T_p: int, T_f: int, rng: np.random.Generator) -> WindowPair:
    n = n_window_starts(t, T_p, T_f)
    if n == 0:
        raise InsufficientLengthError(
            f"trajectory of length {len(t)} shorter than T_p + T_f = {T_p + T_f}")
    return window_pair_at(t, int(rng.integers(n)), T_p, T_f)


def enumerate_windows(t: Trajectory, span: tuple[int, int] | None, T_p: int, stride: int = 1):
    """All windows of length ``T_p`` inside ``span`` (half-open), stepping by ``stride``.

    Returns a list of ``(frames, (start, stop))``.
    """
    start, stop = (0, len(t)) if span is None else span
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    if start < 0 or stop > len(t):
        raise ShapeError(f"span {(start, stop)} outside trajectory of length {len(t)}")
    if stop - start < T_p:
        raise InsufficientLengthError(f"span length {stop - start} shorter than T_p = {T_p}")
    return [(t.frames[s:s + T_p], (s, s + T_p)) for s in range(start, stop - T_p + 1, stride)]


def segments(labels: Sequence) -> list[tuple[object, int, int]]:
    """Maximal runs of equal labels as ``(label, start, stop)``."""
    out = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            out.append((labels[start], start, i))
            start = i
    return out


# ---------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class Regime:
    name: str
    frequency_hz: float
    amplitude: float = 1.0
    noise: float = 0.1
    branching: int = 1
    branch_shift: float = 1.0


def default_regimes() -> tuple[Regime, ...]:
    return (
        Regime("regime0", 0.15, 1.0, 0.2, 2, 1.5),
        Regime("regime1", 0.40, 0.8, 0.2, 1),
        Regime("regime2", 0.25, 1.2, 0.2, 2, 1.5),
        Regime("regime3", 0.60, 0.6, 0.2, 1),
    )


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 8
    trials_per_subject: int = 3
    n_channels: int = 14
    regimes: tuple[Regime, ...] = field(default_factory=default_regimes)
    segment_length_range: tuple[int, int] = (40, 80)
    segments_per_trial: int = 8
    sample_rate_hz: float = 10.0
    subject_jitter: float = 0.05
    tremor_std: float = 0.5
    tremor_corr: float = 0.9
    seed: int = 0

    def __post_init__(self):
        regimes = tuple(r if isinstance(r, Regime) else Regime(**r) for r in self.regimes)
        object.__setattr__(self, "regimes", regimes)
        object.__setattr__(self, "segment_length_range", tuple(self.segment_length_range))
        counts = (self.n_subjects, self.trials_per_subject, self.n_channels,
                  len(regimes), self.segments_per_trial)
        if min(counts) < 1:
            raise ConfigError("all SynthConfig counts must be >= 1")
        lo, hi = self.segment_length_range
        if not 2 <= lo <= hi:
            raise ConfigError(f"bad segment_length_range {self.segment_length_range}")
        if not self.sample_rate_hz > 0:
            raise ConfigError("sample_rate_hz must be positive")
        if self.subject_jitter < 0:
            raise ConfigError("subject_jitter must be >= 0")
        if self.tremor_std < 0 or not 0 <= self.tremor_corr < 1:
            raise ConfigError("tremor_std must be >= 0 and tremor_corr in [0, 1)")
        for r in regimes:
            if r.noise < 0 or r.branching < 1 or r.frequency_hz < 0:
                raise ConfigError(f"invalid regime {r}")
        if len({r.name for r in regimes}) != len(regimes):
            raise ConfigError("regime names must be unique")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "SynthConfig":
        return cls(**obj)


@dataclass(frozen=True)
class RegimeDynamics:
    level: np.ndarray        # (n_x,)
    phase: np.ndarray        # (n_x,)
    freq_scale: np.ndarray   # (n_x,)
    branch_offsets: np.ndarray  # (branching, n_x)


@dataclass(frozen=True)
class SegmentInfo:
    regime: int
    start: int
    stop: int
    branch: int | None
    branch_at: int | None


def regime_dynamics(cfg: SynthConfig) -> list[RegimeDynamics]:
    out = []
    for r_idx, r in enumerate(cfg.regimes):
        rng = np.random.default_rng([cfg.seed, 1, r_idx])
        n = cfg.n_channels
        level = rng.uniform(-1.0, 1.0, n) * r.amplitude
        phase = rng.uniform(0.0, 2 * math.pi, n)
        freq_scale = rng.uniform(0.8, 1.2, n)
        signs = rng.choice([-1.0, 1.0], size=n)
        steps = np.linspace(-1.0, 1.0, r.branching) if r.branching > 1 else np.zeros(1)
        offsets = r.branch_shift * steps[:, None] * signs[None, :]
        out.append(RegimeDynamics(level, phase, freq_scale, offsets))
    return out


def _subject_amplitude(cfg: SynthConfig, subject: int) -> float:
    # amplitude only: frequency jitter would make long futures unpredictable from a short past
    rng = np.random.default_rng([cfg.seed, 2, subject])
    return float(1.0 + cfg.subject_jitter * rng.standard_normal())


def segment_mean(cfg: SynthConfig, subject: int, regime: int, local_t: np.ndarray,
                 branch: int | None = None, split: int = 0, dynamics=None) -> np.ndarray:
    """Noise-free signal of ``regime`` at frame offsets ``local_t`` from segment start.

    ``branch`` selects the continuation taken from offset ``split`` (the segment
    midpoint in generated data); earlier offsets are left unshifted.
    """
    dyn = (dynamics or regime_dynamics(cfg))[regime]
    r = cfg.regimes[regime]
    amp = _subject_amplitude(cfg, subject)
    local_t = np.asarray(local_t, dtype=np.float64)
    omega = 2 * math.pi * r.frequency_hz / cfg.sample_rate_hz
    x = dyn.level + amp * r.amplitude * np.sin(omega * local_t[:, None] * dyn.freq_scale + dyn.phase)
    if branch is not None and r.branching > 1:
        after = local_t >= split
        x[after] += dyn.branch_offsets[branch]
    return x


def tremor(cfg: SynthConfig, subject: int, trial: int, shape) -> np.ndarray:
    """Stationary AR(1) nuisance with std ``tremor_std``, continuous across segments.

    It is predictable a few frames ahead but forgotten well within a window, so
    reconstructing a past needs it while predicting a future mostly does not.
    """
    rng = np.random.default_rng([cfg.seed, 4, subject, trial])
    a = cfg.tremor_corr
    w = rng.standard_normal(shape) * cfg.tremor_std * math.sqrt(1.0 - a * a)
    w[0] /= math.sqrt(1.0 - a * a)  # start in the stationary distribution
    return lfilter([1.0], [1.0, -a], w, axis=0)


def synthesize_trial(cfg: SynthConfig, subject: int, trial: int, dynamics=None):
    """One labelled trial plus the segment layout used to generate it."""
    dynamics = dynamics or regime_dynamics(cfg)
    rng = np.random.default_rng([cfg.seed, 3, subject, trial])
    lo, hi = cfg.segment_length_range
    n_reg = len(cfg.regimes)
    pieces, labels, infos = [], [], []
    prev = None
    pos = 0
    for _ in range(cfg.segments_per_trial):
        if prev is None or n_reg == 1:
            regime = int(rng.integers(n_reg))
        else:
            regime = int(rng.integers(n_reg - 1))
            regime += regime >= prev
        length = int(rng.integers(lo, hi + 1))
        r = cfg.regimes[regime]
        branch = int(rng.integers(r.branching)) if r.branching > 1 else None
        split = length // 2
        x = segment_mean(cfg, subject, regime, np.arange(length), branch, split, dynamics)
        x += r.noise * rng.standard_normal(x.shape)
        pieces.append(x)
        labels.extend([r.name] * length)
        infos.append(SegmentInfo(regime, pos, pos + length, branch,
                                 pos + split if branch is not None else None))
        pos += length
        prev = regime
    frames = np.concatenate(pieces)
    if cfg.tremor_std > 0:
        frames += tremor(cfg, subject, trial, frames.shape)
    t = Trajectory(frames, cfg.sample_rate_hz, tuple(labels),
                   f"subject{subject:02d}", f"subject{subject:02d}_trial{trial:02d}")
    return t, infos


def synthesize_corpus(cfg: SynthConfig) -> list[Trajectory]:
    dynamics = regime_dynamics(cfg)
    return [synthesize_trial(cfg, s, k, dynamics)[0]
            for s in range(cfg.n_subjects) for k in range(cfg.trials_per_subject)]


def write_corpus(cfg: SynthConfig, corpus: Sequence[Trajectory], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for t in corpus:
        name = f"{t.trial_id}.csv"
        write_csv(t, out_dir / name)
        entries.append({"subject": t.subject_id, "trial": t.trial_id, "file": name})
    manifest = {"config": cfg.to_json(), "sample_rate_hz": cfg.sample_rate_hz, "trials": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_corpus(manifest_path) -> list[Trajectory]:
    """Load every trial listed in a manifest written by :func:`write_corpus`."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise EmptyInputError(f"{manifest_path}: no such manifest")
    manifest = json.loads(manifest_path.read_text())
    rate = float(manifest.get("sample_rate_hz", 10.0))
    out = []
    for entry in manifest["trials"]:
        out.append(load_csv(manifest_path.parent / entry["file"], sample_rate_hz=rate,
                            subject_id=entry["subject"], trial_id=entry["trial"]))
    if not out:
        raise EmptyInputError(f"{manifest_path}: manifest lists no trials")
    return out
