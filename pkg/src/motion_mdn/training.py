"""Adam, the minibatch training loop, held-out evaluation and gradient checking."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Trajectory, n_window_starts, window_pair_at
from .errors import ConfigError, InsufficientLengthError, NumericError
from .seq2seq import Model, ModelConfig, loss_and_grads, model_init, window_losses

EVAL_SEED_SALT = 7919


@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.lr > 0 and self.eps > 0):
            raise ConfigError("invalid Adam hyperparameters")

    @classmethod
    def for_params(cls, params: dict, **hyper) -> "AdamState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   u={k: np.zeros_like(v) for k, v in params.items()}, **hyper)


def adam_step(state: AdamState, params: dict, grads: dict):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``.

    A non-finite gradient raises :class:`NumericError` before anything changes.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}; Adam step refused")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for k, g in grads.items():
        m, u = state.m[k], state.u[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        u *= state.beta2
        u += (1.0 - state.beta2) * g * g
        params[k] -= state.lr * (m / c1) / (np.sqrt(u / c2) + state.eps)
    return params, state


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_grads(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 50
    learning_rate: float = 0.005
    clip_norm: float = 10.0
    eval_every: int = 100
    n_eval_windows: int = 500
    seed: int = 0
    heldout_subjects: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "heldout_subjects", tuple(self.heldout_subjects))
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps must be >= 0, batch_size and eval_every >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0 (0 disables clipping)")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    steps: list = field(default_factory=list)
    train_nll: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    clipped_norm: list = field(default_factory=list)
    heldout: dict = field(default_factory=dict)  # step -> held-out NLL
    ms_per_step: list = field(default_factory=list)

    def to_json(self) -> dict:
        """Deterministic part of the report (wall-clock excluded)."""
        return {"steps": self.steps, "train_nll": self.train_nll, "grad_norm": self.grad_norm,
                "clipped_norm": self.clipped_norm,
                "heldout": [[s, v] for s, v in sorted(self.heldout.items())]}

    @classmethod
    def from_json(cls, obj) -> "TrainReport":
        return cls(list(obj["steps"]), list(obj["train_nll"]), list(obj["grad_norm"]),
                   list(obj["clipped_norm"]), {int(s): v for s, v in obj["heldout"]},
                   [float("nan")] * len(obj["steps"]))

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "train_nll", "heldout_nll", "grad_norm", "clipped_norm", "ms_per_step"])
            for k, step in enumerate(self.steps):
                held = self.heldout.get(step)
                ms = self.ms_per_step[k] if k < len(self.ms_per_step) else float("nan")
                w.writerow([step, repr(self.train_nll[k]), "" if held is None else repr(held),
                            repr(self.grad_norm[k]), repr(self.clipped_norm[k]), f"{ms:.3f}"])


class WindowSampler:
    """Uniform draws over every valid (trajectory, start) placement in a corpus."""

    def __init__(self, corpus: Sequence[Trajectory], T_p: int, T_f: int):
        self.corpus = list(corpus)
        self.T_p, self.T_f = T_p, T_f
        counts = np.array([n_window_starts(t, T_p, T_f) for t in self.corpus], dtype=np.int64)
        if counts.sum() == 0:
            raise InsufficientLengthError(
                f"no trajectory is at least T_p + T_f = {T_p + T_f} frames long")
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.total = int(self.offsets[-1])

    def locate(self, flat_index):
        k = int(np.searchsorted(self.offsets, flat_index, side="right") - 1)
        return k, int(flat_index - self.offsets[k])

    def sample(self, rng: np.random.Generator, n: int):
        idx = rng.integers(self.total, size=n)
        past = np.empty((n, self.T_p, self.corpus[0].n_x))
        future = np.empty((n, self.T_f, self.corpus[0].n_x))
        sources = []
        for j, flat in enumerate(idx):
            k, start = self.locate(flat)
            w = window_pair_at(self.corpus[k], start, self.T_p, self.T_f)
            past[j], future[j] = w.past, w.future
            sources.append(w.source)
        return past, future, sources


def eval_windows(heldout: Sequence[Trajectory], T_p: int, T_f: int, n_windows: int, seed: int):
    rng = np.random.default_rng([seed, EVAL_SEED_SALT])
    past, future, _ = WindowSampler(heldout, T_p, T_f).sample(rng, n_windows)
    return past, future


def mean_window_loss(m: Model, past, future, chunk: int = 1000) -> float:
    losses = [window_losses(m, (past[i:i + chunk], future[i:i + chunk]))
              for i in range(0, len(past), chunk)]
    return float(np.concatenate(losses).mean())


def heldout_nll(m: Model, heldout: Sequence[Trajectory], n_windows: int = 500, seed: int = 0) -> float:
    """Mean per-window loss over ``n_windows`` pairs drawn with a fixed evaluation seed."""
    past, future = eval_windows(heldout, m.config.T_p, m.config.T_f, n_windows, seed)
    return mean_window_loss(m, past, future)


def split_by_subject(corpus: Sequence[Trajectory], heldout_subjects):
    held = set(heldout_subjects)
    train = [t for t in corpus if t.subject_id not in held]
    val = [t for t in corpus if t.subject_id in held]
    return train, val


class Trainer:
    """Serial training loop whose complete state can be checkpointed and resumed."""

    def __init__(self, model: Model, corpus: Sequence[Trajectory], cfg: TrainConfig,
                 rng: np.random.Generator | None = None):
        self.model = model
        self.cfg = cfg
        train_set, val_set = split_by_subject(corpus, cfg.heldout_subjects)
        if not train_set:
            raise InsufficientLengthError("no training trajectories after the subject split")
        T_p, T_f = model.config.T_p, model.config.T_f
        self.sampler = WindowSampler(train_set, T_p, T_f)
        self.eval_set = (eval_windows(val_set, T_p, T_f, cfg.n_eval_windows, cfg.seed)
                         if val_set else None)
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.adam = AdamState.for_params(model.params, lr=cfg.learning_rate)
        self.report = TrainReport()
        self.step = 0

    def evaluate(self) -> float | None:
        if self.eval_set is None:
            return None
        return mean_window_loss(self.model, *self.eval_set)

    def train_step(self) -> float:
        t0 = time.perf_counter()
        batch = self.sampler.sample(self.rng, self.cfg.batch_size)
        loss, grads = loss_and_grads(self.model, batch)
        norm = clip_grads(grads, self.cfg.clip_norm)
        adam_step(self.adam, self.model.params, grads)
        self.step += 1
        r = self.report
        r.steps.append(self.step)
        r.train_nll.append(loss)
        r.grad_norm.append(norm)
        r.clipped_norm.append(global_norm(grads))
        r.ms_per_step.append(1000.0 * (time.perf_counter() - t0))
        return loss

    def run(self, until: int | None = None, on_eval: Callable[["Trainer"], None] | None = None):
        until = self.cfg.steps if until is None else until
        while self.step < until:
            self.train_step()
            if self.step % self.cfg.eval_every == 0 or self.step == self.cfg.steps:
                held = self.evaluate()
                if held is not None:
                    self.report.heldout[self.step] = held
                if on_eval is not None:
                    on_eval(self)
        return self.model, self.report


def train(m: Model, corpus: Sequence[Trajectory], cfg: TrainConfig,
          rng: np.random.Generator | None = None, on_eval=None):
    """Train ``m`` in place for ``cfg.steps`` steps; returns ``(model, report)``."""
    return Trainer(m, corpus, cfg, rng).run(on_eval=on_eval)


# ----------------------------------------------------------- gradient check

def relative_error(analytic, numeric, floor: float = 1e-5) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from dividing
    finite-difference round-off by zero.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grads(m: Model, batch, eps: float = 1e-5, names=None) -> dict:
    out = {}
    for name in names or m.params:
        p = m.params[name]
        g = np.empty_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            up = window_losses(m, batch).mean()
            flat[j] = old - eps
            down = window_losses(m, batch).mean()
            flat[j] = old
            gflat[j] = (up - down) / (2 * eps)
        out[name] = g
    return out


def random_batch(cfg: ModelConfig, rng: np.random.Generator, batch_size: int = 2):
    past = rng.standard_normal((batch_size, cfg.T_p, cfg.n_x))
    future = rng.standard_normal((batch_size, cfg.T_f, cfg.n_x))
    return past, future


def randomize(m: Model, rng: np.random.Generator, scale: float = 0.5) -> Model:
    """Overwrite every parameter with N(0, scale^2) draws (gradient-check instances)."""
    for v in m.params.values():
        v[...] = scale * rng.standard_normal(v.shape)
    return m


def grad_check(cfg: ModelConfig, trials: int, rng: np.random.Generator,
               eps: float = 1e-5, batch_size: int = 2) -> dict:
    """Worst elementwise relative error per parameter group over random instances."""
    worst = {}
    for _ in range(trials):
        m = randomize(model_init(cfg), rng)
        batch = random_batch(cfg, rng, batch_size)
        _, analytic = loss_and_grads(m, batch)
        numeric = numeric_grads(m, batch, eps)
        for name in analytic:
            err = float(relative_error(analytic[name], numeric[name]).max())
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
