"""Motion-based queries: window encodings, per-frame max-cosine scores,
thresholding, and cross-subject precision/recall/F1."""
from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Trajectory, enumerate_windows, segments
from .errors import ContractError, InsufficientLengthError, ShapeError
from .seq2seq import Encoding, Model, encode_batch

NORM_EPS = 1e-12
THRESHOLD_GRID = np.round(np.arange(-100, 101) / 100.0, 2)


@dataclass(frozen=True, eq=False)
class EncodingSet:
    """Window encodings of one trajectory; window ``k`` covers ``[starts[k], starts[k] + length)``."""
    E: np.ndarray
    starts: np.ndarray
    length: int
    subject_id: str = "s0"
    trial_id: str = "t0"

    def __len__(self):
        return len(self.starts)

    def encodings(self) -> list[Encoding]:
        return [Encoding(e, (self.subject_id, self.trial_id, int(s), self.length))
                for e, s in zip(self.E, self.starts)]

    @classmethod
    def from_encodings(cls, encs: Sequence[Encoding]) -> "EncodingSet":
        if not encs:
            raise ContractError("no encodings")
        lengths = {e.span[3] for e in encs}
        if len(lengths) != 1:
            raise ShapeError("encodings cover windows of different lengths")
        return cls(np.stack([e.e for e in encs]), np.array([e.span[2] for e in encs]),
                   lengths.pop(), encs[0].span[0], encs[0].span[1])


@dataclass
class RetrievalResult:
    mask: np.ndarray
    threshold: float
    provenance: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float


def encode_segment(m: Model, t: Trajectory, span=None, stride: int = 1,
                   chunk: int = 4096) -> EncodingSet:
    windows = enumerate_windows(t, span, m.config.T_p, stride)
    frames = np.stack([w for w, _ in windows])
    E = np.concatenate([encode_batch(m, frames[i:i + chunk]) for i in range(0, len(frames), chunk)])
    starts = np.array([s for _, (s, _) in windows])
    return EncodingSet(E, starts, m.config.T_p, t.subject_id, t.trial_id)


def encode_trajectory(m: Model, t: Trajectory, stride: int = 1) -> EncodingSet:
    """All windows of a trial; a trial shorter than one window yields an empty set."""
    if len(t) < m.config.T_p:
        return EncodingSet(np.zeros((0, m.config.n_h)), np.zeros(0, dtype=int), m.config.T_p,
                           t.subject_id, t.trial_id)
    return encode_segment(m, t, None, stride)


def cosine(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(Q, W) -> np.ndarray:
    Q, W = np.atleast_2d(Q), np.atleast_2d(W)
    nq, nw = np.linalg.norm(Q, axis=1), np.linalg.norm(W, axis=1)
    Qn = np.where(nq[:, None] < NORM_EPS, 0.0, Q / np.maximum(nq, NORM_EPS)[:, None])
    Wn = np.where(nw[:, None] < NORM_EPS, 0.0, W / np.maximum(nw, NORM_EPS)[:, None])
    return np.clip(Qn @ Wn.T, -1.0, 1.0)


def _as_set(encs):
    return encs if isinstance(encs, EncodingSet) else EncodingSet.from_encodings(list(encs))


def frame_scores(query, target, target_len: int) -> np.ndarray:
    """Per-frame best cosine against the query; NaN marks frames no window covers."""
    q = query.E if isinstance(query, EncodingSet) else _as_set(query).E
    if len(q) == 0:
        raise ContractError("empty query")
    target = _as_set(target) if not isinstance(target, EncodingSet) else target
    scores = np.full(target_len, -np.inf)
    if len(target):
        if target.starts.min() < 0 or target.starts.max() + target.length > target_len:
            raise ShapeError("target window spans exceed the target length")
        window_score = cosine_matrix(q, target.E).max(axis=0)
        cover = target.starts[:, None] + np.arange(target.length)
        np.maximum.at(scores, cover.ravel(), np.repeat(window_score, target.length))
    scores[np.isneginf(scores)] = np.nan
    return scores


def threshold_retrieve(scores, tau: float, provenance=None) -> RetrievalResult:
    scores = np.asarray(scores, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        mask = np.nan_to_num(scores, nan=-np.inf) >= tau
    return RetrievalResult(mask, float(tau), dict(provenance or {}))


def prf1(mask, labels) -> Metrics:
    mask, labels = np.asarray(mask, dtype=bool), np.asarray(labels, dtype=bool)
    if mask.shape != labels.shape:
        raise ShapeError(f"mask length {mask.shape} != labels length {labels.shape}")
    tp = int(np.count_nonzero(mask & labels))
    fp = int(np.count_nonzero(mask & ~labels))
    fn = int(np.count_nonzero(~mask & labels))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return Metrics(p, r, 2 * p * r / (p + r) if p + r else 0.0)


# -------------------------------------------------------- cross-subject eval

@dataclass
class _QueryScores:
    """Scores of one query segment over all of one target subject's frames,
    kept sorted so metrics at many thresholds are cheap."""
    pos: np.ndarray   # sorted scores of covered ground-truth frames
    neg: np.ndarray   # sorted scores of covered other frames
    n_true: int       # all ground-truth frames, covered or not

    def metrics(self, taus):
        taus = np.asarray(taus, dtype=np.float64)
        tp = len(self.pos) - np.searchsorted(self.pos, taus, side="left")
        fp = len(self.neg) - np.searchsorted(self.neg, taus, side="left")
        with np.errstate(invalid="ignore", divide="ignore"):
            p = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
            r = np.where(self.n_true > 0, tp / max(self.n_true, 1), 0.0)
            f = np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1.0), 0.0)
        return np.stack([p, r, f], axis=-1)


@dataclass
class EvalReport:
    activity: str
    threshold: float
    threshold_source: str
    pairs: list
    per_source: dict
    summary: dict
    sweep: list

    def to_json(self) -> dict:
        return {"activity": self.activity, "threshold": self.threshold,
                "threshold_source": self.threshold_source, "pairs": self.pairs,
                "per_source": self.per_source, "summary": self.summary, "sweep": self.sweep}

    @property
    def mean_f1(self) -> float:
        return self.summary["f1"]["mean"]


def _by_subject(corpus):
    groups = OrderedDict()
    for t in corpus:
        groups.setdefault(t.subject_id, []).append(t)
    return groups


def query_segments(corpus_by_subject, activity, T_p):
    """``{subject: [(trajectory, (start, stop)), ...]}`` for segments of ``activity``
    long enough to hold one window."""
    out = OrderedDict()
    for subj, trials in corpus_by_subject.items():
        segs = []
        for t in trials:
            if t.labels is None:
                continue
            segs.extend((t, (a, b)) for lab, a, b in segments(t.labels)
                        if lab == activity and b - a >= T_p)
        out[subj] = segs
    return out


def score_tables(queries: dict, targets: dict):
    """Sorted score tables for every (source, target, query segment).

    ``queries`` maps subject -> list of query :class:`EncodingSet` (one per
    segment). ``targets`` maps subject -> list of ``(EncodingSet, truth mask)``
    per trial. Returns ``{(i, j): [_QueryScores, ...]}``.
    """
    tables = OrderedDict()
    for i, qsets in queries.items():
        if not qsets:
            continue
        for j, trials in targets.items():
            if j == i:
                continue
            rows = []
            for q in qsets:
                pos, neg, n_true = [], [], 0
                for tset, truth in trials:
                    s = frame_scores(q, tset, len(truth)) if len(tset) else np.full(len(truth), np.nan)
                    covered = ~np.isnan(s)
                    pos.append(s[covered & truth])
                    neg.append(s[covered & ~truth])
                    n_true += int(truth.sum())
                rows.append(_QueryScores(np.sort(np.concatenate(pos)), np.sort(np.concatenate(neg)), n_true))
            tables[(i, j)] = rows
    return tables


def _aggregate(tables, taus):
    """Per-pair, per-source and across-source metrics at every threshold in ``taus``.

    Metrics are averaged over query segments, then over targets, then reported
    as mean and std over sources.
    """
    if not tables:
        raise ContractError("no (source, target) pairs to score")
    pair = {k: np.mean([q.metrics(taus) for q in rows], axis=0) for k, rows in tables.items()}
    sources = OrderedDict()
    for (i, _), v in pair.items():
        sources.setdefault(i, []).append(v)
    per_source = OrderedDict((i, np.mean(v, axis=0)) for i, v in sources.items())
    stacked = np.stack(list(per_source.values()))
    return pair, per_source, stacked.mean(axis=0), stacked.std(axis=0)


def sweep_curve(tables, taus=THRESHOLD_GRID):
    _, _, mean, _ = _aggregate(tables, taus)
    return mean  # (len(taus), 3)


def select_threshold(tables, taus=THRESHOLD_GRID) -> tuple[float, np.ndarray]:
    """Grid threshold with the best mean F1 (lowest on ties) and the sweep curve."""
    curve = sweep_curve(tables, taus)
    return float(taus[int(np.argmax(curve[:, 2]))]), curve


def evaluate_tables(tables, tau: float, activity="", threshold_source="given", sweep=None) -> EvalReport:
    if not tables:
        raise ContractError(f"activity {activity!r} has no usable query segments in any source subject")
    pair, per_source, mean, std = _aggregate(tables, np.array([tau]))
    names = ("precision", "recall", "f1")
    pairs = [{"source": i, "target": j, "n_queries": len(tables[(i, j)]),
              **{n: float(v[0, k]) for k, n in enumerate(names)}} for (i, j), v in pair.items()]
    per_src = {i: {n: float(v[0, k]) for k, n in enumerate(names)} for i, v in per_source.items()}
    summary = {n: {"mean": float(mean[0, k]), "std": float(std[0, k])} for k, n in enumerate(names)}
    sweep_rows = [] if sweep is None else [
        [float(t), *map(float, row)] for t, row in zip(THRESHOLD_GRID, sweep)]
    return EvalReport(activity, float(tau), threshold_source, pairs, per_src, summary, sweep_rows)


def build_tables(m: Model, corpus: Sequence[Trajectory], activity, stride: int = 1,
                 target_cache: dict | None = None):
    """Encode query segments and target trials of ``corpus`` and score them."""
    groups = _by_subject(corpus)
    segs = query_segments(groups, activity, m.config.T_p)
    if not any(segs.values()):
        raise ContractError(f"activity {activity!r} absent from the corpus (or every segment "
                            f"is shorter than T_p={m.config.T_p})")
    queries = OrderedDict((s, [encode_segment(m, t, span, stride) for t, span in v])
                          for s, v in segs.items())
    cache = {} if target_cache is None else target_cache
    targets = OrderedDict()
    for s, trials in groups.items():
        rows = []
        for t in trials:
            if t.labels is None:
                raise ContractError(f"target trial {t.trial_id} has no labels")
            key = (t.subject_id, t.trial_id)
            if key not in cache:
                cache[key] = encode_trajectory(m, t, stride)
            rows.append((cache[key], np.array([lab == activity for lab in t.labels])))
        targets[s] = rows
    return score_tables(queries, targets)


def cross_subject_eval(m: Model, corpus: Sequence[Trajectory], activity, tau: float | None = None,
                       stride: int = 1, validation_subjects: Sequence[str] = ()) -> EvalReport:
    """Query every segment of ``activity`` from each subject against every other subject.

    With ``tau=None`` the threshold is picked on the grid by mean F1 over the
    ``validation_subjects`` (scored among themselves), and the remaining subjects
    are evaluated at it. Without validation subjects the pick is in-sample.
    """
    held = set(validation_subjects)
    test = [t for t in corpus if t.subject_id not in held]
    if len({t.subject_id for t in test}) < 2:
        raise ContractError("cross-subject evaluation needs at least two subjects")
    cache = {}
    tables = build_tables(m, test, activity, stride, cache)
    if tau is not None:
        return evaluate_tables(tables, tau, activity, "given")
    if held:
        val = [t for t in corpus if t.subject_id in held]
        if len({t.subject_id for t in val}) < 2:
            raise ContractError("threshold selection needs at least two validation subjects")
        tau, curve = select_threshold(build_tables(m, val, activity, stride, cache))
        return evaluate_tables(tables, tau, activity, "validation", curve)
    tau, curve = select_threshold(tables)
    return evaluate_tables(tables, tau, activity, "in-sample", curve)


def write_encodings_csv(sets: Sequence[EncodingSet], path) -> int:
    """Write ``subject, trial, start_index, e_0..`` rows; returns the row count."""
    rows = 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        n_h = next((s.E.shape[1] for s in sets if len(s)), 0)
        w.writerow(["subject", "trial", "start_index"] + [f"e_{k}" for k in range(n_h)])
        for s in sets:
            for e, start in zip(s.E, s.starts):
                w.writerow([s.subject_id, s.trial_id, int(start)] + [repr(float(v)) for v in e])
                rows += 1
    return rows


def check_span(t: Trajectory, span, T_p: int):
    a, b = span
    if not 0 <= a < b <= len(t):
        raise ShapeError(f"span {span} outside trajectory of length {len(t)}")
    if b - a < T_p:
        raise InsufficientLengthError(f"span length {b - a} shorter than T_p={T_p}")
