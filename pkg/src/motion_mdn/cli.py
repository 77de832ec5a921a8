"""``motion-mdn`` command line: synth, train, encode, query, eval, predict, sweep.

Configuration is a YAML file with up to five sections::

    synth:      SynthConfig fields (regimes as a list of mappings)
    model:      ModelConfig fields (n_x defaults to the data's channel count)
    train:      TrainConfig fields
    retrieval:  activity, stride, threshold, validation_subjects, k
    paths:      data (corpus manifest), checkpoint, out

Unknown sections or keys are rejected. Command-line flags override the file.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint as ckpt
from .data import (SynthConfig, Trajectory, compute_stats, load_corpus, standardize,
                   synthesize_corpus, write_corpus)
from .errors import ConfigError, DataError, MotionError
from .retrieval import (check_span, cross_subject_eval, encode_segment,
                        encode_trajectory, evaluate_tables, frame_scores, score_tables,
                        threshold_retrieve, write_encodings_csv)
from .seq2seq import ModelConfig, model_init, predict_futures
from .training import Trainer, TrainConfig, split_by_subject

CHECKPOINT_NAME = "checkpoint.bin"


@dataclass(frozen=True)
class RetrievalSettings:
    activity: str | None = None
    stride: int = 1
    threshold: float | None = None
    validation_subjects: tuple = ()
    k: int = 20

    def __post_init__(self):
        object.__setattr__(self, "validation_subjects", tuple(self.validation_subjects))
        if self.stride < 1:
            raise ConfigError("retrieval.stride must be >= 1")
        if self.k < 1:
            raise ConfigError("retrieval.k must be >= 1")


@dataclass(frozen=True)
class PathSettings:
    data: str | None = None
    checkpoint: str | None = None
    out: str | None = None


SECTIONS = {"synth": SynthConfig, "model": ModelConfig, "train": TrainConfig,
            "retrieval": RetrievalSettings, "paths": PathSettings}


@dataclass
class RunConfig:
    """Raw per-section mappings, validated against the section dataclasses."""
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, obj) -> "RunConfig":
        if obj is None:
            obj = {}
        if not isinstance(obj, dict):
            raise ConfigError("config file must hold a mapping of sections")
        raw = {}
        for section, body in obj.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            body = body or {}
            if not isinstance(body, dict):
                raise ConfigError(f"config section {section!r} must be a mapping")
            known = {f.name for f in fields(SECTIONS[section])}
            for key in body:
                if key not in known:
                    raise ConfigError(f"unknown config key {section}.{key}")
            raw[section] = dict(body)
        out = cls(raw)
        for section in SECTIONS:  # validate eagerly, before any work
            if section != "model":
                out.get(section)
        return out

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            obj = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        return cls.from_mapping(obj)

    def set(self, section, key, value):
        if value is not None:
            self.raw.setdefault(section, {})[key] = value

    def get(self, section, **defaults):
        body = {**defaults, **self.raw.get(section, {})}
        try:
            return SECTIONS[section](**body)
        except TypeError as exc:
            raise ConfigError(f"config section {section!r}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"config section {section!r}: {exc}") from None


# ------------------------------------------------------------------ helpers

def _need(value, what):
    if value is None:
        raise ConfigError(f"missing {what}")
    return value


def _load_data(path) -> list[Trajectory]:
    path = Path(_need(path, "data manifest (--data or paths.data)"))
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DataError(f"{path}: no such corpus manifest")
    return load_corpus(path)


def _load_checkpoint(path) -> ckpt.Checkpoint:
    path = Path(_need(path, "checkpoint (--checkpoint or paths.checkpoint)"))
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    return ckpt.load(path)


def _standardized(corpus, stats):
    if stats is None:
        return list(corpus)
    if len(stats.mean) != corpus[0].n_x:
        raise ConfigError(f"checkpoint expects {len(stats.mean)} channels, data has {corpus[0].n_x}")
    return [standardize(t, stats) for t in corpus]


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _find_trial(corpus, trial_id) -> Trajectory:
    for t in corpus:
        if t.trial_id == trial_id:
            return t
    raise DataError(f"trial {trial_id!r} not in corpus")


def _parse_span(text):
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError:
        raise ConfigError(f"span must look like START:STOP, got {text!r}") from None
    return a, b


def model_config_for(run: RunConfig, corpus) -> ModelConfig:
    cfg = run.get("model", n_x=corpus[0].n_x)
    if cfg.n_x != corpus[0].n_x:
        raise ConfigError(f"model.n_x={cfg.n_x} but the data has {corpus[0].n_x} channels")
    return cfg


def validate_training(mcfg: ModelConfig, tcfg: TrainConfig, corpus):
    """Reject physically inconsistent combinations before any computation."""
    subjects = {t.subject_id for t in corpus}
    missing = [s for s in tcfg.heldout_subjects if s not in subjects]
    if missing:
        raise ConfigError(f"held-out subjects not in corpus: {missing}")
    train_set, _ = split_by_subject(corpus, tcfg.heldout_subjects)
    if not train_set:
        raise ConfigError("every subject is held out; nothing left to train on")
    need = mcfg.T_p + mcfg.T_f
    shortest = min(train_set, key=len)
    if len(shortest) < need:
        raise ConfigError(f"T_p + T_f = {need} exceeds trial {shortest.trial_id} "
                          f"({len(shortest)} frames)")
    return train_set


# ----------------------------------------------------------------- commands

def cmd_synth(run: RunConfig, out, force=False) -> Path:
    cfg = run.get("synth")
    out = Path(_need(out, "output directory (--out or paths.out)"))
    if out.exists():
        if not force:
            raise ConfigError(f"{out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    return write_corpus(cfg, synthesize_corpus(cfg), out)


def _save_trainer(tr, stats, path):
    ckpt.save(path, ckpt.from_trainer(tr, stats))


def cmd_train(run: RunConfig, data, out, resume=None, force=False):
    corpus = _load_data(data)
    out = Path(_need(out, "output directory (--out or paths.out)"))
    path = out / CHECKPOINT_NAME
    if resume is None:
        mcfg = model_config_for(run, corpus)
        tcfg = run.get("train")
        train_set = validate_training(mcfg, tcfg, corpus)
        if path.exists() and not force:
            raise ConfigError(f"{path} exists; pass --force to overwrite")
        stats = compute_stats(train_set)
        tr = Trainer(model_init(mcfg), _standardized(corpus, stats), tcfg)
    else:
        prev = _load_checkpoint(resume)
        stats = prev.stats
        tcfg = prev.train_config
        if tcfg is None:
            raise ConfigError(f"{resume} holds no training state")
        steps = run.raw.get("train", {}).get("steps", tcfg.steps)
        tcfg = TrainConfig(**{**tcfg.to_json(), "steps": steps})
        validate_training(prev.model.config, tcfg, corpus)
        tr = ckpt.resume_trainer(prev, _standardized(corpus, stats), tcfg)
    out.mkdir(parents=True, exist_ok=True)
    stats.save(out / "stats.json")
    tr.run(on_eval=lambda t: _save_trainer(t, stats, path))
    _save_trainer(tr, stats, path)
    tr.report.write_csv(out / "report.csv")
    return tr


def cmd_encode(run: RunConfig, checkpoint, data, out) -> int:
    ck = _load_checkpoint(checkpoint)
    settings = run.get("retrieval")
    corpus = _standardized(_load_data(data), ck.stats)
    sets = [encode_trajectory(ck.model, t, settings.stride) for t in corpus]
    return write_encodings_csv(sets, _need(out, "output file (--out)"))


def cmd_query(run: RunConfig, checkpoint, data, trial, span, targets=None) -> dict:
    """Score one query span against target subjects' trials and threshold the scores."""
    ck = _load_checkpoint(checkpoint)
    settings = run.get("retrieval")
    tau = _need(settings.threshold, "threshold (--threshold or retrieval.threshold)")
    corpus = _standardized(_load_data(data), ck.stats)
    m = ck.model
    src = _find_trial(corpus, trial)
    check_span(src, span, m.config.T_p)
    targets = list(targets) if targets else sorted(
        {t.subject_id for t in corpus} - {src.subject_id})
    present = {t.subject_id for t in corpus}
    for s in targets:
        if s not in present:
            raise DataError(f"target subject {s!r} not in corpus")
    q = encode_segment(m, src, span, settings.stride)
    labels = src.labels[span[0]:span[1]] if src.labels is not None else None
    activity = labels[0] if labels and len(set(labels)) == 1 else None
    report = {"query": {"subject": src.subject_id, "trial": src.trial_id, "span": list(span),
                        "activity": activity, "n_windows": len(q)},
              "threshold": tau, "targets": []}
    target_sets = {}
    for t in corpus:
        if t.subject_id not in targets:
            continue
        tset = encode_trajectory(m, t, settings.stride)
        scores = frame_scores(q, tset, len(t)) if len(tset) else np.full(len(t), np.nan)
        res = threshold_retrieve(scores, tau, {"trial": t.trial_id})
        report["targets"].append({"subject": t.subject_id, "trial": t.trial_id,
                                  "retrieved": _runs(res.mask)})
        # metrics are cross-subject only, matching the evaluation protocol
        if activity is not None and t.labels is not None and t.subject_id != src.subject_id:
            truth = np.array([lab == activity for lab in t.labels])
            target_sets.setdefault(t.subject_id, []).append((tset, truth))
    if activity is not None and target_sets:
        tables = score_tables({src.subject_id: [q]}, target_sets)
        ev = evaluate_tables(tables, tau, activity)
        report["metrics"] = {"pairs": ev.pairs, "summary": ev.summary}
    return report


def _runs(mask):
    """Retrieved frames as ``[start, stop)`` runs."""
    idx = np.flatnonzero(np.diff(np.r_[0, mask.astype(np.int8), 0]))
    return [[int(a), int(b)] for a, b in zip(idx[::2], idx[1::2])]


def cmd_eval(run: RunConfig, checkpoint, data) -> dict:
    ck = _load_checkpoint(checkpoint)
    s = run.get("retrieval")
    corpus = _standardized(_load_data(data), ck.stats)
    present = {t.subject_id for t in corpus}
    for v in s.validation_subjects:
        if v not in present:
            raise ConfigError(f"validation subject {v!r} not in corpus")
    if s.activity is not None:
        activities = [s.activity]
    else:
        activities = sorted({lab for t in corpus if t.labels for lab in t.labels})
        if not activities:
            raise DataError("corpus has no labels to evaluate")
    reports = [cross_subject_eval(ck.model, corpus, a, s.threshold, s.stride,
                                  s.validation_subjects).to_json() for a in activities]
    if s.activity is not None:
        return reports[0]
    return {"activities": reports,
            "mean_f1": float(np.mean([r["summary"]["f1"]["mean"] for r in reports]))}


def cmd_predict(run: RunConfig, checkpoint, data, trial, start, out, seed=0) -> np.ndarray:
    """Sample ``k`` futures after the past window starting at ``start``; CSV in data units."""
    ck = _load_checkpoint(checkpoint)
    s = run.get("retrieval")
    corpus = _standardized(_load_data(data), ck.stats)
    t = _find_trial(corpus, trial)
    T_p = ck.model.config.T_p
    check_span(t, (start, start + T_p), T_p)
    samples = predict_futures(ck.model, t.frames[start:start + T_p], s.k,
                              np.random.default_rng(seed))
    if ck.stats is not None:
        samples = samples * ck.stats.std + ck.stats.mean
    out = Path(_need(out, "output file (--out)"))
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "step"] + [f"ch_{c}" for c in range(samples.shape[2])])
        for k, sample in enumerate(samples):
            for step, row in enumerate(sample):
                w.writerow([k, step] + [repr(float(v)) for v in row])
    return samples


def doubling(start, limit):
    out = [start]
    while out[-1] * 2 <= limit:
        out.append(out[-1] * 2)
    return out


def cmd_sweep(run: RunConfig, data, out, max_n_h=64, max_n_c=16, force=False) -> dict:
    """Doubling search over ``n_h`` (from 16) and ``n_c`` (from 1), picked on held-out NLL."""
    corpus = _load_data(data)
    tcfg = run.get("train")
    if not tcfg.heldout_subjects:
        raise ConfigError("sweep selects on held-out NLL; set train.heldout_subjects")
    out = Path(_need(out, "output directory (--out or paths.out)"))
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} is not empty; pass --force to overwrite")
    base = model_config_for(run, corpus)
    train_set = validate_training(base, tcfg, corpus)
    stats = compute_stats(train_set)
    data_std = _standardized(corpus, stats)
    n_cs = doubling(1, max_n_c) if base.uses_mdn else [base.n_c]
    rows, best = [], None
    for n_h in doubling(16, max_n_h):
        for n_c in n_cs:
            mcfg = ModelConfig(**{**asdict(base), "n_h": n_h, "n_c": n_c})
            tr = Trainer(model_init(mcfg), data_std, tcfg)
            tr.run()
            held = tr.report.heldout[tr.step] if tr.step else tr.evaluate()
            rows.append({"n_h": n_h, "n_c": n_c, "heldout_nll": held})
            if best is None or held < best[0]:
                best = (held, tr)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, ["n_h", "n_c", "heldout_nll"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _save_trainer(best[1], stats, out / CHECKPOINT_NAME)
    result = {"runs": rows, "best": {"n_h": best[1].model.config.n_h,
                                     "n_c": best[1].model.config.n_c, "heldout_nll": best[0]}}
    _write_json(out / "sweep.json", result)
    return result


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motion-mdn", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *extra):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--out", help="output path")
        for name in extra:
            if name == "data":
                sp.add_argument("--data", help="corpus manifest (or its directory)")
            elif name == "checkpoint":
                sp.add_argument("--checkpoint", help="checkpoint file (or training output dir)")
            elif name == "seed":
                sp.add_argument("--seed", type=int)
            elif name == "stride":
                sp.add_argument("--stride", type=int)
            elif name == "threshold":
                sp.add_argument("--threshold", type=float)
        return sp

    sp = common(sub.add_parser("synth", help="write a synthetic corpus"), "seed")
    sp.add_argument("--force", action="store_true")
    sp = common(sub.add_parser("train", help="train a model"), "data", "seed")
    sp.add_argument("--variant", choices=["fp-mdn", "fp-nomdn", "nofp-mdn"])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--resume", help="continue from this checkpoint")
    sp.add_argument("--force", action="store_true")
    common(sub.add_parser("encode", help="export window encodings as CSV"),
           "checkpoint", "data", "stride")
    sp = common(sub.add_parser("query", help="retrieve frames similar to a query span"),
                "checkpoint", "data", "stride", "threshold")
    sp.add_argument("--trial", required=True)
    sp.add_argument("--span", required=True, help="START:STOP frame range of the query")
    sp.add_argument("--targets", nargs="*", help="target subjects (default: all others)")
    sp = common(sub.add_parser("eval", help="cross-subject retrieval metrics"),
                "checkpoint", "data", "stride", "threshold")
    sp.add_argument("--activity")
    sp.add_argument("--validation-subjects", nargs="*")
    sp = common(sub.add_parser("predict", help="sample futures for one past window"),
                "checkpoint", "data", "seed")
    sp.add_argument("--trial", required=True)
    sp.add_argument("--start", type=int, required=True)
    sp.add_argument("-k", type=int)
    sp = common(sub.add_parser("sweep", help="doubling search over n_h and n_c"), "data", "seed")
    sp.add_argument("--variant", choices=["fp-mdn", "fp-nomdn", "nofp-mdn"])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--max-n-h", type=int, default=64)
    sp.add_argument("--max-n-c", type=int, default=16)
    sp.add_argument("--force", action="store_true")
    return p


def run_command(args) -> object:
    run = RunConfig.load(args.config)
    paths = run.get("paths")
    out = args.out or paths.out
    data = getattr(args, "data", None) or paths.data
    checkpoint = getattr(args, "checkpoint", None) or paths.checkpoint
    seed = getattr(args, "seed", None)
    run.set("retrieval", "stride", getattr(args, "stride", None))
    run.set("retrieval", "threshold", getattr(args, "threshold", None))
    run.set("model", "variant", getattr(args, "variant", None))
    run.set("train", "steps", getattr(args, "steps", None))
    cmd = args.command
    if cmd == "synth":
        run.set("synth", "seed", seed)
        return cmd_synth(run, out, args.force)
    if cmd in ("train", "sweep"):
        run.set("model", "seed", seed)
        run.set("train", "seed", seed)
        if cmd == "train":
            return cmd_train(run, data, out, args.resume, args.force)
        return cmd_sweep(run, data, out, args.max_n_h, args.max_n_c, args.force)
    if cmd == "encode":
        return cmd_encode(run, checkpoint, data, out)
    if cmd == "query":
        report = cmd_query(run, checkpoint, data, args.trial, _parse_span(args.span), args.targets)
        _write_json(_need(out, "output file (--out)"), report)
        return report
    if cmd == "eval":
        run.set("retrieval", "activity", args.activity)
        if args.validation_subjects is not None:
            run.set("retrieval", "validation_subjects", args.validation_subjects)
        report = cmd_eval(run, checkpoint, data)
        _write_json(_need(out, "output file (--out)"), report)
        return report
    if cmd == "predict":
        run.set("retrieval", "k", args.k)
        return cmd_predict(run, checkpoint, data, args.trial, args.start, out,
                           0 if seed is None else seed)
    raise ConfigError(f"unknown command {cmd}")  # argparse makes this unreachable


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run_command(args)
    except MotionError as exc:
        print(f"motion-mdn {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
