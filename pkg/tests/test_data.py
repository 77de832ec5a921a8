import json

import numpy as np
import pytest
from scipy import stats as sps

from motion_mdn.data import (ChannelStats, Regime, SynthConfig, Trajectory, compute_stats,
                             enumerate_windows, load_corpus, load_csv, regime_dynamics,
                             sample_window_pair, segment_mean, segments, standardize,
                             synthesize_corpus, synthesize_trial, unstandardize, window_pair_at,
                             write_corpus, write_csv)
from motion_mdn.errors import (ConfigError, EmptyInputError, InsufficientLengthError,
                               ParseError, ShapeError)

from conftest import small_synth


def traj(frames, labels=None):
    return Trajectory(np.asarray(frames, dtype=float), 10.0, labels, "s", "t")


# ---------------------------------------------------------------- CSV

def test_load_csv_without_labels(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("ch_0,ch_1\n1,2\n3,4\n5,6\n")
    t = load_csv(p)
    assert len(t) == 3 and t.n_x == 2 and t.labels is None
    assert np.array_equal(t.frames, [[1, 2], [3, 4], [5, 6]])


def test_load_csv_with_labels(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("ch_0,label\n1,ST\n2,ST\n3,KT\n")
    assert list(load_csv(p).labels) == ["ST", "ST", "KT"]


def test_load_csv_bad_row_names_row(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("ch_0,ch_1\n1.0,abc\n")
    with pytest.raises(ParseError, match="row 1") as exc:
        load_csv(p)
    assert exc.value.row == 1


def test_load_csv_wrong_arity(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("ch_0,ch_1\n1,2\n3\n")
    with pytest.raises(ParseError) as exc:
        load_csv(p)
    assert exc.value.row == 2


def test_load_csv_empty(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("")
    with pytest.raises(EmptyInputError):
        load_csv(p)


def test_csv_round_trip_is_exact(tmp_path, rng):
    t = Trajectory(rng.standard_normal((7, 3)), 4.0, tuple("aabbbcc"), "s", "t")
    write_csv(t, tmp_path / "x.csv")
    back = load_csv(tmp_path / "x.csv")
    assert np.array_equal(back.frames, t.frames) and back.labels == t.labels


# -------------------------------------------------------- standardization

def test_stats_two_point():
    s = compute_stats([traj([[0.0], [2.0]])])
    assert s.mean.tolist() == [1.0] and s.std.tolist() == [1.0]


def test_stats_constant_channel_floor():
    s = compute_stats([traj([[5.0], [5.0], [5.0]])])
    assert s.mean.tolist() == [5.0] and s.std.tolist() == [1e-8]


def test_stats_match_two_pass(rng):
    corpus = [traj(rng.normal(3, 2, (n, 4))) for n in (30, 45, 25)]
    s = compute_stats(corpus)
    allf = np.concatenate([t.frames for t in corpus])
    n = len(allf)
    mean = [sum(allf[:, k]) / n for k in range(4)]
    var = [sum((allf[:, k] - mean[k]) ** 2) / n for k in range(4)]
    assert np.allclose(s.mean, mean, atol=1e-12, rtol=0)
    assert np.allclose(s.std, np.sqrt(var), atol=1e-12, rtol=0)


def test_stats_empty():
    with pytest.raises(EmptyInputError):
        compute_stats([])


def test_standardize_examples():
    assert standardize(traj([[1.0]]), ChannelStats(np.array([1.0]), np.array([1.0]))).frames[0, 0] == 0
    assert standardize(traj([[3.0]]), ChannelStats(np.array([1.0]), np.array([2.0]))).frames[0, 0] == 1


def test_standardize_round_trip_and_moments(rng):
    corpus = [traj(rng.normal(-2, 5, (40, 3)), tuple("x" * 40)) for _ in range(3)]
    s = compute_stats(corpus)
    z = [standardize(t, s) for t in corpus]
    assert z[0].labels == corpus[0].labels
    allz = np.concatenate([t.frames for t in z])
    assert np.allclose(allz.mean(0), 0, atol=1e-9) and np.allclose(allz.std(0), 1, atol=1e-9)
    back = unstandardize(z[1], s)
    assert np.allclose(back.frames, corpus[1].frames, atol=1e-12, rtol=0)


def test_standardize_dimension_mismatch():
    with pytest.raises(ShapeError):
        standardize(traj([[1.0, 2.0]]), ChannelStats(np.zeros(3), np.ones(3)))


def test_stats_json_round_trip(tmp_path):
    s = ChannelStats(np.array([0.1, -2.5]), np.array([1.0, 1 / 3]))
    s.save(tmp_path / "s.json")
    back = ChannelStats.load(tmp_path / "s.json")
    assert np.array_equal(back.mean, s.mean) and np.array_equal(back.std, s.std)
    assert set(json.loads((tmp_path / "s.json").read_text())) == {"mean", "std"}


# --------------------------------------------------------------- windows

def test_window_exact_fit_starts_at_zero(rng):
    t = traj(np.arange(10.0)[:, None])
    for _ in range(20):
        assert sample_window_pair(t, 6, 4, rng).source[2] == 0


def test_window_pair_contiguous():
    t = traj(np.arange(20.0)[:, None])
    w = window_pair_at(t, 3, 5, 4)
    assert w.past[:, 0].tolist() == [3, 4, 5, 6, 7] and w.future[:, 0].tolist() == [8, 9, 10, 11]
    assert w.source == ("s", "t", 3)


def test_window_starts_uniform(rng):
    T_p, T_f = 4, 3
    t = traj(np.zeros((T_p + T_f + 9, 1)))
    starts = np.array([sample_window_pair(t, T_p, T_f, rng).source[2] for _ in range(10_000)])
    counts = np.bincount(starts, minlength=10)
    assert len(counts) == 10
    assert np.all(np.abs(counts / 1e4 - 0.1) <= 0.02)
    assert sps.chisquare(counts).pvalue > 1e-4


def test_window_too_short(rng):
    with pytest.raises(InsufficientLengthError):
        sample_window_pair(traj(np.zeros((5, 1))), 3, 3, rng)


@pytest.mark.parametrize("L,T_p,stride,n", [(5, 5, 1, 1), (7, 5, 1, 3), (100, 50, 5, 11)])
def test_enumerate_windows_counts(L, T_p, stride, n):
    t = traj(np.arange(L + 6.0)[:, None])
    wins = enumerate_windows(t, (3, 3 + L), T_p, stride)
    brute = [s for s in range(3, 3 + L) if s + T_p <= 3 + L and (s - 3) % stride == 0]
    assert len(wins) == n == len(brute)
    assert [span[0] for _, span in wins] == brute
    for w, (a, b) in wins:
        assert b - a == T_p and np.array_equal(w[:, 0], np.arange(a, b))


def test_enumerate_windows_short_span():
    with pytest.raises(InsufficientLengthError):
        enumerate_windows(traj(np.zeros((10, 1))), (0, 4), 5, 1)


def test_segments():
    assert segments(list("aabccc")) == [("a", 0, 2), ("b", 2, 3), ("c", 3, 6)]


# ------------------------------------------------------------- synthesis

def test_synth_deterministic():
    a = synthesize_corpus(small_synth())
    b = synthesize_corpus(small_synth())
    assert all(np.array_equal(x.frames, y.frames) and x.labels == y.labels for x, y in zip(a, b))
    c = synthesize_corpus(small_synth(seed=1))
    assert not np.array_equal(a[0].frames, c[0].frames)


def test_synth_label_set():
    regs = (Regime("regime0", 0.2, noise=0.1), Regime("regime1", 0.5, noise=0.1))
    corpus = synthesize_corpus(small_synth(regimes=regs))
    assert {lab for t in corpus for lab in t.labels} == {"regime0", "regime1"}


def test_synth_shapes_and_ids():
    cfg = small_synth()
    corpus = synthesize_corpus(cfg)
    assert len(corpus) == cfg.n_subjects * cfg.trials_per_subject
    assert corpus[0].subject_id == "subject00" and corpus[-1].trial_id == "subject02_trial01"
    assert all(t.n_x == cfg.n_channels and len(t.labels) == len(t) for t in corpus)


def test_synth_consecutive_segments_differ():
    t, infos = synthesize_trial(small_synth(segments_per_trial=20), 0, 0)
    assert all(a.regime != b.regime for a, b in zip(infos, infos[1:]))
    assert infos[0].start == 0 and infos[-1].stop == len(t)


def test_synth_branch_at_midpoint():
    _, infos = synthesize_trial(small_synth(segments_per_trial=12), 1, 0)
    for s in infos:
        if s.branch is not None:
            assert s.branch_at == s.start + (s.stop - s.start) // 2


@pytest.mark.parametrize("bad", [dict(n_subjects=0), dict(segment_length_range=(5, 3)),
                                 dict(sample_rate_hz=0.0), dict(tremor_corr=1.0),
                                 dict(regimes=(Regime("a", 0.1, noise=-1.0),)),
                                 dict(regimes=(Regime("a", 0.1, branching=0),))])
def test_synth_config_validation(bad):
    with pytest.raises(ConfigError):
        small_synth(**bad)


def test_branching_futures_are_bimodal():
    # Same past, many draws of the generator's own continuation: two tight clusters.
    cfg = small_synth(regimes=(Regime("fork", 0.15, 1.0, 0.2, 2, 1.5),), tremor_std=0.0,
                      segment_length_range=(40, 40), n_channels=4)
    dyn = regime_dynamics(cfg)
    futures, branch = [], []
    for trial in range(60):
        t, infos = synthesize_trial(cfg, 0, trial, dyn)
        for s in infos:
            futures.append(t.frames[s.branch_at:s.branch_at + 10].ravel())
            branch.append(s.branch)
    futures, branch = np.array(futures), np.array(branch)
    # cluster blind to the generator's labels: 2-means from the two most distant points
    i = np.argmax(np.linalg.norm(futures - futures[0], axis=1))
    j = np.argmax(np.linalg.norm(futures - futures[i], axis=1))
    centers = futures[[i, j]]
    for _ in range(20):
        assign = np.argmin(((futures[:, None] - centers) ** 2).sum(-1), axis=1)
        centers = np.stack([futures[assign == k].mean(0) for k in range(2)])
    within = np.sqrt(np.mean([futures[assign == k].var(0).mean() for k in range(2)]))
    sep = np.linalg.norm(centers[0] - centers[1]) / np.sqrt(futures.shape[1])
    assert sep >= 4 * within
    # the clusters are exactly the generator's branches
    assert abs(np.corrcoef(assign, branch)[0, 1]) == pytest.approx(1.0)


def test_segment_mean_branches_apart_only_after_split():
    cfg = small_synth(regimes=(Regime("fork", 0.15, 1.0, 0.2, 2, 1.5),))
    lt = np.arange(20)
    a = segment_mean(cfg, 0, 0, lt, 0, 10)
    b = segment_mean(cfg, 0, 0, lt, 1, 10)
    assert np.array_equal(a[:10], b[:10])
    assert np.allclose(np.abs(a[10:] - b[10:]), 3.0)


def test_tremor_is_stationary_ar1():
    cfg = small_synth(regimes=(Regime("flat", 0.0, amplitude=0.0, noise=0.0),),
                      tremor_std=0.5, tremor_corr=0.9, segment_length_range=(500, 500),
                      segments_per_trial=20, n_channels=2)
    t, _ = synthesize_trial(cfg, 0, 0)
    x = t.frames - t.frames.mean(0)
    assert x.std() == pytest.approx(0.5, rel=0.1)
    lag1 = (x[1:] * x[:-1]).mean() / (x * x).mean()
    assert lag1 == pytest.approx(0.9, abs=0.02)


def test_corpus_files_round_trip(tmp_path):
    cfg = small_synth()
    corpus = synthesize_corpus(cfg)
    path = write_corpus(cfg, corpus, tmp_path / "c")
    manifest = json.loads(path.read_text())
    assert len(manifest["trials"]) == 6 and SynthConfig.from_json(manifest["config"]) == cfg
    back = load_corpus(path)
    for a, b in zip(corpus, back):
        assert np.array_equal(a.frames, b.frames) and a.labels == b.labels
        assert (a.subject_id, a.trial_id) == (b.subject_id, b.trial_id)


def test_trajectory_invariants():
    with pytest.raises(ShapeError):
        Trajectory(np.zeros((3, 2)), 10.0, ("a",), "s", "t")
    with pytest.raises((ShapeError, ConfigError)):
        Trajectory(np.zeros((3, 2)), 0.0, None, "s", "t")
