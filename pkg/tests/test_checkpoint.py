import struct

import numpy as np
import pytest

from motion_mdn import checkpoint as ckpt
from motion_mdn.data import compute_stats
from motion_mdn.errors import CheckpointError
from motion_mdn.seq2seq import ModelConfig, model_init
from motion_mdn.training import TrainConfig, Trainer

CFG = ModelConfig(n_x=3, n_h=8, n_c=2, T_p=6, T_f=6)
TCFG = TrainConfig(steps=30, batch_size=4, eval_every=10, heldout_subjects=("subject00",))


def test_model_only_round_trip(tmp_path):
    m = model_init(CFG)
    path = ckpt.save(tmp_path / "m.bin", ckpt.Checkpoint(m))
    back = ckpt.load(path)
    assert back.model.same_as(m) and back.adam is None and back.stats is None
    assert ckpt.to_bytes(back) == path.read_bytes()


def test_layout_prefix(tmp_path):
    buf = ckpt.to_bytes(ckpt.Checkpoint(model_init(CFG)))
    magic, version, hlen = struct.unpack_from("<8sIQ", buf)
    assert magic == b"MMDNCKPT" and version == ckpt.VERSION
    n_floats = model_init(CFG).n_params()
    assert len(buf) == 20 + hlen + 8 * n_floats


def test_full_state_save_load_save(tiny_corpus):
    tr = Trainer(model_init(CFG), tiny_corpus, TCFG)
    tr.run(until=12)
    first = ckpt.to_bytes(ckpt.from_trainer(tr, compute_stats(tiny_corpus)))
    again = ckpt.to_bytes(ckpt.from_bytes(first))
    assert first == again


def test_resume_equivalence(tiny_corpus):
    full = Trainer(model_init(CFG), tiny_corpus, TCFG)
    full.run()
    part = Trainer(model_init(CFG), tiny_corpus, TCFG)
    part.run(until=17)  # not on an eval boundary
    resumed = ckpt.resume_trainer(ckpt.from_bytes(ckpt.to_bytes(ckpt.from_trainer(part))), tiny_corpus)
    resumed.run()
    assert resumed.report.to_json() == full.report.to_json()
    assert resumed.model.same_as(full.model)


def test_resume_rejects_changed_config(tiny_corpus):
    tr = Trainer(model_init(CFG), tiny_corpus, TCFG)
    ck = ckpt.from_trainer(tr)
    with pytest.raises(CheckpointError):
        ckpt.resume_trainer(ck, tiny_corpus, TrainConfig(**{**TCFG.to_json(), "batch_size": 7}))
    with pytest.raises(CheckpointError):
        ckpt.resume_trainer(ckpt.Checkpoint(model_init(CFG)), tiny_corpus)


def test_corrupt_files(tmp_path):
    buf = ckpt.to_bytes(ckpt.Checkpoint(model_init(CFG)))
    with pytest.raises(CheckpointError, match="magic"):
        ckpt.from_bytes(b"X" + buf[1:])
    with pytest.raises(CheckpointError, match="version"):
        ckpt.from_bytes(buf[:8] + struct.pack("<I", 99) + buf[12:])
    with pytest.raises(CheckpointError):
        ckpt.from_bytes(buf[:-8])
    with pytest.raises(CheckpointError):
        ckpt.from_bytes(buf[:10])
    with pytest.raises(CheckpointError):
        ckpt.load(tmp_path / "missing.bin")


def test_shape_mismatch_rejected():
    m = model_init(CFG)
    m.params["head.b_pi"] = np.zeros(3)
    with pytest.raises(CheckpointError):
        ckpt.from_bytes(ckpt.to_bytes(ckpt.Checkpoint(m)))
