import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dapa_lab.autodiff import AdamState
from dapa_lab.checkpoint import (MAGIC, Checkpoint, CheckpointCorruptError, CheckpointVersionError,
                                 _pack_section, _unpack_sections, file_digest, load_checkpoint, load_prior,
                                 save_checkpoint, save_prior)
from dapa_lab.datagen import default_specs, sample_domain
from dapa_lab.experiment import ExperimentConfig, run_pretrain
from dapa_lab.prior import decode, encode
from dapa_lab.regressor import init_mean_params, init_regressor


def _flat(params):
    return np.concatenate([p.data.ravel() for p in params.parameters()])


@pytest.fixture(scope="module")
def source(tree):
    return sample_domain(default_specs(2, 300, 0, 0)["source"], tree)


@pytest.fixture
def ckpt(tree, source):
    reg = init_regressor(tree, source.observations().shape[1], init_mean_params(tree, source.param_matrix()),
                         hidden=(16, 8), seed=4)
    opt = AdamState.for_params(reg.parameters(), lr=3e-4)
    opt.step = 7
    for m, v in zip(opt.m, opt.v):
        m[...] = 0.1
        v[...] = 0.2
    return Checkpoint(reg, opt, step=7, seed=4, tree_fingerprint="abc", config={"mode": "dapa", "s": 0.5},
                      prior_ref={"file": "prior.ckpt", "crc32": "00000000"}, history=[{"step": 0, "loss": 1.5}])


def test_save_load_save_is_byte_identical(tmp_path, ckpt):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, ckpt)
    save_checkpoint(b, load_checkpoint(a))
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes().startswith(MAGIC)


def test_round_trip_restores_every_field(tmp_path, ckpt):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    np.testing.assert_array_equal(_flat(back.regressor), _flat(ckpt.regressor))
    np.testing.assert_array_equal(back.regressor.mean_params, ckpt.regressor.mean_params)
    assert back.regressor.n_iter == ckpt.regressor.n_iter
    assert back.optimizer.step == 7 and back.optimizer.lr == 3e-4
    for m0, m1 in zip(ckpt.optimizer.m, back.optimizer.m):
        np.testing.assert_array_equal(m0, m1)
    assert (back.step, back.seed, back.config, back.prior_ref, back.history) == \
        (7, 4, ckpt.config, ckpt.prior_ref, ckpt.history)


def test_no_temporary_file_left(tmp_path, ckpt):
    save_checkpoint(tmp_path / "c.ckpt", ckpt)
    assert [p.name for p in tmp_path.iterdir()] == ["c.ckpt"]


def test_resume_matches_uninterrupted_run(tmp_path, tree, source):
    cfg = ExperimentConfig(pretrain_steps=12, batch_size=16)
    full = run_pretrain(tree, source, 9, cfg)
    half = run_pretrain(tree, source, 9, cfg, until=5)
    path = tmp_path / "half.ckpt"
    save_checkpoint(path, Checkpoint(half.params, half.opt, half.step, 9, history=half.history))
    back = load_checkpoint(path)
    from dapa_lab.trainer import TrainState
    resumed = run_pretrain(tree, source, 9, cfg, state=TrainState(back.regressor, back.optimizer, back.step,
                                                                   back.history))
    np.testing.assert_array_equal(_flat(resumed.params), _flat(full.params))
    assert resumed.history == full.history


@pytest.mark.parametrize("cut", [3, 12, 40, -5, -1])
def test_truncated_file_is_rejected(tmp_path, ckpt, cut):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, ckpt)
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(CheckpointCorruptError, match="truncated"):
        load_checkpoint(path)


def test_failed_load_does_not_touch_live_objects(tmp_path, ckpt):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, ckpt)
    path.write_bytes(path.read_bytes()[:-9])
    before = _flat(ckpt.regressor)
    with pytest.raises(CheckpointCorruptError):
        ckpt = load_checkpoint(path)
    np.testing.assert_array_equal(_flat(ckpt.regressor), before)


def test_version_mismatch(tmp_path, ckpt):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, ckpt)
    raw = bytearray(path.read_bytes())
    raw[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="99"):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(CheckpointCorruptError, match="magic"):
        load_checkpoint(path)


def test_flipped_payload_byte_fails_checksum(tmp_path, ckpt):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, ckpt)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


def test_trailing_garbage_is_rejected(tmp_path, ckpt):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, ckpt)
    path.write_bytes(path.read_bytes() + b"\x00\x01")
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


@given(st.lists(arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 3)),
                       elements=st.floats(allow_nan=False, allow_infinity=True, width=64)),
                min_size=0, max_size=4),
       st.dictionaries(st.text(max_size=5), st.integers() | st.text(max_size=5), max_size=3))
def test_section_round_trip_property(arrs, meta):
    named = {f"a{i}": a for i, a in enumerate(arrs)}
    buf = MAGIC + struct.pack("<I", 1) + _pack_section("s", meta, named)
    back_meta, back = _unpack_sections(buf)["s"]
    assert back_meta == meta
    assert list(back) == list(named)
    for k in named:
        np.testing.assert_array_equal(back[k], named[k])


def test_prior_round_trip(tmp_path, small_prior, rng):
    path = tmp_path / "prior.ckpt"
    save_prior(path, small_prior, {"corpus_size": 2000})
    back, meta = load_prior(path)
    assert meta == {"kind": "prior", "corpus_size": 2000}
    z = rng.normal(size=(5, small_prior.latent_dim))
    np.testing.assert_array_equal(decode(back, z), decode(small_prior, z))
    poses = decode(small_prior, z)
    np.testing.assert_array_equal(encode(back, poses).mu, encode(small_prior, poses).mu)
    assert len(file_digest(path)) == 8


def test_prior_loader_rejects_regressor_file(tmp_path, ckpt):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, ckpt)
    with pytest.raises(CheckpointCorruptError, match="prior"):
        load_prior(path)
