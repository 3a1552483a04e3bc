import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepconn.data import RepConfig, Workspace
from deepconn.evaluation import DeepConnPredictor, evaluate
from deepconn.ingest import split_corpus
from deepconn.model import ModelConfig, SideBatch, make_variant
from deepconn.nnkernel import ParameterSet
from deepconn.train import (MAGIC, CheckpointError, TrainConfig, batch_slices, epoch_order, fit,
                            load_checkpoint, rmsprop_step, save_checkpoint, train_epoch)


def scalar_params(theta=0.0, g=1.0):
    ps = ParameterSet()
    ps.add("theta", np.array([theta]))
    ps.grads["theta"][:] = g
    return ps


# -- RMSprop ----------------------------------------------------------------------

def test_first_step_hand_value():
    ps = scalar_params()
    rmsprop_step(ps, TrainConfig(lr=0.002, eps=1e-8))
    assert ps.accum["theta"][0] == pytest.approx(0.9)
    assert -ps.params["theta"][0] == pytest.approx(0.0021082, abs=1e-6)
    assert not ps.grads["theta"].any()


def test_conventional_weighting():
    ps = scalar_params()
    rmsprop_step(ps, TrainConfig.conventional(lr=0.002))
    assert ps.accum["theta"][0] == pytest.approx(0.1)
    assert -ps.params["theta"][0] == pytest.approx(0.002 / np.sqrt(0.1), rel=1e-6)


def test_zero_gradient_decays_history_only():
    ps = scalar_params(theta=1.5, g=0.0)
    ps.accum["theta"][:] = 4.0
    rmsprop_step(ps, TrainConfig())
    assert ps.accum["theta"][0] == pytest.approx(0.4)
    assert ps.params["theta"][0] == 1.5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=20))
def test_step_opposes_gradient_and_history_nonnegative(gs):
    ps = ParameterSet()
    ps.add("p", np.zeros(len(gs)))
    for _ in range(3):
        before = ps.params["p"].copy()
        ps.grads["p"][:] = gs
        rmsprop_step(ps, TrainConfig())
        delta = ps.params["p"] - before
        g = np.array(gs)
        nz = g != 0
        assert np.all(np.sign(delta[nz]) == -np.sign(g[nz]))
        assert np.all(ps.accum["p"] >= 0)


def test_nonfinite_gradient_names_parameter():
    ps = scalar_params(g=np.inf)
    with pytest.raises(FloatingPointError, match="theta"):
        rmsprop_step(ps, TrainConfig())


@pytest.mark.parametrize("kw", [dict(lr=-1.0), dict(batch_size=0), dict(grad_weight=0.5, history_weight=0.6)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- epochs -----------------------------------------------------------------------

def test_batch_partition():
    assert [s.stop - s.start for s in batch_slices(250, 100)] == [100, 100, 50]


def test_epoch_order_pure_function():
    np.testing.assert_array_equal(epoch_order(30, 4, 2), epoch_order(30, 4, 2))
    assert not np.array_equal(epoch_order(30, 4, 2), epoch_order(30, 4, 3))
    assert sorted(epoch_order(30, 4, 2)) == list(range(30))


@pytest.fixture
def setup(planted):
    corpus, data, vecs = planted
    split = split_corpus(corpus.records, seed=1)
    ws = Workspace(split, RepConfig(c=6, n_max=24, embeddings=str(vecs)), t=2)
    cfg = ModelConfig(c=6, t=2, n1=4, n2=3, n_max=24, dropout=0.5)
    return split, ws, cfg


def test_train_epoch_batches_and_zero_lr(setup):
    split, ws, cfg = setup
    m = make_variant("full", cfg, ws.stats())
    before = {k: v.copy() for k, v in m.params.params.items()}
    stats = train_epoch(m, ws, split.train, TrainConfig(lr=0.0, batch_size=10))
    assert stats.batch_sizes == [10, 10, 10, 2]
    assert all(np.array_equal(before[k], m.params.params[k]) for k in before)


def test_train_epoch_deterministic(setup):
    split, ws, cfg = setup
    losses = []
    for _ in range(2):
        m = make_variant("full", cfg, ws.stats())
        losses.append([train_epoch(m, ws, split.train, TrainConfig(batch_size=8), e).train_loss for e in range(3)])
    np.testing.assert_allclose(losses[0], losses[1], rtol=0, atol=1e-9)


@pytest.mark.parametrize("patience", [0, 2])
def test_early_stopping_rule(setup, patience):
    split, ws, cfg = setup
    m = make_variant("full", cfg, ws.stats())
    res = fit(m, ws, TrainConfig(lr=0.0, max_epochs=20, patience=patience))
    # constant validation MSE: epoch 0 is best, then patience + 1 stale epochs
    assert len(res.history) == patience + 2
    assert res.status == "early_stopped" and res.best_epoch == 0


def test_fit_restores_best_snapshot(setup):
    split, ws, cfg = setup
    m = make_variant("full", cfg, ws.stats())
    res = fit(m, ws, TrainConfig(lr=0.01, batch_size=8, max_epochs=6, patience=10))
    assert len(res.history) <= 6
    best = min(h["valid_mse"] for h in res.history)
    assert res.best_valid_mse == best
    assert evaluate(DeepConnPredictor(m, ws), split.valid).mse == pytest.approx(best, abs=1e-12)


def test_fit_reports_divergence(setup):
    split, ws, cfg = setup
    m = make_variant("full", cfg, ws.stats())
    m.head.w0[0] = np.nan
    res = fit(m, ws, TrainConfig(max_epochs=3))
    assert res.status == "diverged" and res.history == []


# -- checkpoints ------------------------------------------------------------------

def random_inputs(rng, cfg, users, items, n=100):
    mask = (rng.random((n, cfg.n_max)) < 0.8).astype(float)
    side = lambda ents: SideBatch(mask=mask, values=rng.normal(size=(n, cfg.c, cfg.n_max)) * mask[:, None],
                                  entities=[ents[k % len(ents)] for k in range(n)])
    return side(users), side(items)


@pytest.mark.parametrize("variant", ["full", "user_only", "item_only", "dot_product"])
@pytest.mark.parametrize("dtype", ["float64", "float32"])
def test_checkpoint_roundtrip_bit_identical(setup, tmp_path, variant, dtype):
    split, ws, cfg = setup
    cfg = ModelConfig(**{**cfg.to_dict(), "dtype": dtype})
    m = make_variant(variant, cfg, ws.stats())
    train_epoch(m, ws, split.train, TrainConfig(batch_size=8))
    u, i = random_inputs(np.random.default_rng(0), cfg, ws.users, ws.items)
    before = m.predict(u, i)[0]
    save_checkpoint(m, tmp_path / "m.ckpt", ws.fingerprint(), epoch=7)
    loaded, header = load_checkpoint(tmp_path / "m.ckpt", ws.fingerprint())
    assert header["epoch"] == 7
    assert header["dtype"] == ("<f4" if dtype == "float32" else "<f8")
    assert np.array_equal(before, loaded.predict(u, i)[0])


def test_checkpoint_layout(setup, tmp_path):
    _, ws, cfg = setup
    m = make_variant("full", ModelConfig(**{**cfg.to_dict(), "dtype": "float32"}), ws.stats())
    save_checkpoint(m, tmp_path / "m.ckpt")
    data = (tmp_path / "m.ckpt").read_bytes()
    assert data[:8] == MAGIC == b"DCNNCKPT"
    version, hlen = struct.unpack("<IQ", data[8:20])
    assert version == 1
    assert len(data) - 20 - hlen == 4 * m.params.size()


def test_checkpoint_with_trainable_embedding(setup, tmp_path):
    split, ws, cfg = setup
    ws_ids = Workspace(split, RepConfig(c=6, n_max=24, embeddings=ws.rep.embeddings), token_ids=True, t=2)
    m = make_variant("full", ModelConfig(**{**cfg.to_dict(), "train_embeddings": True}), ws_ids.stats(),
                     embedding_init=ws_ids.lookup)
    train_epoch(m, ws_ids, split.train, TrainConfig(batch_size=8))
    batch = ws_ids.batch(split.test)
    save_checkpoint(m, tmp_path / "e.ckpt")
    loaded, _ = load_checkpoint(tmp_path / "e.ckpt")
    assert np.array_equal(m.predict(batch.user, batch.item)[0], loaded.predict(batch.user, batch.item)[0])


def test_checkpoint_integrity_errors(setup, tmp_path):
    _, ws, cfg = setup
    m = make_variant("full", cfg, ws.stats())
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path, "abc")
    data = path.read_bytes()

    (tmp_path / "short.ckpt").write_bytes(data[:-8])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(tmp_path / "short.ckpt")
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(path, "other")
    (tmp_path / "magic.ckpt").write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "ver.ckpt").write_bytes(data[:8] + struct.pack("<I", 99) + data[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.ckpt")
