import numpy as np
import pytest

from vtnet import nn
from vtnet.data import Label
from vtnet.errors import EmptyTrainingSet, InvalidConfig, ShapeMismatch
from vtnet.gradcheck import check_model, tiny_batch, tiny_config
from vtnet.model import (MAGIC, Batch, VtnetConfig, VtnetModel, cnn_output_shape, fit, forward,
                         head_input_width, init_model, load_checkpoint, loss_and_grads, lr_schedule,
                         make_batch, predict, rate_at, read_checkpoint, save_checkpoint)
from vtnet.preprocess import DataItem, FeatureSequence, ScanPathImage


def toy_items(n, cfg, seed=0, separable=True):
    """Items whose class is visible in both the sequence and the image."""
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        label = Label(i % 2)
        v = rng.normal(0, 0.3, (6, 8))
        px = rng.random((cfg.image_height, cfg.image_width)).astype(np.float32) * 0.2
        if separable and label == Label.CONFUSED:
            v[-2:, 2] += 2.0
            px[:4, :4] = 1.0
        mask = np.ones(6, bool)
        mask[: i % 3] = False
        v[~mask] = 0
        items.append(DataItem(FeatureSequence(v, mask), ScanPathImage(px), label, f"t{i}", "u", 0))
    return items


SMALL = dict(hidden_size=8, conv_filters=(2, 3), head_hidden=8, image_height=16, image_width=16,
             dtype="float64")


# ---------------------------------------------------------------- config / init

def test_full_geometry_shapes():
    cfg = VtnetConfig()
    assert cnn_output_shape(cfg) == (16, 39, 50)
    assert head_input_width(cfg) == 256 + 16 * 39 * 50
    assert head_input_width(VtnetConfig(variant="cnn_only")) == 16 * 39 * 50
    assert head_input_width(VtnetConfig(variant="gru_only")) == 256
    assert VtnetConfig.for_screen(1280, 1024).image_height == 171


def test_full_geometry_init_shapes():
    m = init_model(VtnetConfig())
    assert m.params["fc1.W"].shape == (256, 256 + 31200)
    assert m.params["conv1.w"].shape == (6, 1, 5, 5) and m.params["conv2.w"].shape == (16, 6, 5, 5)
    assert m.params["gru.U_h"].shape == (256, 256) and m.params["gru.W_z"].shape == (256, 8)
    assert m.history == [] and m.best_epoch is None


def test_gru_only_has_no_conv():
    p = init_model(VtnetConfig(variant="gru_only")).params
    assert not any(k.startswith("conv") for k in p)
    p = init_model(VtnetConfig(variant="cnn_only", **{k: v for k, v in SMALL.items()})).params
    assert not any(k.startswith("gru") for k in p)


def test_init_deterministic():
    a = init_model(VtnetConfig(seed=4, **SMALL)).params
    b = init_model(VtnetConfig(seed=4, **SMALL)).params
    c = init_model(VtnetConfig(seed=5, **SMALL)).params
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_init_bounds():
    p = init_model(VtnetConfig(**SMALL)).params
    assert np.abs(p["conv2.w"]).max() <= 1 / np.sqrt(2 * 25)
    assert np.all(p["fc1.b"] == 0)


@pytest.mark.parametrize("bad", [dict(variant="rnn"), dict(hidden_size=0), dict(lr0=0.0),
                                 dict(image_height=10), dict(dtype="int8"), dict(patience=0)])
def test_invalid_config(bad):
    with pytest.raises(InvalidConfig):
        init_model(VtnetConfig(**{**SMALL, **bad}))


# ---------------------------------------------------------------- forward / predict

def test_forward_normalised_and_pure():
    cfg = VtnetConfig(**SMALL)
    m = init_model(cfg)
    items = toy_items(6, cfg)
    lp = forward(m, items)
    np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-6)
    twin = [items[0], DataItem(items[0].sequence, ScanPathImage(items[0].image.pixels.copy()),
                               items[0].label, "copy", "u", 0)]
    lp2 = forward(m, twin)
    assert lp2[0].tobytes() == lp2[1].tobytes()


def test_zero_params_give_uniform():
    cfg = VtnetConfig(**SMALL)
    m = init_model(cfg)
    m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
    lp = forward(m, toy_items(4, cfg))
    np.testing.assert_allclose(lp, np.log(0.5), atol=1e-15)
    assert all(p.score == 0.5 for p in predict(m, toy_items(4, cfg)))


def test_both_branches_live():
    cfg = VtnetConfig(**SMALL, seed=3)
    m = init_model(cfg)
    items = toy_items(4, cfg)
    base = forward(m, items)
    no_img = [DataItem(it.sequence, ScanPathImage(np.zeros_like(it.image.pixels)), it.label,
                       it.parent_task_id, "u", 0) for it in items]
    no_seq = [DataItem(FeatureSequence(np.zeros_like(it.sequence.values), it.sequence.mask),
                       it.image, it.label, it.parent_task_id, "u", 0) for it in items]
    assert not np.allclose(forward(m, no_img), base)
    assert not np.allclose(forward(m, no_seq), base)


def test_forward_shape_errors():
    cfg = VtnetConfig(**SMALL)
    m = init_model(cfg)
    wrong = toy_items(2, VtnetConfig(**{**SMALL, "image_height": 20}))
    with pytest.raises(ShapeMismatch):
        forward(m, wrong)
    no_image = [DataItem(it.sequence, None, it.label, "x", "u", 0) for it in toy_items(2, cfg)]
    with pytest.raises(ShapeMismatch):
        forward(m, no_image)
    # GRU-only models ignore images entirely
    forward(init_model(VtnetConfig(variant="gru_only", **SMALL)), no_image)


def test_predict_scores_in_range():
    for seed in range(5):
        cfg = VtnetConfig(**SMALL, seed=seed)
        preds = predict(init_model(cfg), toy_items(7, cfg, seed=seed))
        assert all(0.0 <= p.score <= 1.0 for p in preds)
        assert [p.label for p in preds] == [i % 2 for i in range(7)]
        assert preds[0].item == "t0_0"


def test_shared_images_are_deduplicated():
    cfg = VtnetConfig(**SMALL)
    items = toy_items(2, cfg)
    four = [DataItem(items[i // 2].sequence, items[i // 2].image, items[i // 2].label, f"t{i // 2}",
                     "u", i % 2) for i in range(4)]
    b = make_batch(four, cfg)
    assert b.images.shape[0] == 2 and b.image_index.tolist() == [0, 0, 1, 1]


def test_batched_gradient_matches_per_item_sum():
    cfg = tiny_config()
    p = init_model(cfg).params
    b = tiny_batch(0, n_items=3)
    _, g = loss_and_grads(p, cfg, b)
    acc = {k: np.zeros_like(v) for k, v in g.items()}
    for i in range(3):
        sub = Batch(b.seqs[i:i + 1], b.mask[i:i + 1], b.images[i:i + 1], np.array([0]),
                    b.labels[i:i + 1])
        _, gi = loss_and_grads(p, cfg, sub)
        for k in acc:
            acc[k] += gi[k] / 3
    for k in g:
        np.testing.assert_allclose(g[k], acc[k], atol=1e-12)


@pytest.mark.parametrize("variant", ["gru_only", "cnn_only", "vtnet"])
def test_end_to_end_gradcheck(variant):
    errs = check_model(0, variant)
    assert max(errs.values()) < 1e-4


def test_end_to_end_gradcheck_with_shared_images():
    cfg = tiny_config()
    params = {k: v + 0.1 for k, v in init_model(cfg).params.items()}
    b = tiny_batch(1, n_items=4)
    b = Batch(b.seqs, b.mask, b.images[:2], np.array([0, 1, 0, 1]), np.array([0, 1, 1, 0]))
    for name in ("conv1.w", "conv2.b", "fc1.W"):
        def f(v, name=name):
            q = dict(params)
            q[name] = v
            loss, g = loss_and_grads(q, cfg, b)
            return loss, g[name]
        assert nn.grad_check(f, params[name]) < 1e-4


# ---------------------------------------------------------------- training

def test_lr_schedule_exact():
    for e in range(100):
        assert lr_schedule(1e-3, e, 100) == 1e-3 * (1 - e / 100)


def test_rate_at():
    pred = np.array([1, 0, 1, 1, 0])
    labels = np.array([1, 1, 0, 0, 0])
    sens, spec, comb = rate_at(pred, labels)
    assert sens == 0.5 and spec == pytest.approx(1 / 3) and comb == pytest.approx(5 / 12)
    assert rate_at(np.array([1, 1]), np.array([1, 1]))[2] == 1.0


def test_fit_zero_epochs_returns_initial():
    cfg = VtnetConfig(**SMALL, max_epochs=0)
    m = init_model(cfg)
    out = fit(m, toy_items(4, cfg))
    assert all(out.params[k].tobytes() == m.params[k].tobytes() for k in m.params)
    assert out.history == []


def test_fit_empty():
    cfg = VtnetConfig(**SMALL)
    with pytest.raises(EmptyTrainingSet):
        fit(init_model(cfg), [])


def test_single_small_step_decreases_loss():
    cfg = tiny_config(seed=2)
    p = init_model(cfg).params
    b = tiny_batch(2, n_items=4)
    loss0, g = loss_and_grads(p, cfg, b)
    q = {k: v.copy() for k, v in p.items()}
    nn.adam_step(q, g, nn.AdamState(), 1e-4)
    loss1, _ = loss_and_grads(q, cfg, b)
    assert loss1 < loss0


def test_fit_reproducible_and_restores_best(tmp_path):
    cfg = VtnetConfig(**SMALL, max_epochs=12, patience=3, batch_size=4, lr0=0.01, seed=1)
    train = toy_items(16, cfg, seed=1)
    val = toy_items(10, cfg, seed=2)
    a = fit(init_model(cfg), train, val, log_path=tmp_path / "log.tsv")
    b = fit(init_model(cfg), train, val)
    assert [r.tsv() for r in a.history] == [r.tsv() for r in b.history]
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    best = max(r.val_combined for r in a.history)
    assert a.history[a.best_epoch].val_combined == best
    assert all(r.val_combined < best for r in a.history[:a.best_epoch])
    # returned parameters reproduce the best epoch's validation score
    pred = np.array([p.score >= 0.5 for p in predict(a, val)], dtype=int)
    assert rate_at(pred, np.array([int(it.label) for it in val]))[2] == best
    lines = (tmp_path / "log.tsv").read_text().splitlines()
    assert len(lines) == len(a.history) and len(lines[0].split("\t")) == 6
    assert a.training_log().splitlines()[0].split("\t") == [
        "epoch", "lr", "train_loss", "val_sensitivity", "val_specificity", "val_combined"]
    assert len(a.history) <= 12


def test_fit_early_stops_with_patience():
    cfg = VtnetConfig(**SMALL, max_epochs=50, patience=2, batch_size=8, seed=0)
    # labels unrelated to inputs: validation accuracy plateaus quickly
    m = fit(init_model(cfg), toy_items(16, cfg, separable=False),
            toy_items(8, cfg, seed=5, separable=False))
    assert len(m.history) <= m.best_epoch + 1 + 2


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = VtnetConfig(**SMALL, seed=7)
    m = init_model(cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    raw = path.read_bytes()
    assert raw.startswith(MAGIC)
    back = load_checkpoint(path, cfg)
    assert all(back.params[k].tobytes() == m.params[k].tobytes() for k in m.params)
    items = toy_items(5, cfg)
    assert [p.score for p in predict(back, items)] == [p.score for p in predict(m, items)]


def test_checkpoint_float32_round_trip(tmp_path):
    cfg = VtnetConfig(**{**SMALL, "dtype": "float32"})
    m = init_model(cfg)
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt", cfg)
    assert all(back.params[k].dtype == np.float32 and
               back.params[k].tobytes() == m.params[k].tobytes() for k in m.params)
    raw = read_checkpoint(tmp_path / "m.ckpt")
    assert all(v.dtype == np.float64 for v in raw.values())


def test_checkpoint_mismatch(tmp_path):
    save_checkpoint(init_model(VtnetConfig(**SMALL)), tmp_path / "m.ckpt")
    with pytest.raises(ShapeMismatch):
        load_checkpoint(tmp_path / "m.ckpt", VtnetConfig(**{**SMALL, "hidden_size": 9}))
    (tmp_path / "bad").write_bytes(b"NOTAMODEL")
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "bad")


def test_model_copy_is_independent():
    m = init_model(VtnetConfig(**SMALL))
    c = m.copy()
    c.params["fc2.b"][0] = 5.0
    assert m.params["fc2.b"][0] == 0.0
    assert isinstance(c, VtnetModel)
