import csv

import numpy as np
import pytest

from instaformer.aggregator import AggregatorConfig, BoundingBox
from instaformer.backbone import BackboneConfig
from instaformer.data import make_domain
from instaformer.engine import NonFiniteError, ShapeError, Tensor
from instaformer.losses import LossWeights, NceConfig
from instaformer.trainer import (CSV_HEADER, Adam, TrainConfig, TrainState, adam_step,
                                 generator_terms, load_checkpoint, load_state, lr_at,
                                 save_checkpoint, save_state, train, train_step)


def tiny(**kw) -> TrainConfig:
    base = dict(batch=2, steps=4, ckpt_every=2,
                backbone=BackboneConfig(image_size=32, base_channels=4, content_channels=8, style_dim=4),
                aggregator=AggregatorConfig(patch_stride=2, token_dim=16, blocks=1, heads=2, mlp_dim=32),
                nce=NceConfig(patches_per_layer=6, projection_dim=8, hidden_dim=8, instance_grid=2))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return make_domain("A", 4, 0, image_size=32), make_domain("B", 4, 0, image_size=32)


# -- Adam ------------------------------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    p, g = np.array([1.0, -2.0]), np.array([0.5, -3.0])
    new, m, v = adam_step(p, g, np.zeros(2), np.zeros(2), 0.01, 0.5, 0.999, 1e-8, 1)
    np.testing.assert_allclose(new, p - 0.01 * np.sign(g), rtol=0, atol=1e-9)
    np.testing.assert_allclose(m, 0.5 * g)
    np.testing.assert_allclose(v, 0.001 * g * g)


def _scalar_adam_reference(w, steps, lr, b1=0.5, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * (w - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return w


def test_adam_quadratic_converges_and_matches_reference():
    w, m, v = np.array([0.0]), np.zeros(1), np.zeros(1)
    for t in range(1, 201):
        w, m, v = adam_step(w, 2 * (w - 3), m, v, 0.1, 0.5, 0.999, 1e-8, t)
    assert abs(w[0] - 3) < 0.05
    assert abs(w[0] - _scalar_adam_reference(0.0, 200, 0.1)) < 1e-12


def test_adam_errors():
    z = np.zeros(2)
    with pytest.raises(ValueError, match="t must be"):
        adam_step(z, z, z, z, 0.1, 0.5, 0.999, 1e-8, 0)
    with pytest.raises(ShapeError, match="shapes differ"):
        adam_step(z, np.zeros(3), z, z, 0.1, 0.5, 0.999, 1e-8, 1)


def test_adam_treats_missing_grad_as_zero():
    p = Tensor(np.ones(3))
    opt = Adam([("p", p)])
    opt.step(0.1, 1)
    np.testing.assert_array_equal(p.data, 1.0)


# -- schedule and config ----------------------------------------------------------------------

def test_linear_schedule():
    cfg = TrainConfig(steps=100)
    assert lr_at(0, cfg) == lr_at(49, cfg) == 2e-4
    assert lr_at(75, cfg) == pytest.approx(1e-4)
    assert lr_at(100, cfg) == 0.0
    with pytest.raises(ValueError):
        lr_at(101, cfg)


def test_step_and_constant_schedules():
    cfg = TrainConfig(steps=100, schedule="step", lr=1.0)
    assert [lr_at(k, cfg) for k in (0, 49, 50, 74, 75, 99)] == [1, 1, 0.5, 0.5, 0.25, 0.25]
    assert lr_at(99, TrainConfig(steps=100, schedule="constant")) == 2e-4


@pytest.mark.parametrize("kw,match", [({"lr": 0}, "lr"), ({"batch": 0}, "batch"),
                                      ({"schedule": "cosine"}, "schedule"),
                                      ({"dtype": "float16"}, "dtype"),
                                      ({"gan_mode": "hinge"}, "gan_mode"),
                                      ({"beta1": 1.0}, "beta1"),
                                      ({"ckpt_every": -1}, "ckpt_every")])
def test_config_validation(kw, match):
    with pytest.raises(ValueError, match=match):
        TrainConfig(**kw)


def test_config_rejects_indivisible_patch_stride():
    with pytest.raises(ValueError, match="does not divide"):
        TrainConfig(backbone=BackboneConfig(image_size=24), aggregator=AggregatorConfig(patch_stride=4))


# -- one step ----------------------------------------------------------------------------------

def _batch(data, n=2):
    a, b = data
    x = Tensor(np.stack([s.image for s in a[:n]]))
    y = Tensor(np.stack([s.image for s in b[:n]]))
    return x, [list(s.boxes) for s in a[:n]], y


def test_terms_finite_and_positive(data):
    state = TrainState(tiny())
    x, boxes, y = _batch(data)
    s = np.random.default_rng(0).standard_normal((2, 4))
    terms, y_hat = generator_terms(state, x, boxes, y, s, np.random.default_rng(1))
    assert y_hat.shape == x.shape
    for k, v in terms.items():
        assert np.isfinite(v.item()) and v.item() > 0, k


def test_report_total_is_weighted_sum(data):
    state = TrainState(tiny())
    rep = train_step(state, *_batch(data)[:2], _batch(data)[2], np.random.default_rng(2))
    w = LossWeights()
    expected = (rep.gan_g + w.glob * rep.nce_global + w.ins * rep.nce_instance
                + w.style * rep.recon_style + w.img * rep.recon_img)
    assert abs(rep.total - expected) < 1e-10


def test_zero_instance_weight_drops_the_term(data):
    state = TrainState(tiny(weights=LossWeights(ins=0.0)))
    x, boxes, y = _batch(data)
    rep = train_step(state, x, boxes, y, np.random.default_rng(3))
    assert rep.nce_instance > 0
    rest = rep.gan_g + rep.nce_global + 10 * rep.recon_style + 5 * rep.recon_img
    assert abs(rep.total - rest) < 1e-10


def test_gradient_flow_audit_on_desk_model():
    state = TrainState(TrainConfig())
    a, b = make_domain("A", 2, 5), make_domain("B", 2, 5)
    x = Tensor(np.stack([s.image for s in a]))
    y = Tensor(np.stack([s.image for s in b]))
    boxes = [list(s.boxes) for s in a]
    assert all(boxes)
    train_step(state, x, boxes, y, np.random.default_rng(4))
    grads = {k: p.grad for k, p in state.g_named_parameters()}
    m = state.model
    groups = {
        "content_encoder": "model.content_encoder.",
        "style_encoder": "model.style_encoder.",
        "patch_embed": "model.aggregator.patch_embed.",
        "deconv": "model.aggregator.expand.",
        "generator": "model.generator.",
        "global_heads": "heads.global_heads.",
        "instance_head": "heads.instance_head.",
    }
    for i in range(len(m.aggregator.blocks)):
        groups[f"block{i}"] = f"model.aggregator.blocks.{i}."
        groups[f"style_to_params{i}"] = f"model.aggregator.blocks.{i}.style_"
    for label, prefix in groups.items():
        norm = sum(float(np.sum(g.astype(np.float64) ** 2)) for k, g in grads.items()
                   if k.startswith(prefix) and g is not None)
        assert norm > 0, label


def test_parameter_partition_and_cleared_disc_grads(data):
    state = TrainState(tiny())
    g_names = {k for k, _ in state.g_named_parameters()}
    d_names = {k for k, _ in state.d_named_parameters()}
    assert not g_names & d_names
    assert all(k.startswith(("model.", "heads.")) for k in g_names)
    assert all(k.startswith("disc.") for k in d_names)
    assert len(g_names) == len(list(state.model.parameters())) + len(list(state.heads.parameters()))
    x, boxes, y = _batch(data)
    before = {k: p.data.copy() for k, p in state.d_named_parameters()}
    train_step(state, x, boxes, y, np.random.default_rng(5))
    assert all(p.grad is None for _, p in state.d_named_parameters())
    assert any(not np.array_equal(before[k], p.data) for k, p in state.d_named_parameters())


def test_non_finite_loss_raises_with_terms(data):
    state = TrainState(tiny())
    # the style encoder is off the discriminator path, so only the generator side breaks
    state.model.style_encoder.proj.bias.data[...] = np.nan
    with pytest.raises(NonFiniteError, match=r"recon_style=nan"):
        train_step(state, *_batch(data)[:2], _batch(data)[2], np.random.default_rng(6))


def test_float32_state_stays_float32(data):
    state = TrainState(tiny(dtype="float32"))
    x, boxes, y = _batch(data)
    train_step(state, Tensor(x.data.astype(np.float32)), boxes, Tensor(y.data.astype(np.float32)),
               np.random.default_rng(7))
    assert all(p.dtype == np.float32 for _, p in state.g_named_parameters())
    assert all(m.dtype == np.float32 for m in state.opt_g.m.values())


# -- runs, checkpoints, resume -------------------------------------------------------------------

def test_same_seed_runs_bit_identical(data):
    _, r1 = train(tiny(), *data)
    _, r2 = train(tiny(), *data)
    assert [r.as_dict() for r in r1] == [r.as_dict() for r in r2]
    _, r3 = train(tiny(seed=1), *data)
    assert r3[0].as_dict() != r1[0].as_dict()


def test_checkpoint_round_trip(tmp_path, data):
    state, _ = train(tiny(steps=1), *data)
    save_state(tmp_path / "a.ifck", state)
    step, recs = load_checkpoint(tmp_path / "a.ifck")
    assert step == 1
    ref = state.records()
    assert set(recs) == set(ref)
    for k, v in ref.items():
        np.testing.assert_array_equal(recs[k], v)
    assert any(k.startswith("adam_g.m.") for k in recs) and any(k.startswith("adam_d.v.") for k in recs)
    assert not (tmp_path / "a.ifck.tmp").exists()


def test_checkpoint_format_header(tmp_path):
    save_checkpoint(tmp_path / "c.ifck", 7, {"w": np.arange(6.0).reshape(2, 3)})
    raw = (tmp_path / "c.ifck").read_bytes()
    assert raw[:4] == b"IFCK"
    assert int.from_bytes(raw[4:8], "little") == 1 and int.from_bytes(raw[8:16], "little") == 7
    step, recs = load_checkpoint(tmp_path / "c.ifck")
    np.testing.assert_array_equal(recs["w"], np.arange(6.0).reshape(2, 3))


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad.ifck").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(tmp_path / "bad.ifck")
    save_checkpoint(tmp_path / "t.ifck", 1, {"w": np.ones((4, 4))})
    raw = (tmp_path / "t.ifck").read_bytes()
    (tmp_path / "t.ifck").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="past end"):
        load_checkpoint(tmp_path / "t.ifck")
    (tmp_path / "v.ifck").write_bytes(b"IFCK" + (9).to_bytes(4, "little") + bytes(8))
    with pytest.raises(ValueError, match="version 9"):
        load_checkpoint(tmp_path / "v.ifck")


def test_checkpoint_architecture_mismatch(tmp_path, data):
    state = TrainState(tiny())
    save_state(tmp_path / "s.ifck", state)
    other = tiny(aggregator=AggregatorConfig(patch_stride=2, token_dim=16, blocks=2, heads=2, mlp_dim=32))
    with pytest.raises(ValueError, match="does not match"):
        load_state(tmp_path / "s.ifck", other)
    wider = tiny(aggregator=AggregatorConfig(patch_stride=2, token_dim=16, blocks=1, heads=2, mlp_dim=48))
    with pytest.raises(ValueError, match="shape mismatch"):
        load_state(tmp_path / "s.ifck", wider)


def test_resume_replays_bit_identically(tmp_path, data):
    full_state, full = train(tiny(), *data, out_dir=tmp_path / "full")
    assert (tmp_path / "full" / "ckpt_000002.ifck").exists()
    resumed_state, tail = train(tiny(), *data, out_dir=tmp_path / "full",
                                resume=tmp_path / "full" / "ckpt_000002.ifck")
    assert [r.as_dict() for r in tail] == [r.as_dict() for r in full[2:]]
    a, b = full_state.records(), resumed_state.records()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    with open(tmp_path / "full" / "metrics.csv") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == CSV_HEADER
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3]


def test_csv_rows_equal_steps_and_artifacts(tmp_path, data):
    train(tiny(steps=3, ckpt_every=0), *data, out_dir=tmp_path)
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.reader(f))
    assert len(rows) == 1 + 3
    assert (tmp_path / "run.json").exists() and (tmp_path / "final.ifck").exists()
    assert not list(tmp_path.glob("ckpt_*.ifck"))


def test_train_extends_by_steps(data):
    state, _ = train(tiny(), *data, steps=1)
    assert state.step == 1
    state, reps = train(tiny(), *data, state=state, steps=2)
    assert state.step == 3 and len(reps) == 2


def test_train_rejects_empty_dataset_dir(tmp_path, data):
    with pytest.raises(ValueError, match="empty"):
        train(tiny(), tmp_path, data[1])


def test_instance_loss_uses_boxes(data):
    state = TrainState(tiny())
    x, _, y = _batch(data)
    s = np.zeros((2, 4))
    no_boxes, _ = generator_terms(state, x, [[], []], y, s, np.random.default_rng(0))
    assert no_boxes["nce_instance"].item() == 0.0
    with_box, _ = generator_terms(state, x, [[BoundingBox(16, 16, 12, 12)], []], y, s,
                                  np.random.default_rng(0))
    assert with_box["nce_instance"].item() > 0


def test_non_finite_discriminator_loss_raises(data):
    state = TrainState(tiny())
    state.model.generator.conv3.bias.data[...] = np.nan
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError, match="discriminator"):
        train_step(state, *_batch(data)[:2], _batch(data)[2], np.random.default_rng(6))
