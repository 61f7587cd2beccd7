import numpy as np
import pytest

from fairgen.errors import ConfigError, NumericalError, SamplingError
from fairgen.groups import GroupKey
from fairgen.model import ClassifierModel, ModelSpec, load_checkpoint, save_checkpoint
from fairgen.training import (GDROConfig, TrainConfig, Trajectory, combine_real_synthetic, erm_baseline, gdro_baseline,
                              gdro_finetune, new_model, single_stage, stage1_pretrain, stage2_finetune)

FAST = TrainConfig(epochs=2, learning_rate=0.01, batch_size=32)


def test_backward_matches_finite_differences():
    m = ClassifierModel(ModelSpec(12, 3, hidden=5, feature_dim=4), seed=0)
    rng = np.random.default_rng(0)
    x = rng.random((6, 12))
    w_l, w_f = rng.normal(size=(6, 3)), rng.normal(size=(6, 4))

    def loss():
        logits, feats, _ = m.forward(x)
        return float((logits * w_l).sum() + (feats * w_f).sum())

    _, _, cache = m.forward(x)
    grads = m.backward(cache, w_l, w_f)
    for name, g in grads.items():
        p = m.params[name]
        idx = tuple(rng.integers(0, s) for s in p.shape)
        old = p[idx]
        p[idx] = old + 1e-6
        up = loss()
        p[idx] = old - 1e-6
        down = loss()
        p[idx] = old
        assert g[idx] == pytest.approx((up - down) / 2e-6, rel=1e-4, abs=1e-7)


def test_checkpoint_round_trip(tmp_path):
    m = ClassifierModel(ModelSpec(12, 2), seed=3)
    m.freeze("encoder")
    save_checkpoint(m, tmp_path / "m", {"seed": 3})
    back = load_checkpoint(tmp_path / "m")
    assert back.encoder_hash() == m.encoder_hash() and back.head_hash() == m.head_hash()
    assert back.frozen == {"encoder"}
    x = np.random.default_rng(0).random((4, 12))
    assert np.array_equal(back.predict(x), m.predict(x))


@pytest.fixture(scope="module")
def pretrained(small_toy):
    train = small_toy.split("train")
    return stage1_pretrain(new_model(train, FAST), train, FAST), train


def test_freeze_contract(pretrained):
    model, train = pretrained
    before = model.encoder_hash()
    for variant in ("LLR_all", "LLR_b"):
        out = stage2_finetune(model, train, variant, FAST)
        assert out.encoder_hash() == before
        assert out.head_hash() != model.head_hash()
    assert stage2_finetune(model, train, "FT_b", FAST).encoder_hash() != before
    assert model.encoder_hash() == before  # input model untouched


def test_unknown_variant(pretrained):
    with pytest.raises(ConfigError):
        stage2_finetune(pretrained[0], pretrained[1], "LLR_x", FAST)


def test_trajectory_written(pretrained, tmp_path):
    model, train = pretrained
    traj = Trajectory()
    stage2_finetune(model, train, "LLR_all", FAST, traj)
    assert [r["epoch"] for r in traj.rows] == [1, 2]
    text = traj.to_csv(tmp_path / "t.csv").read_text().splitlines()
    assert text[0] == "epoch,ce,supcon,total" and len(text) == 3


def test_divergence_raises_numerical_error(small_toy):
    train = small_toy.split("train")
    cfg = TrainConfig(epochs=3, learning_rate=1e6, batch_size=32)
    with pytest.raises(NumericalError) as exc:
        erm_baseline(train, cfg)
    assert exc.value.trajectory


def test_training_is_deterministic(small_toy):
    train = small_toy.split("train")
    a, b = erm_baseline(train, FAST), erm_baseline(train, FAST)
    assert a.encoder_hash() == b.encoder_hash() and a.head_hash() == b.head_hash()


def test_gdro_weights_favour_the_minority(small_toy):
    train = small_toy.split("train")
    m = gdro_baseline(train, TrainConfig(epochs=3, learning_rate=0.05, batch_size=32), GDROConfig(eta=0.1))
    w = m.gdro_weights
    assert sum(w.values()) == pytest.approx(1.0)
    assert max(w, key=w.get) in ("cross|warm", "square|cool")


def test_gdro_finetune_can_freeze(pretrained):
    model, train = pretrained
    out = gdro_finetune(model, train, FAST, freeze_encoder=True)
    assert out.encoder_hash() == model.encoder_hash()


def test_gdro_rejects_bad_initial_weights(small_toy):
    with pytest.raises(ConfigError):
        gdro_baseline(small_toy.split("train"), FAST, GDROConfig(initial_weights={"cross|cool": 0.0}))


def test_balanced_combination_rule(small_toy):
    train = small_toy.split("train")  # 180/20 per class
    synth = small_toy.split("test")  # 20 per group, any labelled set works here
    mixed = combine_real_synthetic(train, synth, True, seed=0)
    sizes = mixed.group_sizes()
    # T = min over groups of real + synthetic = 20 + 20
    assert set(sizes.values()) == {40}
    minority = [it for it in mixed.items if it.group == GroupKey("square", "cool")]
    assert sum(it.split == "train" for it in minority) == 20
    majority = [it for it in mixed.items if it.group == GroupKey("square", "warm")]
    assert all(it.split == "train" for it in majority)
    assert len(combine_real_synthetic(train, synth, False, 0)) == len(train) + len(synth)


def test_balanced_combination_needs_every_group(small_toy):
    train = small_toy.split("train")
    only = train.derive([it for it in train.items if it.group != GroupKey("square", "cool")])
    with pytest.raises(SamplingError):
        combine_real_synthetic(only, only.derive([]), True, 0)


def test_single_stage_runs(small_toy):
    m = single_stage(small_toy.split("train"), small_toy.split("val"), FAST, balanced=True)
    assert m.predict(small_toy.split("test").images()).shape == (80,)


@pytest.mark.parametrize("kw", [dict(beta=2), dict(tau=0), dict(epochs=-1), dict(learning_rate=0)])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)
