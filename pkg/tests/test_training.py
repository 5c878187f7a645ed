import math

import numpy as np
import pytest

import oracles
from fmri4d.autodiff import Parameter
from fmri4d.checks import micro_spec
from fmri4d.data import FmriRecord, SynthConfig, generate_synthetic
from fmri4d.models import VARIANTS, build
from fmri4d.tensor import Tensor
from fmri4d.training import (AdamState, CheckpointError, NonFiniteGradient, TrainConfig, adam_step,
                             checkpoint_load, checkpoint_save, evaluate_subjects, f1_and_accuracy, fit,
                             restore, use_best)


def _scalar(theta):
    return Parameter("theta", Tensor(np.array([theta], dtype=np.float64)))


# -- Adam ------------------------------------------------------------------------

def test_adam_zero_gradient():
    p, st = _scalar(1.5), AdamState()
    adam_step([p], {"theta": Tensor(np.zeros(1))}, st, lr=0.1)
    assert p.value.item() == 1.5 and st.m["theta"][0] == 0.0 and st.v["theta"][0] == 0.0 and st.step == 1


@pytest.mark.parametrize("g", [3.0, -0.02])
def test_adam_first_step_is_lr_sign(g):
    p = _scalar(0.0)
    adam_step([p], {"theta": Tensor(np.array([g]))}, AdamState(), lr=1e-3)
    assert abs(p.value.item() + 1e-3 * math.copysign(1, g)) < 1e-3 * 1e-8 / abs(g) + 1e-15


def test_adam_matches_scalar_reference():
    # loss = (theta - 3)^2, gradient 2 (theta - 3)
    p, st = _scalar(0.5), AdamState()
    got = []
    for _ in range(5):
        g = 2 * (p.value.item() - 3.0)
        adam_step([p], {"theta": Tensor(np.array([g]))}, st, lr=0.1)
        got.append(p.value.item())
    ref = oracles.scalar_adam(0.5, lambda t: 2 * (t - 3.0), 5, lr=0.1)
    assert max(abs(a - b) for a, b in zip(got, ref)) <= 1e-12
    # frozen from the scalar reference
    assert ref[-1] == pytest.approx(0.9977753507244175, abs=1e-13)


def test_adam_rejects_non_finite_and_leaves_params():
    a, b = _scalar(1.0), Parameter("b", Tensor(np.array([2.0])))
    st = AdamState()
    with pytest.raises(NonFiniteGradient, match="b"):
        adam_step([a, b], {"theta": Tensor(np.array([1.0])), "b": Tensor(np.array([np.nan]))}, st, lr=0.1)
    assert a.value.item() == 1.0 and st.step == 0


def test_adam_missing_or_misshapen_gradient():
    p = _scalar(0.0)
    with pytest.raises(KeyError):
        adam_step([p], {}, AdamState(), lr=0.1)
    with pytest.raises(ValueError, match="shape"):
        adam_step([p], {"theta": Tensor(np.zeros(2))}, AdamState(), lr=0.1)


# -- metrics -------------------------------------------------------------------------

def test_metrics_examples():
    assert f1_and_accuracy([1, 0, 1], [1, 0, 1]).f1 == 1.0
    assert f1_and_accuracy([0, 1], [1, 0]).f1 == 0.0
    r = f1_and_accuracy([1, 1, 1, 0, 0, 0], [1, 1, 0, 1, 0, 0])
    assert (r.tp, r.fp, r.fn, r.tn) == (2, 1, 1, 2)
    assert r.accuracy == pytest.approx(4 / 6) and r.f1 == pytest.approx(2 / 3)
    assert f1_and_accuracy([0, 0], [0, 0]).f1 == 0.0
    with pytest.raises(ValueError):
        f1_and_accuracy([0, 2], [0, 1])
    with pytest.raises(ValueError):
        f1_and_accuracy([0], [0, 1])


def test_metrics_line_format():
    line = f1_and_accuracy([1, 0], [1, 1]).line(split="test")
    fields = dict(kv.split("=") for kv in line.split())
    assert fields["split"] == "test" and fields["accuracy"] == "0.500000" and fields["subjects"] == "2"


class FixedProbModel:
    """Stand-in model whose softmax output is a per-crop p(ASD) read from the first voxel."""

    def logits(self, crops, mode="eval"):
        p = crops.data[:, 0, 0, 0, 0, 0].astype(np.float64)
        return Tensor(np.stack([np.log1p(-p), np.log(p)], axis=1))


def _prob_record(sid, label, probs):
    img = np.repeat(np.asarray(probs, np.float64), 15).reshape(1, 1, 1, 1, 1, -1)
    return FmriRecord(sid, Tensor(img), label, "test")


def test_evaluate_averages_probabilities():
    model = FixedProbModel()
    r = evaluate_subjects(model, [_prob_record("a", 1, [0.8, 0.8, 0.8])], 15, 15)
    assert r.probabilities["a"] == pytest.approx(0.8) and r.crops == 3
    r = evaluate_subjects(model, [_prob_record("b", 1, [0.4, 0.8])], 15, 15)
    assert r.probabilities["b"] == pytest.approx(0.6) and r.tp == 1
    recs = [_prob_record("c", 0, [0.1, 0.3]), _prob_record("d", 1, [0.9, 0.7])]
    r = evaluate_subjects(model, recs, 15, 15)
    assert r.accuracy == 1.0 and r.f1 == 1.0
    assert r.loss == pytest.approx(-(math.log(0.8) + math.log(0.8)) / 2)


def test_evaluate_tie_goes_to_control():
    r = evaluate_subjects(FixedProbModel(), [_prob_record("a", 1, [0.5])], 15, 15)
    assert r.fn == 1


def test_evaluate_is_order_invariant():
    model = FixedProbModel()
    recs = [_prob_record(f"s{i}", i % 2, np.random.default_rng(i).uniform(0.05, 0.95, 4)) for i in range(6)]
    a = evaluate_subjects(model, recs, 15, 15)
    b = evaluate_subjects(model, recs[::-1], 15, 15)
    assert a.probabilities == pytest.approx(b.probabilities) and (a.accuracy, a.f1) == (b.accuracy, b.f1)


# -- training loop ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    cfg = SynthConfig(train_per_class=10, val_per_class=1, test_per_class=1, shape=(6, 6, 6, 8),
                      amplitude=3.0, seed=3)
    manifest, _ = generate_synthetic(cfg, tmp_path_factory.mktemp("tiny"))
    return manifest


def _cfg(**kw):
    base = dict(epochs=1, batch_size=10, lr=1e-3, val_interval=1, crop_length=3, eval_stride=3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_one_epoch_twenty_subjects_two_steps(tiny):
    model = build(micro_spec("CNN3D-TC"))
    state = fit(model, tiny.load("train"), tiny.load("val"), _cfg())
    assert state.step == 2 and state.epoch == 1
    assert [l.split()[:2] for l in state.log] == [["epoch=1", "split=train"], ["epoch=1", "split=val"]]


def test_log_line_fields(tiny):
    model = build(micro_spec("CNN3D-MS"))
    state = fit(model, tiny.load("train"), tiny.load("val"), _cfg(epochs=4, val_interval=2))
    splits = [dict(kv.split("=") for kv in l.split())["split"] for l in state.log]
    assert splits == ["train", "train", "val", "train", "train", "val"]
    for line in state.log:
        f = dict(kv.split("=") for kv in line.split())
        assert set(f) == {"epoch", "split", "loss", "accuracy", "f1"}
        assert 0 <= float(f["accuracy"]) <= 1 and 0 <= float(f["f1"]) <= 1 and float(f["loss"]) >= 0


def test_best_snapshot_dominates_logged_val(tiny):
    model = build(micro_spec("CNN3D-MS"))
    state = fit(model, tiny.load("train"), tiny.load("val"), _cfg(epochs=6, val_interval=1))
    vals = [float(dict(kv.split("=") for kv in l.split())["f1"]) for l in state.log if "split=val" in l]
    # log lines carry six decimals; the first epoch reaching the max is kept
    assert state.best_metric == pytest.approx(max(vals), abs=1e-6)
    assert vals.index(max(vals)) == state.best_epoch - 1
    use_best(model, state)
    assert all(model.state_dict()[k] == v for k, v in state.best_params.items())


def test_fit_is_deterministic_in_64_bit(tiny):
    logs = []
    for _ in range(2):
        model = build(micro_spec("convGRU-CNN3D"), np.float64)
        logs.append(fit(model, tiny.load("train"), tiny.load("val"), _cfg(epochs=2)).log)
    assert logs[0] == logs[1]


def test_fit_validates_inputs(tiny):
    model = build(micro_spec("CNN3D-TC"))
    with pytest.raises(ValueError, match="crop"):
        fit(model, tiny.load("train"), tiny.load("val"), _cfg(crop_length=4))
    with pytest.raises(ValueError, match="empty"):
        fit(model, [], tiny.load("val"), _cfg())
    with pytest.raises(ValueError):
        TrainConfig(epochs=2, val_interval=5)
    with pytest.raises(ValueError):
        TrainConfig(selection_metric="auc")


def test_evaluate_does_not_mutate_model(tiny):
    model = build(micro_spec("CNN4D"))
    before = dict(model.state_dict())
    evaluate_subjects(model, tiny.load("train"), 3, 3)
    assert all(model.state_dict()[k] is before[k] for k in before)


@pytest.mark.slow
@pytest.mark.parametrize("variant", VARIANTS)
def test_loss_drops_below_ln2_within_50_epochs(tiny, variant):
    model = build(micro_spec(variant))
    train = tiny.load("train")
    fit(model, train, tiny.load("val"), _cfg(epochs=50, val_interval=25))
    assert evaluate_subjects(model, train, 3, 3).loss < math.log(2)


# -- checkpoints -------------------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj.tolist() if isinstance(obj, np.ndarray) else obj


def test_checkpoint_round_trip(tiny, tmp_path):
    model = build(micro_spec("CNN4D"), np.float64)
    cfg = _cfg(epochs=2)
    state = fit(model, tiny.load("train"), tiny.load("val"), cfg)
    checkpoint_save(model, state, tmp_path / "c.ckpt", cfg)
    ck = checkpoint_load(tmp_path / "c.ckpt")
    assert ck.spec == model.spec and ck.dtype == np.float64 and ck.config == cfg
    assert all(ck.params[k].data.tobytes() == v.data.tobytes() for k, v in model.state_dict().items())
    assert ck.state.step == state.step and ck.state.log == state.log and ck.state.epoch == 2
    assert all(np.array_equal(ck.state.adam.m[k], state.adam.m[k]) for k in state.adam.m)
    assert _plain(ck.state.rng_state) == _plain(state.rng_state)
    fresh = build(micro_spec("CNN4D"), np.float64)
    restore(fresh, ck)
    assert all(fresh.state_dict()[k] == v for k, v in model.state_dict().items())


def test_resume_reproduces_uninterrupted_run(tiny, tmp_path):
    tr, va = tiny.load("train"), tiny.load("val")
    full = fit(build(micro_spec("CNN3D-TC"), np.float64), tr, va, _cfg(epochs=10, val_interval=5))
    half_model = build(micro_spec("CNN3D-TC"), np.float64)
    half = fit(half_model, tr, va, _cfg(epochs=5, val_interval=5))
    checkpoint_save(half_model, half, tmp_path / "half.ckpt")
    resumed_model = build(micro_spec("CNN3D-TC"), np.float64)
    state = restore(resumed_model, checkpoint_load(tmp_path / "half.ckpt"))
    resumed = fit(resumed_model, tr, va, _cfg(epochs=10, val_interval=5), state)
    assert resumed.log == full.log and resumed.step == full.step


def test_restore_rejects_other_spec(tiny, tmp_path):
    model = build(micro_spec("CNN3D-MS"))
    checkpoint_save(model, fit(model, tiny.load("train"), tiny.load("val"), _cfg()), tmp_path / "c.ckpt")
    other = build(micro_spec("CNN3D-MS", growth_rate=3))
    with pytest.raises(CheckpointError, match="growth_rate"):
        restore(other, checkpoint_load(tmp_path / "c.ckpt"))


def test_restore_lists_bad_tensor_names(tmp_path):
    model = build(micro_spec("CNN3D-MS"))
    checkpoint_save(model, fit_state(), tmp_path / "c.ckpt")
    ck = checkpoint_load(tmp_path / "c.ckpt")
    ck.params["head.fc.bias"] = Tensor(np.zeros(3, np.float32))
    with pytest.raises(CheckpointError, match="head.fc.bias"):
        restore(model, ck)


def fit_state():
    from fmri4d.training import TrainState
    return TrainState()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        checkpoint_load(p)
