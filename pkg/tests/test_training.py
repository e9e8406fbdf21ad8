import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aat.autodiff import Tape, Tensor, backward
from aat.data import SyntheticTaskSpec, generate_dataset
from aat.errors import ContractError
from aat.peft import build_for_strategy, trainable_mask
from aat.training import (
    AdamState,
    TrainHistory,
    accuracy,
    adam_step,
    average_precision,
    bce_multilabel,
    cross_entropy,
    evaluate,
    mean_average_precision,
    train,
)
from aat.transformer import PRESETS

from conftest import finite_difference, max_rel_err, tape_gradients

LN4 = 1.3862943611198906
LN2 = 0.6931471805599453

TINY = PRESETS["tiny"]
TINY_TASK = SyntheticTaskSpec(num_classes=3, time=8, freq=8, cells=(2, 2), pattern_energy=3.0, noise_sigma=0.5, seed=0)


def test_cross_entropy_uniform():
    assert cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(LN4, abs=1e-15)


def test_cross_entropy_confident():
    logits = np.array([[50.0, 0.0, 0.0]])
    assert cross_entropy(Tensor(logits), [0]).item() == pytest.approx(2 * math.exp(-50.0), rel=1e-6)


def test_cross_entropy_matches_scalar_formula(rng):
    logits = rng.normal(size=(4, 5)) * 3
    labels = [0, 4, 2, 2]
    direct = np.mean([-(row[y] - math.log(sum(math.exp(v) for v in row))) for row, y in zip(logits, labels)])
    assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(direct, rel=1e-13)


def test_cross_entropy_gradient(rng):
    logits = rng.normal(size=(3, 4))
    labels = [1, 0, 3]
    (g,) = tape_gradients(lambda z: cross_entropy(z, labels), [logits])
    (n,) = finite_difference(lambda z: cross_entropy(Tensor(z), labels).item(), [logits])
    assert max_rel_err(g, n) < 1e-6


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0])


def test_bce_values(rng):
    assert bce_multilabel(Tensor(np.zeros((2, 3))), np.ones((2, 3))).item() == pytest.approx(LN2, abs=1e-15)
    assert bce_multilabel(Tensor(np.full((1, 2), 40.0)), np.ones((1, 2))).item() == pytest.approx(math.exp(-40.0), rel=1e-6)
    assert np.isfinite(bce_multilabel(Tensor(np.array([[1e4, -1e4]])), np.array([[0.0, 1.0]])).item())
    x = rng.normal(size=(2, 3)) * 4
    y = (rng.random((2, 3)) < 0.5).astype(float)
    direct = np.mean([-(t * math.log(1 / (1 + math.exp(-v))) + (1 - t) * math.log(1 - 1 / (1 + math.exp(-v))))
                      for v, t in zip(x.ravel(), y.ravel())])
    assert bce_multilabel(Tensor(x), y).item() == pytest.approx(direct, rel=1e-12)


def test_accuracy_ties_go_to_lowest_index():
    logits = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0], [3.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert accuracy(logits, [1, 1, 0, 2]) == 0.75


def test_average_precision_hand_case():
    scores = np.array([0.9, 0.8, 0.7, 0.1])
    targets = np.array([1, 0, 1, 0])
    assert average_precision(scores, targets) == pytest.approx(5 / 6, abs=1e-15)


def test_map_skips_classes_without_positives():
    scores = np.array([[0.9, 0.2, 0.1], [0.8, 0.7, 0.0], [0.7, 0.1, 0.5], [0.1, 0.3, 0.2]])
    targets = np.array([[1, 0, 0], [0, 0, 0], [1, 0, 0], [0, 0, 1]])
    assert mean_average_precision(scores, targets) == pytest.approx((5 / 6 + 1 / 2) / 2, abs=1e-15)
    with pytest.raises(ContractError):
        mean_average_precision(scores, np.zeros_like(targets))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_average_precision_bounds(seed):
    rng = np.random.default_rng(seed)
    targets = (rng.random(12) < 0.4).astype(int)
    targets[0] = 1
    scores = rng.normal(size=12)
    ap = average_precision(scores, targets)
    assert 0.0 < ap <= 1.0
    perfect = targets.astype(float) + 10.0 * targets
    assert average_precision(perfect, targets) == 1.0


def scalar_adam(ps, gs, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = [0.0] * len(ps)
    v = [0.0] * len(ps)
    out = list(ps)
    for t, g in enumerate(gs, start=1):
        for i in range(len(out)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            out[i] -= lr * (m[i] / (1 - b1**t)) / (math.sqrt(v[i] / (1 - b2**t)) + eps)
    return out


def test_adam_first_step_is_lr_times_sign():
    p = {"w": Tensor(np.array([1.0, 1.0, 1.0]))}
    adam_step(p, {"w": np.array([2.0, -3.0, 0.5])}, AdamState(lr=0.1), {"w"})
    np.testing.assert_allclose(p["w"].data, [0.9, 1.1, 0.9], atol=1e-8)


def test_adam_matches_scalar_reference(rng):
    start = rng.normal(size=3)
    grads = [rng.normal(size=3) for _ in range(4)]
    p = {"w": Tensor(start.copy())}
    state = AdamState(lr=0.05)
    for g in grads:
        adam_step(p, {"w": g}, state, {"w"})
    np.testing.assert_allclose(p["w"].data, scalar_adam(list(start), grads, 0.05), rtol=1e-13)


def test_adam_leaves_unmasked_untouched():
    p = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
    state = AdamState(lr=0.1)
    adam_step(p, {"a": np.ones(2), "b": np.ones(2)}, state, {"a"})
    np.testing.assert_array_equal(p["b"].data, 1.0)
    assert "b" not in state.m
    with pytest.raises(ContractError):
        adam_step(p, {"b": np.ones(2)}, state, {"a"})


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(TINY_TASK, 24, 12)


@pytest.mark.parametrize("strategy", ["Full", "Head", "Partial", "Prompt", "AatM", "AatMS"])
def test_frozen_params_stay_bitwise_identical(strategy, tiny_data):
    model = build_for_strategy(TINY, strategy)
    before = {n: p.data.copy() for n, p in model.named_parameters().items()}
    train(model, strategy, tiny_data[0], epochs=2, batch_size=8, lr=1e-2, clock=None)
    mask = trainable_mask(model, strategy)
    for name, p in model.named_parameters().items():
        if name in mask:
            assert np.any(p.data != before[name]), name
        else:
            np.testing.assert_array_equal(p.data, before[name])


def test_frozen_params_get_no_gradient_record(tiny_data):
    model = build_for_strategy(TINY, "Head")
    from aat.peft import apply_freeze
    from aat.training import batch_loss
    apply_freeze(model, trainable_mask(model, "Head"))
    with Tape() as tape:
        loss = batch_loss(model, tiny_data[0][:4])
    head = [p for n, p in model.named_parameters().items() if n.startswith("head.")]
    grads = backward(loss, tape, wrt=head)
    assert set(grads) == {p.node for p in head}
    # the backbone forward is not on the tape at all
    tags = [r.tag for r in tape.records]
    assert "gelu" not in tags and "softmax" not in tags
    assert tags[0] == "layernorm"


@pytest.mark.parametrize("strategy", ["Full", "Head", "Partial", "Prompt", "AatM", "AatMS", "Joint"])
def test_training_reduces_loss(strategy, tiny_data):
    model = build_for_strategy(TINY, strategy)
    hist = train(model, strategy, tiny_data[0], tiny_data[1], epochs=10, batch_size=8, lr=1e-2, clock=None)
    assert hist[-1].train_loss < hist[0].train_loss
    assert all(np.isfinite(r.train_loss) for r in hist.records)


def test_training_is_deterministic(tiny_data):
    runs = []
    for _ in range(2):
        model = build_for_strategy(TINY, "AatMS", adapter_seed=3)
        runs.append(train(model, "AatMS", tiny_data[0], tiny_data[1], epochs=3, batch_size=8, seed=5, clock=None).to_csv())
    assert runs[0] == runs[1]


def test_zero_epochs_gives_empty_history(tiny_data):
    model = build_for_strategy(TINY, "Head")
    before = model.state_dict()
    hist = train(model, "Head", tiny_data[0], epochs=0)
    assert len(hist) == 0
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_empty_training_set_is_rejected():
    with pytest.raises(ContractError):
        train(build_for_strategy(TINY, "Head"), "Head", [], epochs=1)


def test_history_csv_round_trip(tiny_data):
    model = build_for_strategy(TINY, "Head")
    hist = train(model, "Head", tiny_data[0], epochs=2, batch_size=8)
    text = hist.to_csv()
    assert text.splitlines()[0] == "epoch,train_loss,eval_metric,seconds,trainable_params"
    assert TrainHistory.from_csv(text).records == hist.records


def test_multilabel_training_reports_map():
    spec = SyntheticTaskSpec(num_classes=3, time=8, freq=8, cells=(2, 2), task_kind="multi-label", seed=1)
    tr, te = generate_dataset(spec, 24, 12)
    model = build_for_strategy(TINY, "Full")
    hist = train(model, "Full", tr, te, epochs=3, batch_size=8, lr=1e-2, clock=None)
    assert hist[-1].train_loss < hist[0].train_loss
    assert 0.0 < hist[-1].eval_metric <= 1.0
    assert evaluate(model, te) == hist[-1].eval_metric
