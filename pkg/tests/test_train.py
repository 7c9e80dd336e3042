import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crackmamba.errors import InvalidArgument
from crackmamba.model import PRETRAINED_TAG, ModelConfig, ModelOutput, build
from crackmamba.nn import Tensor, default_dtype
from crackmamba.nn.layers import Parameter
from crackmamba.train import (AdamW, SegMetrics, TrainConfig, adamw_step, compute_metrics,
                              cosine_lr, deep_supervision_loss, dice_ce_loss, fit, freeze_policy)


@pytest.fixture(autouse=True)
def f64():
    with default_dtype("float64"):
        yield


def logits_for(mask, scale):
    """Two-class logits that favour ``mask`` with margin ``2*scale``."""
    m = np.asarray(mask, dtype=np.float64)
    return Tensor(np.stack([scale * (1 - 2 * m), scale * (2 * m - 1)], axis=1))


# ---------------------------------------------------------------- dice + CE

def test_uniform_logits_closed_form():
    target = np.array([[[0, 1], [1, 0]], [[1, 1], [0, 0]]])
    loss = dice_ce_loss(Tensor(np.zeros((2, 2, 2, 2))), target).item()
    # CE = ln 2; each class: (2*0.5*4 + eps)/(4 + 4 + eps) -> Dice loss ~ 0.5
    eps = 1e-5
    dice = 1 - (4 + eps) / (8 + eps)
    assert abs(loss - (math.log(2) + dice)) < 1e-12
    ce_only = loss - dice
    assert abs(ce_only - math.log(2)) < 1e-9


def test_strong_correct_logits_vanish():
    target = np.random.default_rng(0).integers(0, 2, size=(2, 4, 4))
    assert dice_ce_loss(logits_for(target, 20.0), target).item() < 1e-4


def test_random_case_against_scalar_evaluation():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(1, 2, 2, 2))
    target = np.array([[[1, 0], [0, 1]]])
    got = dice_ce_loss(Tensor(logits), target).item()

    ce, inter, psum, gsum = 0.0, [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]
    for i in range(2):
        for j in range(2):
            a, b = logits[0, 0, i, j], logits[0, 1, i, j]
            z = math.log(math.exp(a) + math.exp(b))
            probs = (math.exp(a - z), math.exp(b - z))
            t = target[0, i, j]
            ce -= (a, b)[t] - z
            for c in range(2):
                inter[c] += probs[c] * (t == c)
                psum[c] += probs[c]
                gsum[c] += t == c
    want = ce / 4 + 1 - sum((2 * inter[c] + 1e-5) / (psum[c] + gsum[c] + 1e-5) for c in range(2)) / 2
    assert abs(got - want) < 1e-12


def test_target_outside_binary_rejected():
    with pytest.raises(InvalidArgument):
        dice_ce_loss(Tensor(np.zeros((1, 2, 2, 2))), np.array([[[0, 2], [1, 0]]]))


# ---------------------------------------------------------------- deep supervision

def _output(target, scales):
    """A ModelOutput whose heads are ``scales[k] * correct`` logits, full first."""
    heads = []
    for f, s in zip((1, 2, 4, 8), scales):
        heads.append(logits_for(target[:, ::f, ::f], s))
    return ModelOutput(heads[0], heads[:0:-1])


def test_deep_supervision_cases():
    target = np.random.default_rng(1).integers(0, 2, size=(2, 16, 16))
    assert deep_supervision_loss(_output(target, [30] * 4), target).item() < 1e-4
    out = _output(target, [0.3, 30, 30, 30])
    full = dice_ce_loss(out.logits_full, target).item()
    assert abs(deep_supervision_loss(out, target).item() - 8 / 15 * full) < 1e-6
    # three imperfect scales against the hand sum
    out = _output(target, [0.3, 0.5, -0.2, 30])
    want = sum(w * dice_ce_loss(h, target[:, ::f, ::f]).item()
               for w, h, f in zip((8 / 15, 4 / 15, 2 / 15), [out.logits_full] + out.aux_logits[::-1], (1, 2, 4)))
    want += 1 / 15 * dice_ce_loss(out.aux_logits[0], target[:, ::8, ::8]).item()
    assert abs(deep_supervision_loss(out, target).item() - want) < 1e-12


# ---------------------------------------------------------------- AdamW

def test_adamw_trivial_cases():
    p = np.array([1.5])
    adamw_step(p, np.zeros(1), {}, lr=0.1, weight_decay=0.0)
    assert p[0] == 1.5
    p = np.array([2.0])
    adamw_step(p, np.ones(1), {}, lr=0.1, weight_decay=0.0)
    assert abs((p[0] - 2.0) - (-0.1)) < 1e-8


def test_adamw_three_step_trace():
    lr, wd, b1, b2, eps = 0.01, 0.05, 0.9, 0.999, 1e-8
    grads = [0.5, -1.2, 0.3]
    p, m, v = 1.0, 0.0, 0.0
    trace = []
    for t, g in enumerate(grads, 1):
        p = p - lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        trace.append(p)
    # step 1 by hand: 1 - 0.01*0.05 = 0.9995, m_hat/sqrt(v_hat) = 1 -> 0.9895
    frozen = [0.9895000002000001, 0.9932986647842411, 0.9945985359573675]
    assert max(abs(a - b) for a, b in zip(trace, frozen)) < 1e-12

    arr, state = np.array([1.0]), {}
    for g, want in zip(grads, trace):
        adamw_step(arr, np.array([g]), state, lr, wd, (b1, b2), eps)
        assert abs(arr[0] - want) < 1e-12


def test_adamw_without_decay_is_adam_bitwise():
    rng = np.random.default_rng(3)
    p = rng.normal(size=5)
    ref = p.copy()
    m, v, state = np.zeros(5), np.zeros(5), {}
    for t in range(1, 11):
        g = rng.normal(size=5)
        adamw_step(p, g, state, 0.01, weight_decay=0.0)
        m = 0.9 * m + (1 - 0.9) * g
        v = 0.999 * v + (1 - 0.999) * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.array_equal(p, ref)


def test_frozen_parameters_untouched():
    a, b = Parameter(np.ones(3)), Parameter(np.ones(3))
    a.frozen = True
    a.grad = b.grad = np.full(3, 0.7)
    opt = AdamW([a, b])
    before = a.data.copy()
    opt.step(0.1)
    assert np.array_equal(a.data, before) and not np.array_equal(b.data, before)


# ---------------------------------------------------------------- schedule and freeze

def test_cosine_lr():
    assert cosine_lr(0, 100, 1e-4) == 1e-4
    assert abs(cosine_lr(50, 100, 1e-4) - 5e-5) < 1e-20
    assert cosine_lr(99, 100, 1e-4) == 0.5 * 1e-4 * (1 + math.cos(math.pi * 99 / 100))
    for bad in (-1, 100):
        with pytest.raises(InvalidArgument):
            cosine_lr(bad, 100, 1e-4)


def test_freeze_policy_window():
    m = build(ModelConfig(stage_dims=(4, 4, 4, 4), input_size=32), 0)
    tagged = [p for p in m.parameters() if PRETRAINED_TAG in p.tags]
    freeze_policy(0, m, 10)
    assert tagged and all(p.frozen for p in tagged)
    assert not any(p.frozen for p in m.parameters() if PRETRAINED_TAG not in p.tags)
    freeze_policy(9, m, 10)
    assert all(p.frozen for p in tagged)
    freeze_policy(10, m, 10)
    assert not any(p.frozen for p in m.parameters())


def test_config_validation():
    with pytest.raises(InvalidArgument, match="lr0"):
        TrainConfig(lr0=0).validate()
    with pytest.raises(InvalidArgument, match="ds_weights"):
        TrainConfig(ds_weights=(0.5, 0.5, 0.5, 0.5)).validate()
    cfg = TrainConfig.from_mapping({"lr0": "3e-4", "ds_weights": "0.25,0.25,0.25,0.25", "epochs": "7"})
    assert (cfg.lr0, cfg.epochs, cfg.ds_weights) == (3e-4, 7, (0.25,) * 4)
    with pytest.raises(InvalidArgument):
        TrainConfig.from_mapping({"momentum": "0.9"})


# ---------------------------------------------------------------- metrics

def test_metric_examples():
    perfect = compute_metrics(np.array([[1, 0], [0, 1]]), np.array([[1, 0], [0, 1]]))
    assert perfect.miou == 1.0 and perfect.f1 == 1.0
    m = compute_metrics(np.array([1, 1, 0, 0]).reshape(2, 2), np.array([1, 0, 1, 0]).reshape(2, 2))
    assert (m.tp, m.fp, m.fn, m.tn) == (1, 1, 1, 1)
    assert m.iou == [1 / 3, 1 / 3] and m.miou == 1 / 3 and m.f1 == 0.5 and m.sensitivity == 0.5
    empty = compute_metrics(np.zeros((3, 3)), np.zeros((3, 3)))
    assert empty.miou == 1.0 and empty.f1 == 1.0
    with pytest.raises(InvalidArgument):
        compute_metrics(np.zeros((2, 2)), np.zeros((2, 3)))


masks = st.integers(1, 6).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 1), min_size=n * n, max_size=n * n),
    st.lists(st.integers(0, 1), min_size=n * n, max_size=n * n)))


@settings(max_examples=100, deadline=None)
@given(masks)
def test_metric_symmetry_and_ranges(pair):
    a, b = (np.array(v) for v in pair)
    m, s = compute_metrics(a, b), compute_metrics(b, a)
    assert m.pixels == a.size
    assert m.f1 == s.f1 and m.iou == s.iou
    for val in m.iou + [m.miou, m.f1, m.sensitivity]:
        assert 0.0 <= val <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(masks, min_size=1, max_size=4))
def test_metric_merge_matches_pooled(pairs):
    parts = [compute_metrics(np.array(a), np.array(b)) for a, b in pairs]
    total = SegMetrics()
    for p in parts:
        total = total.merge(p)
    pooled = compute_metrics(np.concatenate([np.array(a) for a, _ in pairs]),
                             np.concatenate([np.array(b) for _, b in pairs]))
    assert total == pooled


# ---------------------------------------------------------------- loop

def test_fit_log_format_and_repeatability():
    cfg = ModelConfig(stage_dims=(4, 4, 4, 4), input_size=32, dtype="float32")
    rng = np.random.default_rng(0)
    x = rng.random((3, 3, 32, 32)).astype(np.float32)
    y = (rng.random((3, 32, 32)) > 0.8).astype(np.uint8)
    logs = []
    for _ in range(2):
        buf = io.StringIO()
        res = fit(build(cfg, 1), x, y, TrainConfig(epochs=2, batch_size=2, lr0=1e-3), log=buf, echo=None)
        logs.append(buf.getvalue())
    assert logs[0] == logs[1]
    lines = logs[0].splitlines()
    assert len(lines) == 2 and all(len(line.split("\t")) == 5 for line in lines)
    assert lines[0].startswith("0\t1.000000e-03\t")
    assert res.best_epoch in (0, 1)
