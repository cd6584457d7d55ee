import itertools

import numpy as np
import pytest

from fcan import checkpoint
from fcan import tensor as tn
from fcan.classifier import (StepScores, average_scores, build_model, classify_part, model_from_state,
                             predict)
from fcan.features import GlimpseLocation
from fcan.gradcheck import grad_check
from fcan.rng import Rng
from fcan.tensor import ShapeError, Tensor


@pytest.fixture
def model(rng):
    m = build_model(rng, 5, (32, 32), (16, 16), 1, (4, 8), ((2, 2), (3, 3)), hidden=8)
    for h in m.heads:
        h.conv2.kernels.data *= 100.0
    return m


def zero(clf):
    clf.head.kernels.data[:] = 0.0
    clf.head.bias.data[:] = 0.0


def test_zero_weight_classifier_is_uniform(model, rng):
    clf = model.parts[0]
    zero(clf)
    p = classify_part(rng.random((1, 16, 16)), clf).data
    np.testing.assert_allclose(p, 1 / 5, atol=1e-15)


def test_probabilities_sum_to_one(model, rng):
    for _ in range(5):
        p = classify_part(rng.random((1, 16, 16)) * 10, model.parts[1]).data
        assert abs(p.sum() - 1) < 1e-6 and np.all(p > 0)


def test_size_mismatch_rejected(model):
    with pytest.raises(ShapeError, match="expects"):
        classify_part(np.zeros((1, 12, 16)), model.parts[0])


def test_classify_part_gradcheck(model, rng):
    clf = model.parts[0]
    for layer in clf.stack.layers:
        layer.bias.data = rng.normal(layer.bias.shape, 0.1)
    patch = Tensor(rng.random((1, 16, 16)))

    def fn():
        return tn.scale(tn.log(tn.take(classify_part(patch, clf), (np.array([3]),))), -1.0)
    assert grad_check(fn, clf.tensors, max_coords=24) < 1e-4


def test_average_scores_examples(rng):
    s = np.array([0.2, 0.8])
    assert np.array_equal(average_scores([s]), s)
    np.testing.assert_allclose(average_scores([[1.0, 0.0], [0.0, 1.0]]), [0.5, 0.5])
    vs = [rng.random(4) for _ in range(3)]
    vs = [v / v.sum() for v in vs]
    expected = [sum(v[i] for v in vs) / 3 for i in range(4)]
    np.testing.assert_allclose(average_scores(vs), expected, atol=1e-15)
    with pytest.raises(ValueError):
        average_scores([])


def test_step_scores_invariants(rng):
    vs = [rng.random(6) for _ in range(4)]
    vs = [v / v.sum() for v in vs]
    st = StepScores.from_scores(vs)
    for t, avg in enumerate(st.averages, start=1):
        assert np.max(np.abs(avg - np.mean(vs[:t], axis=0))) < 1e-9
        assert abs(avg.sum() - 1) < 1e-6
    assert np.array_equal(st.final, st.averages[-1])


def test_average_is_order_invariant(rng):
    vs = [rng.random(5) for _ in range(3)]
    ref = average_scores(vs)
    for perm in itertools.permutations(vs):
        assert np.argmax(average_scores(list(perm))) == np.argmax(ref)
        np.testing.assert_allclose(average_scores(list(perm)), ref, atol=1e-15)


def test_uniform_term_keeps_argmax(rng):
    for _ in range(50):
        vs = [rng.random(4) for _ in range(2)]
        vs = [v / v.sum() for v in vs]
        base = average_scores(vs)
        if np.sort(base)[-1] == np.sort(base)[-2]:
            continue
        assert np.argmax(average_scores(vs + [np.full(4, 0.25)])) == np.argmax(base)


def test_uniform_parts_defer_to_image_classifier(model, rng):
    for part in model.parts:
        zero(part)
    img = rng.random((1, 32, 32))
    label, steps, locs = predict(img, model)
    assert label == int(np.argmax(steps.scores[0]))
    assert len(steps.scores) == 3 and len(locs) == 2


def test_t0_is_plain_classification(rng):
    m = build_model(rng, 4, (32, 32), (16, 16), 1, (4, 8), (), hidden=8)
    img = rng.random((1, 32, 32))
    label, steps, locs = predict(img, m)
    fmap = m.backbone.forward(Tensor(img))
    logits = tn.linear(tn.global_avg_pool(fmap), m.image_clf.head).data
    assert label == int(np.argmax(logits)) and locs == []
    np.testing.assert_allclose(steps.final, tn.softmax(Tensor(logits)).data)


def test_predict_deterministic_and_overridable(model, rng):
    img = rng.random((1, 32, 32))
    a = predict(img, model)
    b = predict(img, model)
    assert a[0] == b[0] and a[2] == b[2]
    assert all(np.array_equal(x, y) for x, y in zip(a[1].scores, b[1].scores))
    forced = [GlimpseLocation(1, 0, 0), GlimpseLocation(2, 3, 3)]
    assert predict(img, model, forced)[2] == forced


def test_checkpoint_names_and_rebuild(model, rng, tmp_path):
    state = model.state()
    assert {"clf.image.head.w", "clf.part.1.head.w", "attn.2.conv1.w", "backbone.0.w"} <= set(state)
    path = tmp_path / "m.fcan"
    checkpoint.save(path, state)
    back = model_from_state(checkpoint.load(path))
    assert back.T == 2 and back.num_classes == 5 and back.part_size == (16, 16)
    img = rng.random((1, 32, 32))
    assert predict(img, back)[0] == predict(img, model)[0]
    assert checkpoint.dumps(back.state()) == checkpoint.dumps(state)


def test_class_count_mismatch_rejected(model):
    other = build_model(Rng(1), 7, (32, 32), (16, 16), 1, (4, 8), ((2, 2), (3, 3)), hidden=8)
    with pytest.raises(ValueError, match="classes"):
        other.load_state(model.state())
