import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from forgekey.config import TrainConfig
from forgekey.datagen import SyntheticSpec, generate, sample_forget
from forgekey.errors import (
    DegenerateFeaturesError,
    EmptyInputError,
    NoViableCandidateError,
    StaleSampleError,
    UnknownIdError,
)
from forgekey.harness import (
    CandidateRecord,
    MetricsReport,
    Splits,
    accuracy,
    auroc,
    avg_gap,
    evaluate_unlearning,
    fit_attacker,
    knn_baseline,
    measure_pathway_accuracies,
    mia_auroc,
    mia_features,
    retrain_oracle,
    select_model,
    sensitivity_score,
)
from forgekey.inference import FusionStrategy, predict
from forgekey.membank import ExemplarMemory, delete
from forgekey.trainer import init_model
from tests_support import tiny_model


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 100.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([1, 1, 1, 0], [1, 1, 1, 1]) == 75.0
    with pytest.raises(EmptyInputError):
        accuracy([], [])


def test_mia_feature_examples():
    f = mia_features(np.zeros(4), 2)
    assert np.allclose(f, (math.log(4), math.log(4), 0.25, 0.0))
    f = mia_features(np.array([60.0, 0, 0]), 0)
    assert np.allclose(f, (0, 0, 1, 1), atol=1e-9)
    f = mia_features(np.log([0.8, 0.2]), 0)
    assert np.allclose(f, (0.22314, 0.50040, 0.8, 0.6), atol=1e-5)
    with pytest.raises(IndexError):
        mia_features(np.zeros(3), 3)


def test_attacker_separable_and_deterministic(rng):
    members = np.column_stack([rng.normal(3, 0.3, 200), rng.normal(size=(200, 3))])
    non = np.column_stack([rng.normal(-3, 0.3, 200), rng.normal(size=(200, 3))])
    att = fit_attacker(members, non, seed=0)
    acc = np.mean(np.concatenate([att.scores(members) > 0.5, att.scores(non) <= 0.5]))
    assert acc > 0.99
    again = fit_attacker(members, non, seed=0)
    assert np.array_equal(att.weights, again.weights) and att.bias == again.bias


def test_attacker_indistinguishable_sets(rng):
    pool = rng.normal(size=(400, 4))
    att = fit_attacker(pool, pool, seed=1)
    held_a, held_b = rng.normal(size=(400, 4)), rng.normal(size=(400, 4))
    assert abs(mia_auroc(att, held_a, held_b) - 50) < 5


def test_attacker_errors():
    with pytest.raises(DegenerateFeaturesError):
        fit_attacker(np.ones((5, 4)), np.ones((5, 4)))
    with pytest.raises(EmptyInputError):
        fit_attacker(np.ones((0, 4)), np.ones((5, 4)))


def test_auroc_examples():
    assert auroc([0.9, 0.8], [0.1, 0.2]) == 100.0
    assert auroc([0.3, 0.6, 0.6], [0.3, 0.6, 0.6]) == 50.0
    assert auroc([0.9, 0.4], [0.5, 0.1]) == 75.0
    with pytest.raises(EmptyInputError):
        auroc([], [0.1])


@given(st.lists(st.integers(0, 6), min_size=1, max_size=25),
       st.lists(st.integers(0, 6), min_size=1, max_size=25))
def test_auroc_pairwise_oracle_and_symmetry(a, b):
    pairs = sum(1.0 if x > y else 0.5 if x == y else 0.0 for x in a for y in b)
    assert math.isclose(auroc(a, b), 100 * pairs / (len(a) * len(b)), abs_tol=1e-9)
    assert auroc(a, b) + auroc(b, a) == 100.0


def test_avg_gap_examples():
    assert avg_gap((1, 2, 3, 4), (1, 2, 3, 4)) == 0.0
    assert avg_gap((10, 20, 30, 40), (12, 20, 26, 40)) == 1.5


quads = st.tuples(*[st.floats(0, 100)] * 4)


@given(quads, quads, quads)
def test_avg_gap_is_a_metric(a, b, c):
    assert avg_gap(a, b) >= 0
    assert avg_gap(a, b) == avg_gap(b, a)
    assert (avg_gap(a, b) == 0) == (a == b)
    assert avg_gap(a, c) <= avg_gap(a, b) + avg_gap(b, c) + 1e-9


def test_sensitivity_examples():
    assert sensitivity_score(0.8, 0.8, 0.9) == 0.0
    assert abs(sensitivity_score(0.9, 0.6, 0.9) - 1 / 3) < 1e-5
    assert abs(sensitivity_score(0.6, 0.9, 0.75) - 0.4) < 1e-5
    assert sensitivity_score(0.5, 0.0, 0.0) == pytest.approx(0.5 / 1e-8)


def test_select_model_examples():
    rec = CandidateRecord
    assert select_model([rec(7, 0.1, 3.0)]) == 7
    assert select_model([rec(0, 0.35, 1.0), rec(1, 0.2, 2.0)], xi=0.3) == 1
    assert select_model([rec(0, 0.25, 1.0), rec(1, 0.10, 1.05), rec(2, 0.15, 3.0)],
                        xi=0.3, gap_tolerance=0.1) == 1
    with pytest.raises(NoViableCandidateError):
        select_model([rec(0, 0.5, 1.0)])
    with pytest.raises(NoViableCandidateError):
        select_model([])


@given(st.lists(st.tuples(st.floats(0, 0.29), st.floats(0, 5)), min_size=1, max_size=8), st.data())
def test_select_model_gap_monotonicity(rows, data):
    cands = [CandidateRecord(i, p, g) for i, (p, g) in enumerate(rows)]
    chosen = select_model(cands)
    j = data.draw(st.integers(0, len(cands) - 1))
    if j == chosen:
        c = cands[j]
        lowered = CandidateRecord(c.config_id, c.p_s, c.gap * data.draw(st.floats(0, 1)))
        assert select_model(cands[:j] + [lowered] + cands[j + 1:]) == chosen


def _bank(labels_by_id):
    keys = np.array([[1.0, 0], [0.99, 0.141], [0.98, 0.199], [0.97, 0.243], [0.0, 1.0]])
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    return ExemplarMemory(list(labels_by_id), keys, np.zeros((5, 1)))


def test_knn_baseline_examples():
    labels = {0: 0, 1: 0, 2: 1, 3: 2, 4: 1}
    mem = _bank(labels)
    q = np.array([1.0, 0.0])
    assert knn_baseline(q, mem, labels, 1, 3).tolist() == [1.0, 0.0, 0.0]
    assert knn_baseline(q, mem, labels, 4, 3).tolist() == [0.5, 0.25, 0.25]
    before = knn_baseline(q, mem, labels, 4, 3)[0]
    delete(mem, [0, 1])
    assert knn_baseline(q, mem, labels, 4, 3)[0] < before


@given(st.lists(st.integers(0, 4), min_size=1, max_size=30), st.integers(1, 30))
def test_knn_probabilities_are_exact_fractions(labs, K):
    n = len(labs)
    rng = np.random.default_rng(n)
    keys = rng.normal(size=(n, 3))
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    mem = ExemplarMemory(np.arange(n), keys, np.zeros((n, 1)))
    probs = knn_baseline(keys[0], mem, dict(enumerate(labs)), K, 5)
    k_eff = min(K, n)
    fracs = [Fraction(p).limit_denominator(k_eff) for p in probs]
    assert sum(fracs) == 1
    assert all(float(f) == p for f, p in zip(fracs, probs))


def test_pathway_accuracies_untrained_is_chance():
    ds = generate(SyntheticSpec(classes=4, samples_per_class=200, seed=2))
    cfg = TrainConfig(epochs=0)
    model = init_model(cfg, ds.split("train"))
    data = ds.split("train")
    assert len(data) >= 500
    for a in measure_pathway_accuracies(model, data):
        assert abs(a - 0.25) < 0.05


def test_a_both_matches_instance_token_predictions():
    model, ds = tiny_model()
    data = ds.split("train")
    _, _, a_both = measure_pathway_accuracies(model, data, batch=7)
    from forgekey.inference import logits_for_values

    hits = 0
    for img, i, y in zip(data.images, data.ids, data.labels):
        v = model.memory.values[model.memory.rows([i])]
        hits += int(np.argmax(logits_for_values(model, img, v)[0]) == y)
    assert a_both == hits / len(data)
    m = model.copy()
    delete(m.memory, [int(data.ids[0])])
    with pytest.raises(StaleSampleError):
        measure_pathway_accuracies(m, data)


def test_report_json_fixed_layout():
    r = MetricsReport(81.06, 99.71, 84.0, 51.19, None, 0.123456, 0.0001234)
    text = r.to_json()
    assert text == ('{"ta": 81.0600, "ra": 99.7100, "fa": 84.0000, "mia_auroc": 51.1900, '
                    '"avg_gap": null, "p_s": 0.1235, "unlearn_seconds": 0.0001}')
    back = MetricsReport.from_json(text)
    assert back.quad() == (81.06, 99.71, 84.0, 51.19) and back.avg_gap is None


def test_splits_partition():
    ds = generate(SyntheticSpec(classes=3, samples_per_class=30, image_size=8))
    f = sample_forget(ds, 0.1, True, 0)
    sp = Splits.make(ds, f, seed=3)
    assert set(sp.forget.ids) == set(f.tolist())
    assert set(sp.retain.ids) | set(sp.forget.ids) == set(ds.split("train").ids)
    assert not set(sp.retain.ids) & set(sp.forget.ids)
    assert set(sp.test_fit.ids) | set(sp.test_probe.ids) == set(sp.test.ids)
    assert not set(sp.test_fit.ids) & set(sp.test_probe.ids)


def test_retrain_oracle_examples():
    model, ds = tiny_model()
    cfg = model.config
    same = retrain_oracle(cfg, ds, [])
    assert all(np.array_equal(t.data, same.params[n].data) for n, t in model.params.items())
    forget = sample_forget(ds, 0.1, True, 0)
    oracle = retrain_oracle(cfg.replace(epochs=1), ds, forget)
    assert len(oracle.memory) == len(ds.split("train")) - len(forget)
    with pytest.raises(UnknownIdError):
        oracle.memory.rows([int(forget[0])])
    with pytest.raises(UnknownIdError):
        retrain_oracle(cfg, ds, [10**9])


def test_evaluate_unlearning_self_oracle_and_timing():
    model, ds = tiny_model()
    forget = sample_forget(ds, 0.1, True, 0)
    rep = evaluate_unlearning(model, model, ds, forget, seed=0)
    assert rep.avg_gap == 0.0
    assert 0 <= rep.mia_auroc <= 100 and rep.p_s >= 0
    assert rep.unlearn_seconds < 0.05
    assert model.memory.live_count == len(model.memory)  # caller's model untouched
    # forget samples no longer retrieve themselves after deletion
    m = model.copy()
    delete(m.memory, forget)
    fset = set(forget.tolist())
    for img in ds.by_ids(forget).images:
        assert not fset & set(predict(img, m, FusionStrategy()).neighbor_ids.tolist())
