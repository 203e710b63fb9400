import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from antimatthew.data import ClientDataset, FederationData, generate_synthetic
from antimatthew.metrics import (Budgets, ClientReport, FederationReport, ablation_checks,
                                 budget_check, evaluate, hard_bias, table_check)
from antimatthew.model import PredictionBatch, init_params


def batch(labels):
    labels = np.asarray(labels)
    return PredictionBatch(np.where(labels == 1, 0.9, 0.1), labels)


def ds_of(a, y):
    n = len(a)
    return ClientDataset(0, np.zeros((n, 1)), np.asarray(a), np.asarray(y))


def count_oracle(labels, a, y, metric):
    rates = []
    for g in sorted(set(a)):
        num = den = 0
        for li, ai, yi in zip(labels, a, y):
            if ai != g or (metric == "TPSD" and yi != 1):
                continue
            den += 1
            num += (li == 1) if metric == "TPSD" else (li == yi)
        if den:
            rates.append(num / den)
    if len(rates) < 2:
        return 0.0
    mu = sum(rates) / len(rates)
    return (sum((r - mu) ** 2 for r in rates) / len(rates)) ** 0.5


def test_equal_tprs_give_zero():
    a, y = [0, 0, 1, 1], [1, 1, 1, 1]
    assert hard_bias(batch([1, 1, 1, 1]), ds_of(a, y), "TPSD")[0] == 0.0


def test_tprs_09_05_give_02():
    a = [0] * 10 + [1] * 10
    y = [1] * 20
    labels = [1] * 9 + [0] + [1] * 5 + [0] * 5
    assert hard_bias(batch(labels), ds_of(a, y), "TPSD")[0] == pytest.approx(0.2)


def test_crafted_twelve_samples():
    a = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]
    y = [1, 1, 0, 1, 0, 0, 1, 0, 1, 1, 1, 0]
    labels = [1, 0, 1, 1, 0, 1, 0, 0, 1, 0, 1, 1]
    for metric in ("TPSD", "APSD"):
        assert hard_bias(batch(labels), ds_of(a, y), metric)[0] == pytest.approx(
            count_oracle(labels, a, y, metric), abs=1e-15)


def test_degenerate_single_group():
    value, degenerate = hard_bias(batch([1, 0]), ds_of([0, 0], [1, 1]), "TPSD")
    assert value == 0.0 and degenerate


def test_random_small_datasets_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 15))
        a, y, labels = (rng.integers(0, 2, n) for _ in range(3))
        for metric in ("TPSD", "APSD"):
            v, _ = hard_bias(batch(labels), ds_of(a, y), metric)
            assert v == pytest.approx(count_oracle(labels.tolist(), a.tolist(), y.tolist(), metric),
                                      abs=1e-15)
            assert 0.0 <= v <= 0.5


def _rep(accs, biases=None, losses=None):
    n = len(accs)
    biases = biases if biases is not None else [0.0] * n
    losses = losses if losses is not None else [0.5] * n
    return FederationReport([ClientReport(l, a, b, 0.0) for a, b, l in zip(accs, biases, losses)])


def test_aggregates_two_clients():
    r = _rep([0.6, 0.8], [0.1, 0.3], [0.4, 0.6])
    assert r.avg_acc == pytest.approx(0.7) and r.std_acc == pytest.approx(0.1)
    assert r.mean_loss == pytest.approx(0.5)
    assert np.allclose(r.loss_devs, [0.1, 0.1]) and np.allclose(r.bias_devs, [0.1, 0.1])


def test_single_client_has_no_spread():
    r = _rep([0.7], [0.2])
    assert r.std_acc == 0 and r.max_loss_dev == 0 and r.max_bias_dev == 0


def test_budget_check_statuses():
    b = Budgets(0.1, 0.01, 0.04)
    assert budget_check(_rep([0.7, 0.7], [0.08, 0.08]), b)["bias"] == "satisfied"
    assert budget_check(_rep([0.7, 0.7], losses=[0.5, 0.521]), b)["loss_dev"] == "near"
    assert budget_check(_rep([0.7, 0.7], losses=[0.5, 0.54]), b)["loss_dev"] == "violated"


def test_table_and_ablation_checks():
    b = Budgets(0.1, 0.01, 0.04)
    t = table_check(0.0087, 0.0801, 0.0359, b)
    assert set(t.values()) == {"satisfied"}
    c = ablation_checks(0.0169, 0.1033, 0.0477, 0.12, b)
    assert c == {"std_acc": "violated", "avg_bias": "near", "std_bias": "violated",
                 "max_bias": "violated"}


def test_budgets_nonnegative():
    with pytest.raises(ValueError):
        Budgets(-0.1, 0.0, 0.0)


def test_evaluate_permutation_equivariant():
    fed = generate_synthetic(2000, 1, n_clients=3)
    params = init_params(2, 2, 0, seed=2, scale=1.0, use_protected=False)
    r = evaluate(params, fed, "TPSD")
    perm = [2, 0, 1]
    fed_p = FederationData([fed.clients[i] for i in perm], [fed.test_clients[i] for i in perm])
    rp = evaluate(params, fed_p, "TPSD")
    assert np.allclose(rp.accuracies, r.accuracies[perm])
    assert rp.avg_acc == pytest.approx(r.avg_acc) and rp.std_bias == pytest.approx(r.std_bias)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 0.5), min_size=1, max_size=10), st.floats(0, 0.5), st.floats(0, 0.5))
def test_feasibility_implication(biases, eps_b, eps_vb):
    # mean <= eps_b - eps_vb and every deviation <= eps_vb imply max <= eps_b
    r = _rep([0.5] * len(biases), biases)
    if r.mean_bias <= eps_b - eps_vb and r.max_bias_dev <= eps_vb:
        assert r.max_bias <= eps_b + 1e-12
