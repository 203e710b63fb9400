import numpy as np
import pytest

from antimatthew.attacks import AttackSpec, RoundCorrupter, corrupt, pick_malicious
from antimatthew.data import generate_synthetic
from antimatthew.model import init_params
from antimatthew.trainer import GradientBundle, collect_round


def make_bundle(n=4, p=3, seed=0):
    rng = np.random.default_rng(seed)
    b = GradientBundle(rng.standard_normal((n, p)), rng.standard_normal((n, p)),
                       rng.random(n), rng.random(n) * 0.3, rng.random(n) * 0.3)
    return b.derive()


def test_enlarge_scales_by_factor():
    b = make_bundle()
    out = corrupt(b, AttackSpec("enlarge", frozenset({1, 3})))
    for i in range(4):
        k = 10.0 if i in (1, 3) else 1.0
        assert np.array_equal(out.loss_grads[i], k * b.loss_grads[i])
        assert np.array_equal(out.bias_grads[i], k * b.bias_grads[i])


def test_zero_attack():
    out = corrupt(make_bundle(), AttackSpec("zero", frozenset({0})))
    assert np.all(out.loss_grads[0] == 0) and np.all(out.bias_grads[0] == 0)


def test_empty_set_is_identity():
    b = make_bundle()
    for kind in ("enlarge", "random", "zero"):
        out = corrupt(b, AttackSpec(kind))
        assert np.array_equal(out.loss_grads, b.loss_grads)
        assert np.array_equal(out.bias_grads, b.bias_grads)


def test_input_not_mutated():
    b = make_bundle()
    before = b.loss_grads.copy()
    corrupt(b, AttackSpec("zero", frozenset({0, 1})))
    assert np.array_equal(b.loss_grads, before)


def test_out_of_range_id():
    with pytest.raises(ValueError):
        corrupt(make_bundle(n=3), AttackSpec("zero", frozenset({3})))


def test_random_reproducible_and_fresh_each_round():
    spec = AttackSpec("random", frozenset({2}), seed=9)
    b = make_bundle()
    assert np.array_equal(corrupt(b, spec, 1).loss_grads, corrupt(b, spec, 1).loss_grads)
    assert not np.array_equal(corrupt(b, spec, 1).loss_grads, corrupt(b, spec, 2).loss_grads)
    rc = RoundCorrupter(spec)
    assert np.array_equal(rc(b).loss_grads, corrupt(b, spec, 1).loss_grads)


def test_pick_malicious():
    ids = pick_malicious(8, 3, 0)
    assert len(ids) == 3 and ids == pick_malicious(8, 3, 0)
    assert all(0 <= i < 8 for i in ids)
    with pytest.raises(ValueError):
        pick_malicious(3, 3, 0)


def test_bad_spec():
    with pytest.raises(ValueError):
        AttackSpec("flip")
    with pytest.raises(ValueError):
        AttackSpec("enlarge", factor=0.0)


def test_normalization_neutralizes_enlarge():
    fed = generate_synthetic(1000, 0)
    params = init_params(2, 2, 0, seed=0, scale=1.0, use_protected=False)
    spec = AttackSpec("enlarge", frozenset({1}))
    clean, _ = collect_round(params, fed, normalize_gradients=True)
    hit, _ = collect_round(params, fed, normalize_gradients=True,
                           corrupt=lambda b: corrupt(b, spec))
    assert clean.loss_grads.tobytes() == hit.loss_grads.tobytes()
    assert clean.bias_grads.tobytes() == hit.bias_grads.tobytes()
