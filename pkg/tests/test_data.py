import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from antimatthew.data import (ClientDataset, DataError, FederationData, filter_min_size,
                              generate_synthetic, load_csv, write_federation_csv)


def _all(fed, split="both"):
    parts = list(fed.clients) + list(fed.test_clients)
    return (np.vstack([p.x for p in parts]), np.concatenate([p.a for p in parts]),
            np.concatenate([p.y for p in parts]))


def test_synthetic_is_deterministic():
    a, b = generate_synthetic(10000, 3), generate_synthetic(10000, 3)
    for pa, pb in zip(a.clients + a.test_clients, b.clients + b.test_clients):
        assert pa.x.tobytes() == pb.x.tobytes()
        assert pa.a.tobytes() == pb.a.tobytes() and pa.y.tobytes() == pb.y.tobytes()


def test_synthetic_seeds_differ():
    assert not np.array_equal(generate_synthetic(1000, 0).clients[0].x,
                              generate_synthetic(1000, 1).clients[0].x)


@pytest.mark.parametrize("seed", range(5))
def test_protected_fraction_concentrates(seed):
    _, a, _ = _all(generate_synthetic(10000, seed))
    assert len(a) == 10000
    assert 0.47 <= int(np.sum(a == 1)) / 10000 <= 0.53


def test_two_clients_split_on_x1():
    fed = generate_synthetic(10000, 0)
    assert fed.n_clients == 2
    for part in (fed.clients, fed.test_clients):
        assert np.all(part[0].x[:, 0] <= -0.5)
        assert np.all(part[1].x[:, 0] > -0.5)


def test_split_is_80_20_per_client():
    fed = generate_synthetic(10000, 0)
    for tr, te in zip(fed.clients, fed.test_clients):
        total = len(tr) + len(te)
        assert abs(len(te) - 0.2 * total) <= 1


def test_partition_is_exhaustive_and_disjoint():
    fed = generate_synthetic(2000, 4)
    x, _, _ = _all(fed)
    assert x.shape[0] == 2000
    assert len({row.tobytes() for row in x}) == 2000


def test_x2_shift_by_group():
    x, a, _ = _all(generate_synthetic(10000, 0))
    shift = x[a == 1, 1].mean() - x[a == 0, 1].mean()
    assert abs(shift - 1.0) <= 0.1
    # variance 2 within each group
    assert abs(x[a == 0, 1].var() - 2.0) < 0.15


def test_label_rates_follow_rule():
    x, a, y = _all(generate_synthetic(40000, 1))
    side = x[:, 0] + x[:, 1] > 0
    expected = {(0, False): 0.3, (0, True): 0.6, (1, False): 0.1, (1, True): 0.9}
    for (g, hi), u in expected.items():
        m = (a == g) & (side == hi)
        # 5 binomial standard errors
        assert abs(y[m].mean() - u) <= 5 * np.sqrt(u * (1 - u) / m.sum())


def test_every_client_has_both_labels_and_groups():
    for seed in range(3):
        fed = generate_synthetic(1000, seed)
        for ds in fed.clients:
            assert set(np.unique(ds.y)) == {0, 1}
            assert set(np.unique(ds.a)) == {0, 1}


def test_quantile_split_for_more_clients():
    fed = generate_synthetic(8000, 0, n_clients=8)
    assert fed.n_clients == 8
    sizes = [len(c) + len(t) for c, t in zip(fed.clients, fed.test_clients)]
    assert max(sizes) - min(sizes) <= 1
    for lo, hi in zip(fed.clients, fed.clients[1:]):
        assert lo.x[:, 0].max() <= hi.x[:, 0].min()


def test_small_n_rejected():
    with pytest.raises(DataError):
        generate_synthetic(50, 0)
    with pytest.raises(DataError):
        generate_synthetic(0, 0)


def test_client_dataset_validation():
    with pytest.raises(DataError):
        ClientDataset(0, np.zeros((0, 2)), np.zeros(0, int), np.zeros(0, int))
    with pytest.raises(DataError):
        ClientDataset(0, np.zeros((2, 2)), np.zeros(2, int), np.array([0, 2]))
    with pytest.raises(DataError):
        ClientDataset(0, np.array([[np.nan, 0.0]]), np.zeros(1, int), np.zeros(1, int))


def test_samples_roundtrip():
    ds = generate_synthetic(200, 0).clients[0]
    s = list(ds.samples())
    assert len(s) == len(ds)
    assert s[0].y in (0, 1) and s[0].a in (0, 1) and len(s[0].x) == ds.feature_dim


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_csv_two_clients(tmp_path):
    p = _write(tmp_path, "f,a,y,c,t\n1.0,0,1,7,0\n2.0,1,0,7,1\n3.0,0,1,3,0\n4.0,1,1,3,1\n")
    fed = load_csv(p, ["f"], "a", "y", "c", test_column="t")
    assert fed.n_clients == 2
    # clients ordered by id: 3 first
    assert fed.clients[0].x[0, 0] == 3.0 and fed.test_clients[1].x[0, 0] == 2.0


def test_load_csv_random_split(tmp_path):
    rows = "".join(f"{i},{i % 2},{(i // 2) % 2},{i % 3}\n" for i in range(60))
    fed = load_csv(_write(tmp_path, "f,a,y,c\n" + rows), ["f"], "a", "y", "c", seed=1)
    assert fed.n_clients == 3
    assert sum(len(c) + len(t) for c, t in zip(fed.clients, fed.test_clients)) == 60


def test_load_csv_missing_column(tmp_path):
    p = _write(tmp_path, "f,a,c\n1,0,0\n")
    with pytest.raises(DataError, match="column not found"):
        load_csv(p, ["f"], "a", "y", "c")


def test_load_csv_non_binary_label(tmp_path):
    p = _write(tmp_path, "f,a,y,c\n1,0,2,0\n2,1,0,0\n")
    with pytest.raises(DataError, match="non-binary label"):
        load_csv(p, ["f"], "a", "y", "c")


def test_load_csv_missing_value_names_row(tmp_path):
    p = _write(tmp_path, "f,a,y,c\n1,0,1,0\n,1,0,0\n")
    with pytest.raises(DataError, match="row 1"):
        load_csv(p, ["f"], "a", "y", "c")


def test_load_csv_one_hot_first_appearance(tmp_path):
    p = _write(tmp_path, "g,a,y,c,t\nred,0,1,0,0\nblue,1,0,0,1\nred,1,1,0,0\nblue,0,0,0,1\n")
    fed = load_csv(p, ["g"], "a", "y", "c", test_column="t")
    assert fed.feature_names == ["g=red", "g=blue"]
    assert fed.clients[0].x.tolist() == [[1.0, 0.0], [1.0, 0.0]]


def test_csv_roundtrip(tmp_path):
    fed = generate_synthetic(500, 2)
    write_federation_csv(fed, tmp_path / "train.csv", tmp_path / "test.csv")
    # merge into one file with a split flag and reload
    lines = []
    for name, flag in (("train.csv", 0), ("test.csv", 1)):
        body = (tmp_path / name).read_text().splitlines()
        header = body[0]
        lines += [f"{ln},{flag}" for ln in body[1:]]
    p = _write(tmp_path, header + ",t\n" + "\n".join(lines) + "\n", "all.csv")
    back = load_csv(p, ["x1", "x2"], "a", "y", "client_id", test_column="t")
    for a, b in zip(fed.clients + fed.test_clients, back.clients + back.test_clients):
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)


def _sized(sizes):
    parts = [ClientDataset(i, np.zeros((n, 1)), np.zeros(n, int), np.zeros(n, int))
             for i, n in enumerate(sizes)]
    tests = [ClientDataset(i, np.zeros((1, 1)), np.zeros(1, int), np.zeros(1, int))
             for i in range(len(sizes))]
    return FederationData(parts, tests)


def test_filter_min_size():
    assert filter_min_size(_sized([1600, 1400]), 1500).n_clients == 1
    fed = _sized([5, 9])
    kept = filter_min_size(fed, 1)
    assert [len(c) for c in kept.clients] == [5, 9]
    with pytest.raises(DataError):
        filter_min_size(_sized([10, 10]), 100)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(100, 3000), seed=st.integers(0, 2**31 - 1))
def test_generator_properties(n, seed):
    fed = generate_synthetic(n, seed)
    total = sum(len(c) + len(t) for c, t in zip(fed.clients, fed.test_clients))
    assert total == n
    for ds in fed.clients + fed.test_clients:
        assert np.all(np.isfinite(ds.x)) and set(np.unique(ds.y)) <= {0, 1}
