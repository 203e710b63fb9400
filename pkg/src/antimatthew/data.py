"""Federation datasets: the synthetic generator, CSV ingestion and client filtering.

Each client holds its samples as parallel arrays (features ``x``, protected
attribute ``a``, binary label ``y``) rather than as a list of record objects;
``ClientDataset.samples()`` yields per-row :class:`Sample` views when needed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    a: int
    y: int


@dataclass
class ClientDataset:
    client_id: int
    x: np.ndarray
    a: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.a = np.asarray(self.a, dtype=int).ravel()
        self.y = np.asarray(self.y, dtype=int).ravel()
        n = self.x.shape[0]
        if n == 0:
            raise DataError(f"client {self.client_id} has no samples")
        if self.a.shape[0] != n or self.y.shape[0] != n:
            raise DataError(f"client {self.client_id}: x, a, y lengths differ")
        if not np.all(np.isfinite(self.x)):
            raise DataError(f"client {self.client_id}: non-finite feature values")
        if np.any((self.y != 0) & (self.y != 1)):
            raise DataError(f"client {self.client_id}: non-binary label")
        if np.any(self.a < 0):
            raise DataError(f"client {self.client_id}: negative protected value")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]

    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(self.x[i], int(self.a[i]), int(self.y[i]))

    def take(self, idx: np.ndarray) -> "ClientDataset":
        return ClientDataset(self.client_id, self.x[idx], self.a[idx], self.y[idx])


@dataclass
class FederationData:
    clients: list[ClientDataset]
    test_clients: list[ClientDataset]
    M: int = 2
    feature_dim: int = field(default=0)
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.clients:
            raise DataError("federation has no clients")
        if len(self.clients) != len(self.test_clients):
            raise DataError("train and test client lists differ in length")
        dims = {c.feature_dim for c in self.clients + self.test_clients}
        if len(dims) != 1:
            raise DataError(f"inconsistent feature dimensions {sorted(dims)}")
        self.feature_dim = dims.pop()
        if not self.feature_names:
            self.feature_names = [f"x{i + 1}" for i in range(self.feature_dim)]
        top = max(int(c.a.max()) for c in self.clients + self.test_clients)
        if top >= self.M:
            raise DataError(f"protected value {top} out of range for M={self.M}")

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def train_sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.clients])


def _split_train_test(ds: ClientDataset, rng: np.random.Generator, test_frac: float):
    n = len(ds)
    perm = rng.permutation(n)
    n_test = int(round(test_frac * n))
    n_test = min(max(n_test, 1), n - 1) if n > 1 else 0
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return ds.take(train_idx), ds.take(test_idx) if n_test else ds.take(train_idx)


def generate_synthetic(n_samples: int = 10000, seed: int = 0, n_clients: int = 2,
                       test_frac: float = 0.2) -> FederationData:
    """Draw the two-feature synthetic federation.

    ``A ~ Bernoulli(0.5)``, ``X1 ~ N(0, 1)``, ``X2 ~ N(1[a > 0], 2)`` (variance 2),
    and ``Y ~ Bernoulli(u)`` where ``u`` is the low or high rate of the sample's
    group depending on the sign of ``x1 + x2``. With ``n_clients=2`` the split is
    ``x1 <= -0.5`` (client 0) versus the rest; larger ``n_clients`` cut ``x1``
    at its empirical quantiles.
    """
    if n_samples < 100:
        raise DataError(f"n_samples must be >= 100, got {n_samples}")
    if n_clients < 1:
        raise DataError("n_clients must be >= 1")
    rng = np.random.default_rng(seed)
    a = rng.binomial(1, 0.5, size=n_samples)
    x1 = rng.normal(0.0, 1.0, size=n_samples)
    x2 = rng.normal((a > 0).astype(float), np.sqrt(2.0))
    low = np.where(a == 0, 0.3, 0.1)
    high = np.where(a == 0, 0.6, 0.9)
    u = np.where(x1 + x2 <= 0, low, high)
    y = (rng.random(n_samples) < u).astype(int)
    x = np.column_stack([x1, x2])

    if n_clients == 1:
        assign = np.zeros(n_samples, dtype=int)
    elif n_clients == 2:
        assign = np.where(x1 <= -0.5, 0, 1)
    else:
        edges = np.quantile(x1, np.linspace(0, 1, n_clients + 1)[1:-1])
        assign = np.searchsorted(edges, x1, side="left")

    train, test = [], []
    for k in range(n_clients):
        idx = np.flatnonzero(assign == k)
        full = ClientDataset(k, x[idx], a[idx], y[idx])
        tr, te = _split_train_test(full, rng, test_frac)
        train.append(tr)
        test.append(te)
    return FederationData(train, test, M=2, feature_names=["x1", "x2"])


def _encode_small_int(value: str, what: str, row: int) -> int:
    try:
        f = float(value)
    except ValueError:
        raise DataError(f"row {row}: {what} value {value!r} is not an integer") from None
    if f != int(f) or f < 0:
        raise DataError(f"row {row}: {what} value {value!r} is not a small nonnegative integer")
    return int(f)


def load_csv(path: str | Path, feature_columns: Sequence[str], protected_column: str,
             label_column: str, client_column: str, *, test_column: str | None = None,
             test_frac: float = 0.2, seed: int = 0, standardize: bool = False) -> FederationData:
    """Read a federation from a headered CSV file.

    Numeric feature columns are used as-is; any column holding a non-numeric
    value is one-hot encoded with categories in order of first appearance.
    When ``test_column`` is given its 0/1 value selects the split, otherwise
    each client is split ``1 - test_frac`` / ``test_frac`` using ``seed``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = list(feature_columns) + [protected_column, label_column, client_column]
        if test_column:
            wanted.append(test_column)
        for col in wanted:
            if col not in header:
                raise DataError(f"column not found: {col!r}")
        rows = []
        for i, row in enumerate(reader):
            for col in wanted:
                v = row.get(col)
                if v is None or v.strip() == "":
                    raise DataError(f"row {i}: missing value in column {col!r}")
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no data rows")

    labels = []
    for i, row in enumerate(rows):
        y = _encode_small_int(row[label_column], "label", i)
        if y not in (0, 1):
            raise DataError(f"row {i}: non-binary label {row[label_column]!r}")
        labels.append(y)
    protected = [_encode_small_int(r[protected_column], "protected", i) for i, r in enumerate(rows)]

    columns, names = [], []
    for col in feature_columns:
        raw = [r[col].strip() for r in rows]
        try:
            columns.append(np.array([float(v) for v in raw]))
            names.append(col)
        except ValueError:
            cats = list(dict.fromkeys(raw))
            for cat in cats:
                columns.append(np.array([1.0 if v == cat else 0.0 for v in raw]))
                names.append(f"{col}={cat}")
    x = np.column_stack(columns) if columns else np.zeros((len(rows), 0))
    if standardize and x.shape[1]:
        sd = x.std(axis=0)
        x = (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)

    a = np.array(protected)
    y = np.array(labels)
    raw_ids = [r[client_column].strip() for r in rows]
    try:
        keys = [float(v) for v in raw_ids]
        order = sorted(set(keys))
        client_of = np.array([order.index(k) for k in keys])
    except ValueError:
        order = sorted(set(raw_ids))
        client_of = np.array([order.index(k) for k in raw_ids])
    is_test = None
    if test_column:
        is_test = np.array([_encode_small_int(r[test_column], "test flag", i)
                            for i, r in enumerate(rows)]) == 1

    rng = np.random.default_rng(seed)
    train, test = [], []
    for k in range(len(order)):
        idx = np.flatnonzero(client_of == k)
        if is_test is None:
            tr, te = _split_train_test(ClientDataset(k, x[idx], a[idx], y[idx]), rng, test_frac)
        else:
            tr_idx, te_idx = idx[~is_test[idx]], idx[is_test[idx]]
            if len(tr_idx) == 0 or len(te_idx) == 0:
                raise DataError(f"client {order[k]!r} lacks a train or test row")
            tr = ClientDataset(k, x[tr_idx], a[tr_idx], y[tr_idx])
            te = ClientDataset(k, x[te_idx], a[te_idx], y[te_idx])
        train.append(tr)
        test.append(te)
    M = max(2, int(a.max()) + 1)
    return FederationData(train, test, M=M, feature_names=names)


def filter_min_size(data: FederationData, min_samples: int) -> FederationData:
    """Keep clients whose training split has at least ``min_samples`` rows."""
    if min_samples < 1:
        raise DataError("min_samples must be >= 1")
    keep = [i for i, c in enumerate(data.clients) if len(c) >= min_samples]
    if not keep:
        raise DataError(f"no client has at least {min_samples} training samples")
    return FederationData([data.clients[i] for i in keep], [data.test_clients[i] for i in keep],
                          M=data.M, feature_names=list(data.feature_names))


def write_federation_csv(data: FederationData, train_path: str | Path, test_path: str | Path):
    """Write train and test splits as ``client_id, x1..xd, a, y`` CSV files."""
    header = ["client_id", *data.feature_names, "a", "y"]
    for path, parts in ((train_path, data.clients), (test_path, data.test_clients)):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for ds in parts:
                for i in range(len(ds)):
                    w.writerow([ds.client_id, *(repr(float(v)) for v in ds.x[i]),
                                int(ds.a[i]), int(ds.y[i])])
