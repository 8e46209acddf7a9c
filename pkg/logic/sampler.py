import csv
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from logic.bank import PrototypeBank, compute_prototype
from logic.errors import ConfigError, ContractViolation, DataIOError
from logic.extractor import MlpParams, embed
from logic.linalg import pairwise_distances
from logic.models import EpisodeConfig, StreamConfig


@dataclass
class SessionDataset:
    session_index: int
    features: np.ndarray
    labels: np.ndarray
    label_set: Tuple[int, ...]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ContractViolation("features must be a 2-D array with one row per label")
        stray = set(np.unique(self.labels).tolist()) - set(self.label_set)
        if stray:
            raise ContractViolation(f"session {self.session_index} holds labels outside its label set: {sorted(stray)}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def indices_of(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


@dataclass
class SessionStream:
    sessions: List[SessionDataset]
    tests: List[SessionDataset]
    input_dim: int
    total_classes: int

    def __post_init__(self):
        if len(self.sessions) != len(self.tests) or not self.sessions:
            raise ContractViolation("a stream needs one test split per session and at least one session")
        seen: set = set()
        for s in self.sessions:
            overlap = seen & set(s.label_set)
            if overlap:
                raise ContractViolation(f"session {s.session_index} reuses labels {sorted(overlap)}")
            seen |= set(s.label_set)


@dataclass
class NegativePair:
    first: int
    second: int
    source: str


@dataclass
class Episode:
    classes: Tuple[int, ...]
    support: Dict[int, np.ndarray]
    query: Dict[int, np.ndarray]
    negatives: Dict[int, NegativePair]
    positive: np.ndarray
    negative: np.ndarray
    negative2: np.ndarray

    def triple(self, i: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.positive[i], self.negative[i], self.negative2[i]


def _draw(rng: np.random.Generator, pool: np.ndarray, n: int) -> np.ndarray:
    return rng.choice(pool, size=n, replace=False)


def sample_episode(data: SessionDataset, params: MlpParams, bank: Optional[PrototypeBank],
                   rng: np.random.Generator, cfg: EpisodeConfig) -> Episode:
    labels = list(data.label_set)
    n_classes = cfg.n_classes or len(labels)
    if n_classes > len(labels):
        raise ConfigError(f"episode asks for {n_classes} classes, session {data.session_index} has {len(labels)}")
    if cfg.n_query < 1:
        raise ContractViolation("query pool is empty: n_query must be at least 1")
    for k in labels:
        have = len(data.indices_of(k))
        if have < cfg.n_support + cfg.n_query:
            raise ConfigError(
                f"class {k} has {have} samples, episode needs {cfg.n_support} support + {cfg.n_query} query"
            )

    past = bank.classes_before(data.session_index) if bank is not None else []
    bank_ok = data.session_index > 1 and len(past) >= 2
    current_ok = len(labels) >= 3

    classes = tuple(int(k) for k in _draw(rng, np.asarray(labels), n_classes))
    support, query, negatives = {}, {}, {}
    pos_rows, neg_rows, neg2_rows = [], [], []
    for k in classes:
        pool = data.indices_of(k)
        s = _draw(rng, pool, cfg.n_support)
        q = _draw(rng, np.setdiff1d(pool, s), cfg.n_query)
        support[k], query[k] = s, q
        pos_rows.append(compute_prototype(embed(params, data.features[s])))

        use_bank = bank_ok and (not current_ok or rng.random() < cfg.p_bank_negative)
        if use_bank:
            a, b = (int(x) for x in _draw(rng, np.asarray(past), 2))
            negatives[k] = NegativePair(a, b, "bank")
            neg_rows.append(bank.histories[a].prototype.copy())
            neg2_rows.append(bank.histories[b].prototype.copy())
        elif current_ok:
            others = np.asarray([x for x in labels if x != k])
            a, b = (int(x) for x in _draw(rng, others, 2))
            negatives[k] = NegativePair(a, b, "current")
            for cls, rows in ((a, neg_rows), (b, neg2_rows)):
                idx = _draw(rng, data.indices_of(cls), cfg.n_support)
                rows.append(compute_prototype(embed(params, data.features[idx])))
        else:
            raise ConfigError(
                f"session {data.session_index} cannot supply two negative classes: "
                f"{len(labels)} current classes and {len(past)} stored classes"
            )
    return Episode(classes, support, query, negatives,
                   np.stack(pos_rows), np.stack(neg_rows), np.stack(neg2_rows))


MEAN_DRAW_TRIES = 64
SPREAD_GROWTH = 1.25


def _class_means(count: int, dim: int, gap: float, rng: np.random.Generator) -> np.ndarray:
    """Means drawn one at a time; a draw closer than `gap` to an accepted mean is redrawn.

    The proposal spread starts where a typical pair lies 1.5 gaps apart and widens when a class
    cannot be placed, so crowded low-dimensional streams still terminate.
    """
    spread = 1.5 * gap / np.sqrt(2.0 * dim)
    means = np.empty((0, dim))
    while means.shape[0] < count:
        for _ in range(MEAN_DRAW_TRIES):
            candidate = rng.normal(0.0, spread, size=dim)
            if not means.shape[0] or pairwise_distances(candidate, means).min() >= gap:
                means = np.vstack([means, candidate])
                break
        else:
            spread *= SPREAD_GROWTH
    return means


def make_session_stream(cfg: StreamConfig, rng: np.random.Generator) -> SessionStream:
    """Isotropic Gaussian class blobs; class means sit at least `separation` standard deviations apart."""
    if cfg.total_classes is not None and cfg.class_count > cfg.total_classes:
        raise ConfigError(f"{cfg.class_count} classes needed, only {cfg.total_classes} available")
    total = cfg.class_count
    sigma = float(np.sqrt(cfg.variance))
    means = _class_means(total, cfg.input_dim, cfg.separation * sigma, rng)

    partitions: List[Tuple[int, ...]] = [tuple(range(cfg.base_classes))]
    start = cfg.base_classes
    for _ in range(cfg.sessions):
        partitions.append(tuple(range(start, start + cfg.n_way)))
        start += cfg.n_way

    sessions, tests = [], []
    for t, label_set in enumerate(partitions, start=1):
        per_class = cfg.base_train_per_class if t == 1 else cfg.k_shot
        train_x, train_y, test_x, test_y = [], [], [], []
        for k in label_set:
            train_x.append(means[k] + sigma * rng.standard_normal((per_class, cfg.input_dim)))
            train_y.append(np.full(per_class, k))
            test_x.append(means[k] + sigma * rng.standard_normal((cfg.test_per_class, cfg.input_dim)))
            test_y.append(np.full(cfg.test_per_class, k))
        sessions.append(SessionDataset(t, np.concatenate(train_x), np.concatenate(train_y), label_set))
        tests.append(SessionDataset(t, np.concatenate(test_x), np.concatenate(test_y), label_set))
    return SessionStream(sessions, tests, cfg.input_dim, total)


def _read_feature_csv(path: str) -> Tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if not header or header[0] != "label" or header[1:] != [f"f{i}" for i in range(len(header) - 1)]:
                raise DataIOError(f"{path}: header must be label,f0,...,f{{D-1}}")
            labels, rows = [], []
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise DataIOError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
                labels.append(int(row[0]))
                rows.append([float(x) for x in row[1:]])
    except DataIOError:
        raise
    except (OSError, ValueError) as e:
        raise DataIOError(f"cannot read features from {path}: {e}")
    dim = len(header) - 1
    X = np.asarray(rows, dtype=np.float64).reshape(-1, dim)
    bad = np.flatnonzero(~np.isfinite(X).all(axis=1))
    if bad.size:
        raise DataIOError(f"{path}:{int(bad[0]) + 2}: features must be finite")
    return X, np.asarray(labels, dtype=np.int64)


def _write_feature_csv(path: str, datasets: Sequence[SessionDataset]) -> None:
    dim = datasets[0].features.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label"] + [f"f{i}" for i in range(dim)])
        for ds in datasets:
            for y, x in zip(ds.labels, ds.features):
                writer.writerow([int(y)] + [repr(float(v)) for v in x])


def _check_incremental_shape(manifest: dict, sessions: Sequence[SessionDataset], path: str) -> None:
    # every incremental session holds n_way classes with exactly k_shot samples each
    incremental = sessions[1:]
    if not incremental:
        return
    first = incremental[0]
    n_way = int(manifest.get("n_way", len(first.label_set)))
    k_shot = int(manifest.get("k_shot", len(first.indices_of(first.label_set[0])) if first.label_set else 0))
    for s in incremental:
        counts = {k: len(s.indices_of(k)) for k in s.label_set}
        if len(counts) != n_way or any(c != k_shot for c in counts.values()):
            raise ConfigError(
                f"{path}: session {s.session_index} has {len(s)} samples over {len(counts)} classes, "
                f"expected {n_way} classes x {k_shot} shots"
            )


def load_feature_stream(manifest_path: str) -> SessionStream:
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, ValueError) as e:
        raise DataIOError(f"cannot read manifest {manifest_path}: {e}")
    if not isinstance(manifest, dict) or not isinstance(manifest.get("sessions"), list):
        raise DataIOError(f"{manifest_path}: manifest must be an object with a 'sessions' list")
    root = os.path.dirname(os.path.abspath(manifest_path))
    try:
        train_csv = os.path.join(root, manifest["train_csv"])
        test_csv = os.path.join(root, manifest["test_csv"])
    except KeyError as e:
        raise DataIOError(f"{manifest_path}: missing key {e}")
    train_x, train_y = _read_feature_csv(train_csv)
    test_x, test_y = _read_feature_csv(test_csv)

    partitions = [tuple(int(k) for k in s) for s in manifest["sessions"]]
    flat = [k for p in partitions for k in p]
    if len(flat) != len(set(flat)):
        raise ConfigError(f"{manifest_path}: session label sets must be disjoint")
    sessions, tests = [], []
    for t, label_set in enumerate(partitions, start=1):
        tr = np.isin(train_y, label_set)
        te = np.isin(test_y, label_set)
        sessions.append(SessionDataset(t, train_x[tr], train_y[tr], label_set))
        tests.append(SessionDataset(t, test_x[te], test_y[te], label_set))
    unassigned = set(np.unique(train_y).tolist()) - set(flat)
    if unassigned:
        raise ConfigError(f"{manifest_path}: labels {sorted(unassigned)} are not assigned to any session")
    _check_incremental_shape(manifest, sessions, manifest_path)
    total = int(manifest.get("total_classes", max(flat) + 1 if flat else 0))
    return SessionStream(sessions, tests, train_x.shape[1], total)


def write_stream(stream: SessionStream, out_dir: str) -> str:
    try:
        os.makedirs(out_dir, exist_ok=True)
        _write_feature_csv(os.path.join(out_dir, "train.csv"), stream.sessions)
        _write_feature_csv(os.path.join(out_dir, "test.csv"), stream.tests)
        manifest = {
            "train_csv": "train.csv",
            "test_csv": "test.csv",
            "sessions": [list(s.label_set) for s in stream.sessions],
            "total_classes": stream.total_classes,
        }
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2)
            f.write("\n")
    except OSError as e:
        raise DataIOError(f"cannot write stream to {out_dir}: {e}")
    return path
