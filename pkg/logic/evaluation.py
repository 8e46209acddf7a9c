import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from logic.bank import PrototypeBank
from logic.errors import ContractViolation, DataIOError
from logic.extractor import MlpParams, OutputHead, embed, head_logits
from logic.linalg import pairwise_distances
from logic.models import RunReport, resolve_override_key


def _nearest(ids: np.ndarray, P: np.ndarray, Z: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum and ids are sorted, so ties go to the smallest class id
    return ids[np.argmin(pairwise_distances(Z, P), axis=1)]


def classify_ncm(bank: PrototypeBank, z, average_copies: bool = False) -> int:
    if not len(bank):
        raise ContractViolation("cannot classify against an empty bank")
    ids, P = bank.prototype_matrix(average_copies)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (bank.dim,):
        raise ContractViolation(f"query has shape {z.shape}, bank stores {bank.dim}-dim prototypes")
    return int(_nearest(ids, P, z[None, :])[0])


class NcmPredictor:
    def __init__(self, bank: PrototypeBank, average_copies: bool = False):
        if not len(bank):
            raise ContractViolation("cannot classify against an empty bank")
        self.ids, self.P = bank.prototype_matrix(average_copies)

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        return _nearest(self.ids, self.P, Z)


class HeadPredictor:
    def __init__(self, head: OutputHead, seen: Sequence[int]):
        self.head = head
        self.ids = np.asarray(sorted(set(int(k) for k in seen)), dtype=np.int64)

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        logits = head_logits(self.head, Z)[:, self.ids]
        return self.ids[np.argmax(logits, axis=1)]


@dataclass
class SessionAccuracy:
    pooled: float
    per_split: List[Optional[float]]
    correct: int
    total: int


def _count_correct(predict, params: MlpParams, X: np.ndarray, y: np.ndarray) -> int:
    if not len(y):
        return 0
    return int((predict(embed(params, X)) == y).sum())


def session_accuracy(predict, params: MlpParams, splits, threads: int = 1) -> SessionAccuracy:
    """Scores splits 1..t from scratch; empty splits are reported as None and left out of the pool."""
    if not splits:
        raise ContractViolation("no test splits to score")
    per_split: List[Optional[float]] = []
    correct = total = 0
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for split in splits:
            n = len(split)
            if n == 0:
                per_split.append(None)
                continue
            chunks = np.array_split(np.arange(n), min(max(1, threads), n))
            counts = pool.map(lambda idx: _count_correct(predict, params, split.features[idx], split.labels[idx]), chunks)
            c = sum(counts)
            per_split.append(c / n)
            correct += c
            total += n
    return SessionAccuracy(correct / total if total else 0.0, per_split, correct, total)


def backward_transfer(R: Sequence[Sequence[Optional[float]]]) -> Optional[float]:
    T = len(R)
    if T < 2:
        return None
    gaps = [R[T - 1][i] - R[i][i] for i in range(T - 1) if R[T - 1][i] is not None and R[i][i] is not None]
    if not gaps:
        return None
    return float(sum(gaps) / len(gaps))


def write_accuracy_csv(report: RunReport, path: str) -> None:
    T = report.sessions
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["session", "A_t"] + [f"R_{i}" for i in range(1, T + 1)])
            for t, (acc, row) in enumerate(zip(report.cumulative, report.accuracy), start=1):
                cells = ["" if v is None else repr(v) for v in row]
                writer.writerow([t, repr(acc)] + cells + [""] * (T - len(row)))
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}")


def config_value(report: RunReport, key: str) -> Any:
    node: Any = report.config
    for part in resolve_override_key(key):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


def sessions_table(reports: Sequence[Tuple[str, RunReport]]) -> List[List[Any]]:
    width = max((r.sessions for _, r in reports), default=0)
    rows: List[List[Any]] = [["run", "method"] + [f"session_{t}" for t in range(1, width + 1)] + ["bwt"]]
    for label, r in reports:
        cells = [repr(a) for a in r.cumulative] + [""] * (width - len(r.cumulative))
        rows.append([label, r.method] + cells + ["" if r.bwt is None else repr(r.bwt)])
    return rows


def grid_table(reports: Sequence[Tuple[str, RunReport]], row_key: str, col_key: str) -> List[List[Any]]:
    cells: Dict[Tuple[str, str], float] = {}
    row_vals: List[str] = []
    col_vals: List[str] = []
    for _, r in reports:
        rv, cv = str(config_value(r, row_key)), str(config_value(r, col_key))
        if rv not in row_vals:
            row_vals.append(rv)
        if cv not in col_vals:
            col_vals.append(cv)
        cells[(rv, cv)] = r.cumulative[-1]
    table: List[List[Any]] = [[f"{row_key}\\{col_key}"] + col_vals]
    for rv in row_vals:
        table.append([rv] + [repr(cells[(rv, cv)]) if (rv, cv) in cells else "" for cv in col_vals])
    return table


def write_table(rows: Sequence[Sequence[Any]], path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            csv.writer(f).writerows(rows)
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}")
