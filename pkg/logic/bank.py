"""Prototype memory bank: per-class copy histories, running statistics, calibration and refinement."""
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, List, Optional, Sequence, Tuple

import numpy as np

from logic.errors import ContractViolation, DataIOError
from logic.linalg import psd_inv_sqrt, psd_sqrt, sigmoid, unit_rows
from logic.models import BankConfig, MemoryReport, SmoothingKernel

BANK_MAGIC = b"PQBANK1"

Stats = Tuple[np.ndarray, np.ndarray]


@dataclass
class ClassHistory:
    class_id: int
    session_created: int
    copies: List[np.ndarray]
    footprint: np.ndarray
    running_mean: np.ndarray
    running_cov: np.ndarray
    flat_mean: np.ndarray
    flat_cov: np.ndarray
    stat_history: List[Stats] = field(default_factory=list)

    @property
    def prototype(self) -> np.ndarray:
        return self.copies[-1]

    @property
    def depth(self) -> int:
        return len(self.copies)

    def mean_copy(self) -> np.ndarray:
        return np.mean(np.stack(self.copies), axis=0)


def new_history(class_id: int, vector: np.ndarray, session: int) -> ClassHistory:
    v = np.array(vector, dtype=np.float64)
    if v.ndim != 1 or not np.all(np.isfinite(v)):
        raise ContractViolation(f"prototype for class {class_id} must be a finite vector")
    footprint = v.copy()
    footprint.setflags(write=False)
    zeros = np.zeros((v.size, v.size))
    return ClassHistory(
        class_id=int(class_id),
        session_created=int(session),
        copies=[v.copy()],
        footprint=footprint,
        running_mean=v.copy(),
        running_cov=zeros.copy(),
        flat_mean=v.copy(),
        flat_cov=zeros.copy(),
        stat_history=[(v.copy(), zeros.copy())],
    )


@dataclass
class PrototypeBank:
    dim: int
    config: BankConfig = field(default_factory=BankConfig)
    histories: Dict[int, ClassHistory] = field(default_factory=dict)
    current_session: int = 0
    flat_epoch: Optional[Tuple[int, int]] = None

    def __len__(self) -> int:
        return len(self.histories)

    def class_ids(self) -> List[int]:
        return sorted(self.histories)

    def add_class(self, class_id: int, vector, session: int) -> ClassHistory:
        if class_id in self.histories:
            raise ContractViolation(f"class {class_id} already has a bank slot")
        h = new_history(class_id, vector, session)
        if h.prototype.size != self.dim:
            raise ContractViolation(f"prototype has {h.prototype.size} dims, bank stores {self.dim}")
        self.histories[int(class_id)] = h
        self.current_session = max(self.current_session, int(session))
        return h

    def depth_for(self, history: ClassHistory) -> int:
        return self.config.depth_for(history.session_created)

    def prototype_matrix(self, average_copies: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        ids = self.class_ids()
        if not ids:
            return np.zeros(0, dtype=np.int64), np.zeros((0, self.dim))
        rows = [self.histories[k].mean_copy() if average_copies else self.histories[k].prototype for k in ids]
        return np.asarray(ids, dtype=np.int64), np.stack(rows)

    def classes_before(self, session: int) -> List[int]:
        return [k for k in self.class_ids() if self.histories[k].session_created < session]


def compute_prototype(embeddings) -> np.ndarray:
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim == 1:
        E = E.reshape(1, -1)
    if E.shape[0] == 0:
        raise ContractViolation("cannot build a prototype from zero embeddings")
    return E.mean(axis=0)


def update_running_stats(history: ClassHistory, cfg: BankConfig) -> Stats:
    C = np.stack(history.copies)
    mu = C.mean(axis=0)
    D = C - mu
    cov = D.T @ D / C.shape[0]
    m = cfg.ema_momentum
    new_mu = m * history.running_mean + (1.0 - m) * mu
    new_cov = m * history.running_cov + (1.0 - m) * cov
    return new_mu, 0.5 * (new_cov + new_cov.T)


def kernel_weights(kernel: SmoothingKernel, n: int) -> np.ndarray:
    """Normalized weights over n history positions, oldest first; distance is the gap to the newest."""
    if n < 1:
        raise ContractViolation("kernel needs at least one position")
    gap = np.arange(n - 1, -1, -1, dtype=np.float64)
    if kernel.kind == "delta":
        w = (gap == 0).astype(np.float64)
    elif kernel.kind == "uniform":
        w = np.ones(n)
    else:
        w = np.exp(-0.5 * (gap / kernel.bandwidth) ** 2)
    return w / w.sum()


def smooth_history(history: ClassHistory, kernel: SmoothingKernel) -> Stats:
    w = kernel_weights(kernel, len(history.stat_history))
    mu = sum(wi * m for wi, (m, _) in zip(w, history.stat_history))
    cov = sum(wi * s for wi, (_, s) in zip(w, history.stat_history))
    return np.asarray(mu), 0.5 * (np.asarray(cov) + np.asarray(cov).T)


def smooth_stats(histories: Sequence[ClassHistory], kernel: SmoothingKernel) -> Dict[int, Stats]:
    if not histories:
        raise ContractViolation("smooth_stats needs at least one class history")
    return {h.class_id: smooth_history(h, kernel) for h in histories}


def whiten_recolor(c, mu, cov, flat_mu, flat_cov, ridge: float) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    A = psd_sqrt(flat_cov, ridge) @ psd_inv_sqrt(cov, ridge)
    return A @ (c - np.asarray(mu)) + np.asarray(flat_mu)


def correlation_loss(prototypes) -> Tuple[float, np.ndarray]:
    """Sum over ordered pairs i != j of sigmoid(cos(tanh c_i, tanh c_j)), with gradients per prototype."""
    C = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    n = C.shape[0] if C.size else 0
    if n < 2:
        return 0.0, np.zeros_like(C)
    U = np.tanh(C)
    unit, norms = unit_rows(U)
    S = unit @ unit.T
    off = ~np.eye(n, dtype=bool)
    sig = sigmoid(S)
    loss = float(sig[off].sum())
    # S is symmetric so each unordered pair contributes twice
    G = np.where(off, 2.0 * sig * (1.0 - sig), 0.0)
    dU = (G @ unit - (G * S).sum(axis=1)[:, None] * unit) / norms[:, None]
    return loss, dU * (1.0 - U ** 2)


def cosine_anchor_loss(current, initial) -> Tuple[float, np.ndarray]:
    """Sum of cos(tanh c_i, tanh c_i^0); gradients with respect to the current prototypes only."""
    C = np.atleast_2d(np.asarray(current, dtype=np.float64))
    F = np.atleast_2d(np.asarray(initial, dtype=np.float64))
    if C.shape != F.shape:
        raise ContractViolation(f"{C.shape[0]} current prototypes vs {F.shape[0]} footprints")
    U = np.tanh(C)
    V = np.tanh(F)
    u, nu = unit_rows(U)
    v, _ = unit_rows(V)
    cos = (u * v).sum(axis=1)
    dU = (v - cos[:, None] * u) / nu[:, None]
    return float(cos.sum()), dU * (1.0 - U ** 2)


def refine_prototypes(current, footprints, cfg: BankConfig) -> Tuple[np.ndarray, float, float]:
    """One gradient step on L_COR + anchor_sign * L_CS; returns (prototypes, L_COR, L_CS)."""
    C = np.atleast_2d(np.asarray(current, dtype=np.float64))
    l_cor, g_cor = correlation_loss(C)
    l_cs, g_cs = cosine_anchor_loss(C, footprints)
    if cfg.lam == 0:
        return C.copy(), l_cor, l_cs
    return C - cfg.lam * (g_cor + cfg.anchor_sign * g_cs), l_cor, l_cs


def _push(items: List, item, depth: int) -> None:
    items.append(item)
    while len(items) > depth:
        items.pop(0)


def calibrate_and_update(bank: PrototypeBank, cfg: Optional[BankConfig] = None,
                         epoch: Optional[Tuple[int, int]] = None) -> PrototypeBank:
    """Running stats -> smoothing -> whiten/re-color -> refinement -> append copy, per stored class.

    Flattened statistics are refreshed only when `epoch` differs from the last refresh; passing
    None refreshes on every call.
    """
    cfg = cfg or bank.config
    ids = bank.class_ids()
    if not ids:
        return bank
    histories = [bank.histories[k] for k in ids]
    for h in histories:
        h.running_mean, h.running_cov = update_running_stats(h, cfg)

    if epoch is None or epoch != bank.flat_epoch:
        for h in histories:
            _push(h.stat_history, (h.running_mean.copy(), h.running_cov.copy()), bank.depth_for(h))
        for class_id, (mu, cov) in smooth_stats(histories, cfg.kernel).items():
            bank.histories[class_id].flat_mean = mu
            bank.histories[class_id].flat_cov = cov
        bank.flat_epoch = epoch

    recolored = np.stack([
        whiten_recolor(h.prototype, h.running_mean, h.running_cov, h.flat_mean, h.flat_cov, cfg.ridge)
        for h in histories
    ])
    footprints = np.stack([h.footprint for h in histories])
    refined, _, _ = refine_prototypes(recolored, footprints, cfg)
    for h, row in zip(histories, refined):
        _push(h.copies, row, bank.depth_for(h))
    return bank


def budget_formula(session_sizes: Sequence[int], depths: Sequence[int]) -> int:
    if len(session_sizes) != len(depths):
        raise ContractViolation("one retention depth per session is required")
    return int(sum(int(n) * int(d) for n, d in zip(session_sizes, depths)))


def memory_budget(bank: PrototypeBank) -> MemoryReport:
    by_session: Dict[int, int] = {}
    for h in bank.histories.values():
        by_session[h.session_created] = by_session.get(h.session_created, 0) + 1
    sessions = sorted(by_session)
    k = budget_formula([by_session[s] for s in sessions], [bank.config.depth_for(s) for s in sessions])
    stored = sum(h.depth for h in bank.histories.values())
    return MemoryReport(prototype_vectors=k, stat_means=k, stat_matrices=k, stored_vectors=stored)


def _write_vec(f: BinaryIO, v: np.ndarray) -> None:
    f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataIOError("truncated bank snapshot")
    return data


def _read_vec(f: BinaryIO, n: int) -> np.ndarray:
    return np.frombuffer(_read_exact(f, 8 * n), dtype="<f8").astype(np.float64)


def save_bank(path: str, bank: PrototypeBank) -> None:
    """PQBANK1 | u32 classes, u32 dim, u32 session | per class: u32 id, u32 session, u32 copies, copies, footprint, mu, cov."""
    try:
        with open(path, "wb") as f:
            f.write(BANK_MAGIC)
            f.write(struct.pack("<III", len(bank), bank.dim, bank.current_session))
            for k in bank.class_ids():
                h = bank.histories[k]
                f.write(struct.pack("<III", h.class_id, h.session_created, h.depth))
                for c in h.copies:
                    _write_vec(f, c)
                _write_vec(f, h.footprint)
                _write_vec(f, h.running_mean)
                _write_vec(f, h.running_cov.ravel())
    except OSError as e:
        raise DataIOError(f"cannot write bank snapshot {path}: {e}")


def load_bank(path: str, cfg: Optional[BankConfig] = None) -> PrototypeBank:
    try:
        with open(path, "rb") as f:
            if f.read(len(BANK_MAGIC)) != BANK_MAGIC:
                raise DataIOError(f"{path} is not a PQBANK1 snapshot")
            n, dim, session = struct.unpack("<III", _read_exact(f, 12))
            bank = PrototypeBank(dim=dim, config=cfg or BankConfig(), current_session=session)
            for _ in range(n):
                class_id, created, depth = struct.unpack("<III", _read_exact(f, 12))
                copies = [_read_vec(f, dim) for _ in range(depth)]
                h = new_history(class_id, _read_vec(f, dim), created)
                h.copies = copies
                h.running_mean = _read_vec(f, dim)
                h.running_cov = _read_vec(f, dim * dim).reshape(dim, dim)
                h.flat_mean = h.running_mean.copy()
                h.flat_cov = h.running_cov.copy()
                h.stat_history = [(h.running_mean.copy(), h.running_cov.copy())]
                bank.histories[class_id] = h
    except DataIOError:
        raise
    except OSError as e:
        raise DataIOError(f"cannot read bank snapshot {path}: {e}")
    return bank
