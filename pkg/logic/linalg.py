from typing import Tuple

import numpy as np
from scipy import special

from logic.errors import ContractViolation
from logic.logs import log_event

SYMMETRY_RTOL = 1e-9
COSINE_EPS = 1e-300


def as_vec(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ContractViolation(f"{name} must be 1-D, got shape {v.shape}")
    return v


def _same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"dimension mismatch: {a.shape} vs {b.shape}")


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


def euclidean_distance(a, b) -> float:
    a = as_vec(a, "a")
    b = as_vec(b, "b")
    _same_length(a, b)
    return float(np.linalg.norm(a - b))


def pairwise_distances(A, B) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ContractViolation(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    return np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=2))


def cosine_similarity_checked(a, b) -> Tuple[float, bool]:
    """Returns (similarity, degenerate); degenerate is True when either norm is zero."""
    a = as_vec(a, "a")
    b = as_vec(b, "b")
    _same_length(a, b)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= COSINE_EPS or nb <= COSINE_EPS:
        return 0.0, True
    value = float(np.dot(a, b) / (na * nb))
    return float(np.clip(value, -1.0, 1.0)), False


def cosine_similarity(a, b) -> float:
    value, degenerate = cosine_similarity_checked(a, b)
    if degenerate:
        log_event("cosine_zero_norm", dim=len(np.asarray(a)))
    return value


def unit_rows(U) -> Tuple[np.ndarray, np.ndarray]:
    """Row-normalised copy of U and the norms used; zero rows stay zero and are logged."""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    norms = np.linalg.norm(U, axis=1)
    zero = norms <= COSINE_EPS
    if zero.any():
        log_event("cosine_zero_norm", dim=U.shape[1], rows=int(zero.sum()))
    safe = np.where(zero, 1.0, norms)
    return U / safe[:, None] * (~zero)[:, None], safe


def is_symmetric(A: np.ndarray) -> bool:
    tol = SYMMETRY_RTOL * np.maximum(1.0, np.abs(A))
    return bool(np.all(np.abs(A - A.T) <= tol))


def _as_symmetric(A, name: str = "matrix") -> np.ndarray:
    m = np.asarray(A, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractViolation(f"{name} must be square, got shape {m.shape}")
    if not is_symmetric(m):
        raise ContractViolation(f"{name} is not symmetric")
    return 0.5 * (m + m.T)


def _eig_ridged(A, ridge: float) -> Tuple[np.ndarray, np.ndarray]:
    m = _as_symmetric(A)
    if ridge < 0:
        raise ContractViolation(f"ridge must be nonnegative, got {ridge}")
    w, Q = np.linalg.eigh(m)
    # round-off can push PSD eigenvalues slightly negative
    w = np.maximum(w, 0.0) + ridge
    return w, Q


def psd_sqrt(A, ridge: float = 0.0) -> np.ndarray:
    w, Q = _eig_ridged(A, ridge)
    B = (Q * np.sqrt(w)) @ Q.T
    return 0.5 * (B + B.T)


def psd_inv_sqrt(A, ridge: float) -> np.ndarray:
    if not ridge > 0:
        raise ContractViolation(f"psd_inv_sqrt needs ridge > 0, got {ridge}")
    w, Q = _eig_ridged(A, ridge)
    B = (Q / np.sqrt(w)) @ Q.T
    return 0.5 * (B + B.T)


def log_softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ContractViolation("log_softmax of an empty array")
    if not np.all(np.isfinite(s)):
        raise ContractViolation("log_softmax input must be finite")
    return special.log_softmax(s, axis=-1)


def softmax(scores) -> np.ndarray:
    return np.exp(log_softmax(scores))


def logsumexp(scores) -> float:
    return float(special.logsumexp(np.asarray(scores, dtype=np.float64)))


def sigmoid(x):
    return special.expit(x)
