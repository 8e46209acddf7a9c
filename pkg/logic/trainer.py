import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from logic.bank import PrototypeBank, calibrate_and_update, compute_prototype, memory_budget
from logic.errors import ContractViolation, NumericalFailure
from logic.evaluation import HeadPredictor, NcmPredictor, backward_transfer, session_accuracy
from logic.extractor import (
    FreezeMask,
    MlpGrads,
    MlpParams,
    OutputHead,
    backward,
    cross_entropy_loss,
    embed,
    forward,
    head_logits,
    init_head,
    init_mlp,
    learning_rate,
    select_freeze_mask,
    sgd_step,
    sgd_step_head,
)
from logic.linalg import euclidean_distance, logsumexp, make_rng, softmax
from logic.logs import log_event
from logic.models import LossMode, Margins, MemoryReport, NetworkConfig, RunReport, SgdConfig, TrainPlan
from logic.sampler import Episode, SessionDataset, SessionStream, sample_episode

INIT_STREAM = 1
TRAIN_STREAM = 2


@dataclass
class QuadTerms:
    g: float
    grad_zq: np.ndarray
    grad_kp: np.ndarray
    grad_kn: np.ndarray
    grad_knn: np.ndarray


@dataclass
class SessionLog:
    session: int
    mean_loss: float
    steps: int
    trainable: int
    mask: Optional[FreezeMask] = None


def _dist(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray]:
    d = euclidean_distance(a, b)
    return d, ((a - b) / d if d > 0 else np.zeros_like(a))


def quadruplet_terms(zq, c_kp, c_kn, c_knn, m: Margins, mode: LossMode = LossMode.quadruplet,
                     hinge: bool = True) -> QuadTerms:
    zq, c_kp, c_kn, c_knn = (np.asarray(v, dtype=np.float64) for v in (zq, c_kp, c_kn, c_knn))
    if not zq.shape == c_kp.shape == c_kn.shape == c_knn.shape:
        raise ContractViolation("query embedding and prototypes must share one dimension")
    dp, up = _dist(zq, c_kp)
    dn, un = _dist(zq, c_kn)

    if mode == LossMode.contrastive:
        push = max(m.alpha1 - dn, 0.0)
        diff = zq - c_kp
        return QuadTerms(
            g=dp * dp + push * push,
            grad_zq=2.0 * diff - 2.0 * push * un,
            grad_kp=-2.0 * diff,
            grad_kn=2.0 * push * un,
            grad_knn=np.zeros_like(zq),
        )

    r1 = dp - dn + m.alpha1
    a1 = 1.0 if (r1 > 0 or not hinge) else 0.0
    d1 = r1 * a1
    if mode == LossMode.triplet:
        a2, d2, unn = 0.0, 0.0, np.zeros_like(zq)
    else:
        dnn, unn = _dist(c_kn, c_knn)
        r2 = dp - dnn + m.alpha2
        a2 = 1.0 if (r2 > 0 or not hinge) else 0.0
        d2 = r2 * a2
    return QuadTerms(
        g=d1 + d2,
        grad_zq=a1 * (up - un) + a2 * up,
        grad_kp=-(a1 + a2) * up,
        grad_kn=a1 * un - a2 * unn,
        grad_knn=a2 * unn,
    )


def episode_nll(episode: Episode, data: SessionDataset, params: MlpParams, m: Margins,
                mode: LossMode = LossMode.quadruplet, hinge: bool = True) -> Tuple[float, MlpGrads]:
    """Mean negative log posterior over the episode's queries; prototypes are held constant."""
    owners, rows = [], []
    for i, k in enumerate(episode.classes):
        for idx in episode.query[k]:
            owners.append(i)
            rows.append(idx)
    Z, cache = forward(params, data.features[np.asarray(rows)])
    n_cls = len(episode.classes)
    total = len(rows)
    G = np.zeros_like(Z)
    loss = 0.0
    for r, i in enumerate(owners):
        terms = [quadruplet_terms(Z[r], *episode.triple(j), m, mode, hinge) for j in range(n_cls)]
        g = np.array([t.g for t in terms])
        if not np.all(np.isfinite(g)):
            return float("nan"), MlpGrads.zeros_like(params)
        p = softmax(-g)
        loss += g[i] + logsumexp(-g)
        coef = -p
        coef[i] += 1.0
        G[r] = sum(c * t.grad_zq for c, t in zip(coef, terms)) / total
    return loss / total, backward(params, cache, G)


def _check_loss(loss: float, n_cls: int, hinge: bool, session: int, epoch: int, episode: int) -> None:
    if not math.isfinite(loss):
        raise NumericalFailure(f"non-finite episode loss {loss}", session, epoch, episode, loss)
    if hinge and loss < -math.log(n_cls) - 1e-9:
        raise NumericalFailure(f"episode loss {loss} below -log({n_cls})", session, epoch, episode, loss)


def _ema(prev: Optional[float], value: float, momentum: float) -> float:
    return value if prev is None else momentum * prev + (1.0 - momentum) * value


def _ce_epochs(data: SessionDataset, params: MlpParams, head: OutputHead, epochs: int, batch_size: int,
               sgd: SgdConfig, rng: np.random.Generator, session: int, mode: str) -> Tuple[MlpParams, OutputHead, float, int]:
    mask = FreezeMask.all_trainable(params)
    n = len(data)
    smoothed, steps, total = None, 0, 0.0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            Z, cache = forward(params, data.features[batch])
            logits = head_logits(head, Z)
            if not np.all(np.isfinite(logits)):
                raise NumericalFailure("non-finite logits", session, epoch, steps, float("nan"))
            loss, g_logits = cross_entropy_loss(logits, data.labels[batch])
            if not math.isfinite(loss):
                raise NumericalFailure(f"non-finite cross-entropy {loss}", session, epoch, steps, loss)
            grads = backward(params, cache, g_logits @ head.W)
            params = sgd_step(params, grads, mask, epoch, sgd)
            head = sgd_step_head(head, g_logits.T @ Z, epoch, sgd)
            smoothed = _ema(smoothed, loss, sgd.momentum_stat)
            total += loss
            steps += 1
        log_event("epoch_done", session=session, mode=mode, epoch=epoch, loss=smoothed or 0.0,
                  lr=learning_rate(epoch, sgd))
    return params, head, (total / steps if steps else 0.0), steps


def install_prototypes(bank: PrototypeBank, data: SessionDataset, params: MlpParams) -> None:
    for k in data.label_set:
        bank.add_class(k, compute_prototype(embed(params, data.features[data.indices_of(k)])), data.session_index)


def run_base_session(data: SessionDataset, params: MlpParams, head: OutputHead, plan: TrainPlan,
                     rng: np.random.Generator) -> Tuple[MlpParams, OutputHead, PrototypeBank, SessionLog]:
    log_event("session_start", session=data.session_index, mode="base", classes=len(data.label_set), samples=len(data))
    params, head, mean_loss, steps = _ce_epochs(
        data, params, head, plan.base_epochs, plan.batch_size, plan.base_sgd, rng, data.session_index, "base"
    )
    bank = PrototypeBank(dim=params.embedding_dim, config=plan.bank)
    install_prototypes(bank, data, params)
    log_event("session_done", session=data.session_index, mode="base", loss=mean_loss, steps=steps)
    return params, head, bank, SessionLog(data.session_index, mean_loss, steps, FreezeMask.all_trainable(params).trainable_count())


def run_incremental_session(data: SessionDataset, params: MlpParams, bank: PrototypeBank, plan: TrainPlan,
                            rng: np.random.Generator) -> Tuple[MlpParams, PrototypeBank, SessionLog]:
    t = data.session_index
    mask = select_freeze_mask(params, plan.trainable_fraction)
    mode = plan.loss_mode.value
    log_event("session_start", session=t, mode=mode, classes=len(data.label_set), samples=len(data),
              trainable=mask.trainable_count())
    smoothed, total, steps = None, 0.0, 0
    for epoch in range(plan.incremental_epochs):
        for ep in range(plan.episodes_per_epoch):
            episode = sample_episode(data, params, bank, rng, plan.episode)
            loss, grads = episode_nll(episode, data, params, plan.margins, plan.loss_mode, plan.hinge)
            try:
                _check_loss(loss, len(episode.classes), plan.hinge, t, epoch, ep)
            except NumericalFailure as e:
                log_event("numerical_failure", session=t, mode=mode, epoch=epoch, episode=ep,
                          classes=",".join(str(k) for k in episode.classes), err=e)
                raise
            params = sgd_step(params, grads, mask, epoch, plan.sgd)
            rounds = sum(len(q) for q in episode.query.values()) if plan.calibrate_per_query else 1
            for _ in range(rounds):
                calibrate_and_update(bank, plan.bank, epoch=(t, epoch))
            smoothed = _ema(smoothed, loss, plan.sgd.momentum_stat)
            total += loss
            steps += 1
        log_event("epoch_done", session=t, mode=mode, epoch=epoch, loss=smoothed or 0.0,
                  lr=learning_rate(epoch, plan.sgd))
    install_prototypes(bank, data, params)
    mean_loss = total / steps if steps else 0.0
    log_event("session_done", session=t, mode=mode, loss=mean_loss, steps=steps, classes_total=len(bank))
    return params, bank, SessionLog(t, mean_loss, steps, mask.trainable_count(), mask)


def run_finetune_session(data: SessionDataset, params: MlpParams, head: OutputHead, plan: TrainPlan,
                         rng: np.random.Generator) -> Tuple[MlpParams, OutputHead, SessionLog]:
    log_event("session_start", session=data.session_index, mode="finetune", classes=len(data.label_set))
    params, head, mean_loss, steps = _ce_epochs(
        data, params, head, plan.incremental_epochs, plan.batch_size, plan.sgd, rng, data.session_index, "finetune"
    )
    log_event("session_done", session=data.session_index, mode="finetune", loss=mean_loss, steps=steps)
    return params, head, SessionLog(data.session_index, mean_loss, steps, FreezeMask.all_trainable(params).trainable_count())


@dataclass
class RunResult:
    report: RunReport
    params: MlpParams
    head: OutputHead
    bank: Optional[PrototypeBank]
    mask: FreezeMask
    logs: List[SessionLog]


def run_stream(stream: SessionStream, plan: TrainPlan, network: Optional[NetworkConfig] = None,
               classify_avg_copies: bool = False, threads: int = 1,
               config_echo: Optional[Dict[str, Any]] = None) -> RunResult:
    network = network or NetworkConfig()
    finetune = plan.baseline == "finetune"
    method = "finetune" if finetune else plan.loss_mode.value
    init_rng = make_rng(plan.seed, INIT_STREAM)
    rng = make_rng(plan.seed, TRAIN_STREAM)
    params = init_mlp([stream.input_dim] + list(network.hidden) + [network.embedding_dim], init_rng)
    head = init_head(stream.total_classes, network.embedding_dim, init_rng)
    log_event("run_start", mode=method, sessions=len(stream.sessions), classes=stream.total_classes, seed=plan.seed)

    bank: Optional[PrototypeBank] = None
    mask = FreezeMask.all_trainable(params)
    logs: List[SessionLog] = []
    accuracy: List[List[Optional[float]]] = []
    cumulative: List[float] = []
    seen: List[int] = []
    for data in stream.sessions:
        t = data.session_index
        if t == 1:
            params, head, bank, log = run_base_session(data, params, head, plan, rng)
        elif finetune:
            params, head, log = run_finetune_session(data, params, head, plan, rng)
        else:
            params, bank, log = run_incremental_session(data, params, bank, plan, rng)
            mask = log.mask
        logs.append(log)
        seen.extend(data.label_set)
        if finetune:
            predictor = HeadPredictor(head, seen)
        else:
            predictor = NcmPredictor(bank, classify_avg_copies)
        acc = session_accuracy(predictor, params, stream.tests[:t], threads=threads)
        accuracy.append(acc.per_split)
        cumulative.append(acc.pooled)
        log_event("eval_done", session=t, mode=method, accuracy=acc.pooled)

    if finetune:
        bank = None
        memory = MemoryReport(prototype_vectors=0, stat_means=0, stat_matrices=0, stored_vectors=0)
    else:
        memory = memory_budget(bank)
    report = RunReport(
        method=method,
        seed=plan.seed,
        sessions=len(stream.sessions),
        accuracy=accuracy,
        cumulative=cumulative,
        bwt=backward_transfer(accuracy),
        memory=memory,
        config=config_echo if config_echo is not None else {"plan": plan.model_dump(mode="json", by_alias=True)},
    )
    return RunResult(report, params, head, bank, mask, logs)
