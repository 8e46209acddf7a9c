import math

import numpy as np
import pytest

from logic.bank import PrototypeBank, compute_prototype
from logic.errors import ContractViolation, NumericalFailure
from logic.extractor import MlpParams, embed, init_head, init_mlp
from logic.linalg import make_rng
from logic.models import (
    BankConfig,
    EpisodeConfig,
    LossMode,
    Margins,
    SgdConfig,
    SmoothingKernel,
    StreamConfig,
    TrainPlan,
)
from logic.sampler import Episode, SessionDataset, SessionStream, make_session_stream, sample_episode
from logic.trainer import (
    _check_loss,
    episode_nll,
    quadruplet_terms,
    run_base_session,
    run_incremental_session,
    run_stream,
)


def _plan(**kw) -> TrainPlan:
    base = dict(
        base_epochs=3,
        incremental_epochs=2,
        episodes_per_epoch=3,
        batch_size=16,
        base_sgd=SgdConfig(initial_lr=0.1),
        sgd=SgdConfig(initial_lr=0.05),
    )
    base.update(kw)
    return TrainPlan(**base)


def _small_stream(seed: int = 0, sessions: int = 2) -> SessionStream:
    cfg = StreamConfig(base_classes=4, sessions=sessions, n_way=3, k_shot=5, input_dim=6, separation=6.0,
                       base_train_per_class=15, test_per_class=5)
    return make_session_stream(cfg, make_rng(seed))


def test_quadruplet_terms_hand_example() -> None:
    zq, kp, kn, knn = np.zeros(2), np.array([0.0, 1.0]), np.array([3.0, 0.0]), np.array([3.0, 4.0])
    assert quadruplet_terms(zq, kp, kn, knn, Margins(alpha1=1.0, alpha2=0.5)).g == 0.0
    assert quadruplet_terms(zq, kp, kn, knn, Margins(alpha1=3.0, alpha2=0.5)).g == pytest.approx(1.0, abs=1e-15)


def test_quadruplet_terms_zero_when_margins_hold() -> None:
    c = np.array([1.0, 1.0])
    terms = quadruplet_terms(c, c, np.array([10.0, 1.0]), np.array([10.0, 20.0]), Margins())
    assert terms.g == 0.0
    assert not terms.grad_zq.any()


def test_unclamped_terms_can_go_negative() -> None:
    zq, kp, kn, knn = np.zeros(2), np.array([0.0, 1.0]), np.array([3.0, 0.0]), np.array([3.0, 4.0])
    literal = quadruplet_terms(zq, kp, kn, knn, Margins(), hinge=False)
    assert literal.g == pytest.approx((1 - 3 + 1) + (1 - 4 + 0.5), abs=1e-12)


def test_triplet_mode_ignores_second_negative(rng: np.random.Generator) -> None:
    zq, kp, kn = rng.standard_normal((3, 4))
    a = quadruplet_terms(zq, kp, kn, rng.standard_normal(4), Margins(), LossMode.triplet)
    b = quadruplet_terms(zq, kp, kn, rng.standard_normal(4), Margins(), LossMode.triplet)
    assert a.g == b.g
    assert a.g == pytest.approx(max(np.linalg.norm(zq - kp) - np.linalg.norm(zq - kn) + 1.0, 0.0), abs=1e-12)


def test_quadruplet_gradients_match_finite_differences(rng: np.random.Generator) -> None:
    h = 1e-5
    for mode in LossMode:
        for hinge in (True, False):
            for _ in range(20):
                pts = rng.standard_normal((4, 8))
                m = Margins(alpha1=1.5, alpha2=1.0)
                t = quadruplet_terms(*pts, m, mode, hinge)
                for slot, grad in enumerate((t.grad_zq, t.grad_kp, t.grad_kn, t.grad_knn)):
                    numeric = np.zeros(8)
                    for j in range(8):
                        up, down = pts.copy(), pts.copy()
                        up[slot, j] += h
                        down[slot, j] -= h
                        numeric[j] = (quadruplet_terms(*up, m, mode, hinge).g
                                      - quadruplet_terms(*down, m, mode, hinge).g) / (2 * h)
                    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-6)


def test_quadruplet_terms_reject_mixed_dimensions() -> None:
    with pytest.raises(ContractViolation):
        quadruplet_terms(np.zeros(2), np.zeros(2), np.zeros(3), np.zeros(2), Margins())


def _episode_fixture(rng: np.random.Generator, n_classes: int = 3):
    stream = _small_stream()
    params = init_mlp([6, 8, 8], rng)
    for b in params.biases:
        b[:] = 0.1 * rng.standard_normal(b.shape)
    data = stream.sessions[1]
    bank = PrototypeBank(dim=8, config=BankConfig())
    base = stream.sessions[0]
    for k in base.label_set:
        bank.add_class(k, compute_prototype(embed(params, base.features[base.indices_of(k)])), 1)
    ep = sample_episode(data, params, bank, rng, EpisodeConfig(n_classes=n_classes, n_support=3, n_query=2))
    return data, params, ep


def test_single_class_episode_has_zero_loss(rng: np.random.Generator) -> None:
    data, params, ep = _episode_fixture(rng, n_classes=1)
    loss, _ = episode_nll(ep, data, params, Margins(alpha1=5.0, alpha2=5.0))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_symmetric_two_class_episode() -> None:
    # class 0 queries at (-1, 0), class 1 at (1, 0); identity network, mirrored prototypes
    params = MlpParams([np.eye(2)], [np.zeros(2)])
    X = np.array([[-1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    data = SessionDataset(2, X, np.array([0, 0, 1, 1]), (0, 1))
    positive = np.array([[-1.0, 0.5], [1.0, 0.5]])
    negative = np.array([[1.0, 0.5], [-1.0, 0.5]])
    negative2 = np.array([[0.0, 3.0], [0.0, 3.0]])
    ep = Episode((0, 1), {0: np.array([0]), 1: np.array([2])}, {0: np.array([1]), 1: np.array([3])}, {},
                 positive, negative, negative2)
    m = Margins(alpha1=3.0, alpha2=3.0)
    g_own = quadruplet_terms(X[1], positive[0], negative[0], negative2[0], m).g
    g_other = quadruplet_terms(X[1], positive[1], negative[1], negative2[1], m).g
    loss, _ = episode_nll(ep, data, params, m)
    assert loss == pytest.approx(g_own + math.log(math.exp(-g_own) + math.exp(-g_other)), abs=1e-12)


@pytest.mark.parametrize("hinge", [True, False])
def test_episode_gradient_matches_finite_differences(rng: np.random.Generator, hinge: bool) -> None:
    h = 1e-5
    m = Margins(alpha1=4.0, alpha2=3.0)
    for _ in range(20):
        data, params, ep = _episode_fixture(rng)
        _, grads = episode_nll(ep, data, params, m, hinge=hinge)
        for layer in range(params.layer_count):
            for arr, garr in ((params.weights[layer], grads.weights[layer]), (params.biases[layer], grads.biases[layer])):
                for _ in range(2):
                    idx = tuple(rng.integers(0, s) for s in arr.shape)
                    old = arr[idx]
                    arr[idx] = old + h
                    up = episode_nll(ep, data, params, m, hinge=hinge)[0]
                    arr[idx] = old - h
                    down = episode_nll(ep, data, params, m, hinge=hinge)[0]
                    arr[idx] = old
                    assert garr[idx] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-8)



def test_loss_bound_check() -> None:
    _check_loss(0.3, 3, True, 2, 0, 0)
    with pytest.raises(NumericalFailure) as info:
        _check_loss(float("nan"), 3, True, 2, 4, 7)
    assert (info.value.session, info.value.epoch, info.value.episode) == (2, 4, 7)
    with pytest.raises(NumericalFailure):
        _check_loss(-math.log(3) - 0.1, 3, True, 2, 0, 0)
    _check_loss(-5.0, 3, False, 2, 0, 0)


def test_zero_epoch_base_session_keeps_untrained_prototypes(rng: np.random.Generator) -> None:
    stream = _small_stream()
    params = init_mlp([6, 8, 5], rng)
    head = init_head(stream.total_classes, 5, rng)
    trained, _, bank, _ = run_base_session(stream.sessions[0], params, head, _plan(base_epochs=0), rng)
    data = stream.sessions[0]
    for k in data.label_set:
        expected = compute_prototype(embed(params, data.features[data.indices_of(k)]))
        np.testing.assert_array_equal(bank.histories[k].footprint, expected)
        np.testing.assert_array_equal(bank.histories[k].prototype, expected)


def test_base_session_learns_separable_blobs() -> None:
    cfg = StreamConfig(base_classes=3, sessions=0, n_way=1, input_dim=8, separation=12.0, base_train_per_class=40)
    stream = make_session_stream(cfg, make_rng(2))
    rng = make_rng(3)
    params = init_mlp([8, 16, 8], rng)
    head = init_head(3, 8, rng)
    plan = _plan(base_epochs=50, base_sgd=SgdConfig(initial_lr=0.1))
    params, head, _, _ = run_base_session(stream.sessions[0], params, head, plan, rng)
    data = stream.sessions[0]
    predicted = np.argmax(embed(params, data.features) @ head.W.T, axis=1)
    assert (predicted == data.labels).mean() >= 0.95


def test_frozen_incremental_session_only_adds_classes() -> None:
    stream = _small_stream()
    rng = make_rng(4)
    params = init_mlp([6, 8, 5], rng)
    head = init_head(stream.total_classes, 5, rng)
    frozen_bank = BankConfig(lam=0.0, ema_momentum=1.0, kernel=SmoothingKernel(kind="delta"))
    plan = _plan(bank=frozen_bank, trainable_fraction=1e-9)
    params, head, bank, _ = run_base_session(stream.sessions[0], params, head, plan, rng)
    before = {k: bank.histories[k].prototype.copy() for k in bank.class_ids()}
    snapshot = params.copy()

    params, bank, log = run_incremental_session(stream.sessions[1], params, bank, plan, rng)
    assert log.trainable == 0
    for a, b in zip(snapshot.weights + snapshot.biases, params.weights + params.biases):
        np.testing.assert_array_equal(a, b)
    for k, v in before.items():
        np.testing.assert_allclose(bank.histories[k].prototype, v, atol=1e-9)
    assert bank.class_ids() == sorted(list(before) + list(stream.sessions[1].label_set))


def test_incremental_session_changes_exactly_the_masked_parameters() -> None:
    stream = _small_stream()
    rng = make_rng(5)
    params = init_mlp([6, 8, 5], rng)
    head = init_head(stream.total_classes, 5, rng)
    plan = _plan(trainable_fraction=0.1)
    params, head, bank, _ = run_base_session(stream.sessions[0], params, head, plan, rng)
    snapshot = params.copy()
    params, bank, log = run_incremental_session(stream.sessions[1], params, bank, plan, rng)
    for i in range(params.layer_count):
        changed = snapshot.layer_flat(i) != params.layer_flat(i)
        masked = log.mask.layer_flat(i)
        assert not (changed & ~masked).any()
        # weight decay moves every trainable entry that is not already zero
        live = snapshot.layer_flat(i) != 0
        np.testing.assert_array_equal(changed[live], masked[live])
    assert len(bank) == 7


def test_diverging_base_session_raises_numerical_failure() -> None:
    stream = _small_stream()
    rng = make_rng(6)
    params = init_mlp([6, 8, 5], rng)
    head = init_head(stream.total_classes, 5, rng)
    plan = _plan(base_sgd=SgdConfig(initial_lr=1e200))
    with pytest.raises(NumericalFailure) as info:
        run_base_session(stream.sessions[0], params, head, plan, rng)
    assert info.value.session == 1



def test_run_stream_bookkeeping_and_determinism() -> None:
    stream = _small_stream(sessions=2)
    plan = _plan(seed=11)
    first = run_stream(stream, plan)
    second = run_stream(stream, plan)
    report = first.report
    assert report.to_json() == second.report.to_json()
    assert report.sessions == 3
    assert [len(row) for row in report.accuracy] == [1, 2, 3]
    assert all(0.0 <= a <= 1.0 for a in report.cumulative)
    assert report.bwt is not None
    assert len(first.bank) == 10
    assert report.memory.prototype_vectors == 4 * 3 + 3 * 2 + 3 * 1


def test_single_session_stream_reports_base_accuracy_only() -> None:
    stream = _small_stream(sessions=0)
    report = run_stream(stream, _plan()).report
    assert report.sessions == 1
    assert report.cumulative == [report.accuracy[0][0]]
    assert report.bwt is None


def test_finetune_baseline_has_no_bank() -> None:
    stream = _small_stream(sessions=1)
    result = run_stream(stream, _plan(baseline="finetune"))
    assert result.bank is None
    assert result.report.method == "finetune"
    assert result.report.memory.prototype_vectors == 0
    assert len(result.report.accuracy) == 2


def test_run_stream_propagates_numerical_failure() -> None:
    stream = _small_stream(sessions=1)
    plan = _plan(sgd=SgdConfig(initial_lr=1e200), incremental_epochs=3, episodes_per_epoch=5)
    with pytest.raises(NumericalFailure):
        run_stream(stream, plan)
