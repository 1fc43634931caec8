"""Losses, optimizers, regularizers and update schedules."""
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluidbench.compute import MacMeter
from fluidbench.dataset import GaussianMixtureSpec, synth_gaussian
from fluidbench.heads import FeatureMap, LinearHead, Similarity, log_softmax, softmax
from fluidbench.learners import LearnerSpec, build_learner
from fluidbench.training import (
    EwcState,
    Network,
    SgdState,
    TrainingError,
    UpdateStrategy,
    batch_sizes,
    distillation_term,
    ewc_penalty,
    expected_steps,
    fisher_estimate,
    lwf_loss,
    lwf_loss_and_grad,
    proto_episode_loss,
    run_offline_phase,
    sample_episode,
    scaled_switch_point,
    sgd_step,
    xent_loss_and_grad,
)

from gradcheck import check_params, numeric_grad, rel_error

FIXTURES = range(20)
TOL = 1e-5


def _linear_net(r, d=4, k=3, fmap=None, train_map=False):
    h = LinearHead(d)
    for c in range(k):
        h.admit(c)
    h.W[:] = r.standard_normal((k, d))
    h.b[:] = r.standard_normal(k)
    return Network(fmap or FeatureMap.frozen(d), h, train_map=train_map)


def _relu_mlp(r, sizes):
    layers = [(r.standard_normal((o, i)) / np.sqrt(i), r.uniform(0.2, 0.6, o) * r.choice([-1, 1], o))
              for i, o in zip(sizes[:-1], sizes[1:])]
    return FeatureMap(sizes[0], layers)


class TestCrossEntropy:
    def test_uniform_logits(self):
        for k in (2, 5, 17):
            net = Network(FeatureMap.frozen(3), LinearHead(3))
            for c in range(k):
                net.head.admit(c)
            loss, _ = xent_loss_and_grad(net, np.ones((4, 3)), [0, 1, 0, 1])
            assert loss == pytest.approx(math.log(k), rel=1e-14)

    def test_margin_fifty(self):
        net = Network(FeatureMap.frozen(1), LinearHead(1))
        net.head.admit(0)
        net.head.admit(1)
        net.head.W[:] = [[50.0], [0.0]]
        loss, _ = xent_loss_and_grad(net, [[1.0]], [0])
        assert 0 <= loss < 1e-20

    def test_unknown_label(self):
        net = _linear_net(np.random.default_rng(0))
        with pytest.raises(TrainingError):
            xent_loss_and_grad(net, np.ones((1, 4)), [9])


class TestSgd:
    def test_plain_step(self):
        p = {"w": np.array([1.0])}
        sgd_step(p, {"w": np.array([1.0])}, SgdState(0.1, momentum=0.0))
        assert p["w"][0] == pytest.approx(0.9, abs=1e-15)

    def test_two_momentum_steps(self):
        p = {"w": np.array([0.0])}
        state = SgdState(1.0, 0.9)
        for _ in range(2):
            sgd_step(p, {"w": np.array([1.0])}, state)
        assert p["w"][0] == pytest.approx(-2.9, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(TrainingError):
            sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, SgdState(0.1))

    def test_bad_momentum(self):
        with pytest.raises(TrainingError):
            SgdState(0.1, 1.0)

    def test_velocity_grows_with_rows(self):
        state = SgdState(0.1, 0.9)
        p = {"W": np.ones((2, 3))}
        sgd_step(p, {"W": np.ones((2, 3))}, state)
        p = {"W": np.ones((3, 3))}
        sgd_step(p, {"W": np.ones((3, 3))}, state)
        np.testing.assert_allclose(p["W"][:, 0], [1 - 0.1 * 1.9, 1 - 0.1 * 1.9, 0.9])

    @given(L=st.floats(0.5, 20), m=st.floats(0, 0.95), frac=st.floats(0.05, 0.9),
           x0=st.floats(0.5, 10))
    @settings(max_examples=40)
    def test_quadratic_below_stability_bound(self, L, m, frac, x0):
        # f(x) = L x^2 / 2: heavy-ball converges iff 0 < lr < 2 (1 + m) / L
        lr = frac * 2 * (1 + m) / L
        p = {"x": np.array([x0])}
        state = SgdState(lr, m)
        for _ in range(3000):
            sgd_step(p, {"x": L * p["x"]}, state)
        assert abs(p["x"][0]) < 1e-3 * x0

    def test_quadratic_decreases_strictly_without_momentum(self):
        # with momentum the loss may oscillate on the way down; monotone
        # decrease is the momentum-free case of the same bound
        L = 4.0
        for lr in (0.05, 0.2, 0.45):  # below 2 / L = 0.5
            p = {"x": np.array([3.0])}
            state = SgdState(lr, 0.0)
            losses = []
            for _ in range(50):
                losses.append(0.5 * L * p["x"][0] ** 2)
                sgd_step(p, {"x": L * p["x"]}, state)
            assert all(b < a for a, b in zip(losses, losses[1:]) if a > 1e-300)

    def test_quadratic_diverges_above_bound(self):
        L, m = 2.0, 0.5
        p = {"x": np.array([1.0])}
        state = SgdState(1.05 * 2 * (1 + m) / L, m)
        for _ in range(200):
            sgd_step(p, {"x": L * p["x"]}, state)
        assert abs(p["x"][0]) > 1e3


class TestLwf:
    def test_student_equals_teacher(self, rng):
        Z = rng.standard_normal((5, 4))
        p = softmax(Z / 2.0)
        entropy = float(-(p * np.log(p)).sum(axis=1).mean())
        assert distillation_term(Z, Z, 2.0) == pytest.approx(entropy, rel=1e-12)

    def test_minimum_at_teacher(self, rng):
        T = rng.standard_normal((3, 4))
        base = distillation_term(T, T, 2.0)
        for _ in range(20):
            assert distillation_term(T + rng.standard_normal((3, 4)), T, 2.0) >= base - 1e-12

    def test_infinite_temperature(self, rng):
        S, T = rng.standard_normal((4, 6)) * 5, rng.standard_normal((4, 6)) * 5
        assert distillation_term(S, T, 1e6) == pytest.approx(math.log(6), abs=1e-3)

    def test_fixture_oracle(self):
        S = np.array([[1.0, 0.0, -1.0]])
        T = np.array([[0.5, 0.5, 2.0]])
        pt = np.exp(T[0] / 2) / np.exp(T[0] / 2).sum()
        ps = np.exp(S[0] / 2) / np.exp(S[0] / 2).sum()
        hard = -math.log(math.exp(1) / (math.exp(1) + 1 + math.exp(-1)))
        want = hard - float(np.dot(pt, np.log(ps)))
        assert lwf_loss(S, T, 2.0, [0]) == pytest.approx(want, rel=1e-13)

    def test_empty_intersection_warns(self, rng):
        S = rng.standard_normal((2, 3))
        with pytest.warns(RuntimeWarning):
            loss, _ = lwf_loss_and_grad(S, S, 2.0, [0, 1], [])
        logp = log_softmax(S)
        assert loss == pytest.approx(-(logp[0, 0] + logp[1, 1]) / 2)

    @pytest.mark.parametrize("seed", FIXTURES)
    def test_gradient(self, seed):
        r = np.random.default_rng(seed)
        S = r.standard_normal((5, 6)) * 2
        Tl = r.standard_normal((5, 4)) * 2
        rows = r.integers(0, 6, 5)
        pairs = [(0, 1), (2, 0), (5, 3)]
        T = r.uniform(1, 4)
        _, dS = lwf_loss_and_grad(S, Tl, T, rows, pairs)
        num = numeric_grad(lambda: lwf_loss_and_grad(S, Tl, T, rows, pairs)[0], S)
        assert rel_error(dS, num) < TOL


class TestFisher:
    def test_untrained_parameter_is_zero(self, rng):
        net = _linear_net(rng)
        net.head.admit(3)  # never a label, but it shares the softmax
        fmap = FeatureMap(4, [(rng.standard_normal((4, 4)), -np.ones(4) * 100)])
        net = Network(fmap, net.head, train_map=True)
        F = fisher_estimate(net, rng.standard_normal((10, 4)), rng.integers(0, 4, 10))
        # every hidden unit is dead, so the map and head weights see no gradient
        assert not F["map.W0"].any() and not F["map.b0"].any() and not F["head.W"].any()

    def test_single_sample(self, rng):
        net = _linear_net(rng)
        x, y = rng.standard_normal((1, 4)), [2]
        _, g = xent_loss_and_grad(net, x, y)
        F = fisher_estimate(net, x, y)
        for k in g:
            np.testing.assert_allclose(F[k], g[k] ** 2, rtol=1e-15)

    def test_fifty_samples_brute_force(self, rng):
        fmap = _relu_mlp(rng, [4, 5, 4])
        net = _linear_net(rng, fmap=fmap, train_map=True)
        X, y = rng.standard_normal((50, 4)), rng.integers(0, 3, 50)
        F = fisher_estimate(net, X, y)
        for k, p in net.params().items():
            acc = np.zeros_like(p)
            for i in range(50):
                def logp():
                    return xent_loss_and_grad(net, X[i:i + 1], [y[i]])[0]
                acc += numeric_grad(logp, p) ** 2
            np.testing.assert_allclose(F[k], acc / 50, rtol=1e-5, atol=1e-10)

    def test_empty(self, rng):
        with pytest.raises(TrainingError):
            fisher_estimate(_linear_net(rng), np.zeros((0, 4)), [])


class TestEwc:
    def test_at_anchor(self, rng):
        a = {"w": rng.standard_normal(3)}
        pen, g = ewc_penalty({"w": a["w"].copy()}, EwcState(a, {"w": np.ones(3)}, 5.0))
        assert pen == 0.0 and not g["w"].any()

    def test_zero_fisher(self, rng):
        a = {"w": np.zeros(3)}
        pen, _ = ewc_penalty({"w": rng.standard_normal(3) * 100}, EwcState(a, {"w": np.zeros(3)}))
        assert pen == 0.0

    def test_scalar_case(self):
        state = EwcState({"w": np.array([1.0])}, {"w": np.array([3.0])}, lam=2.0)
        pen, g = ewc_penalty({"w": np.array([1.5])}, state)
        assert pen == pytest.approx(0.75, abs=1e-15)
        assert g["w"][0] == pytest.approx(3.0, abs=1e-15)

    def test_shape_mismatch(self):
        state = EwcState({"w": np.zeros(2)}, {"w": np.zeros(2)})
        with pytest.raises(TrainingError):
            ewc_penalty({"w": np.zeros(3)}, state)

    def test_negative_fisher(self):
        with pytest.raises(TrainingError):
            EwcState({"w": np.zeros(1)}, {"w": -np.ones(1)})

    @pytest.mark.parametrize("seed", FIXTURES)
    def test_gradient(self, seed):
        r = np.random.default_rng(seed)
        params = {"W": r.standard_normal((3, 4)), "b": r.standard_normal(3)}
        state = EwcState({k: r.standard_normal(v.shape) for k, v in params.items()},
                         {k: r.uniform(0, 2, v.shape) for k, v in params.items()}, r.uniform(1, 50))
        _, g = ewc_penalty(params, state)
        assert check_params(lambda: ewc_penalty(params, state)[0], params, g) < TOL


class TestPrototypical:
    def test_near_zero_loss_when_separated(self):
        support = np.array([[[0.0, 0.0]], [[50.0, 0.0]], [[0.0, 50.0]]])
        query = support[:, 0, :]
        loss, _ = proto_episode_loss(FeatureMap.frozen(2), support, query, [0, 1, 2])
        assert loss < 1e-3

    def test_two_way_one_shot_oracle(self):
        support = np.array([[[1.0, 0.0]], [[0.0, 2.0]]])
        query = np.array([[0.0, 0.0], [1.0, 1.0]])
        loss, grads = proto_episode_loss(FeatureMap.frozen(2), support, query, [0, 1])
        # query 0: distances 1 and 2; query 1: distances 1 and sqrt(2)
        l0 = -math.log(math.exp(-1) / (math.exp(-1) + math.exp(-2)))
        l1 = -math.log(math.exp(-math.sqrt(2)) / (math.exp(-1) + math.exp(-math.sqrt(2))))
        assert loss == pytest.approx((l0 + l1) / 2, rel=1e-14)
        assert grads == {}

    def test_empty_support(self):
        with pytest.raises(TrainingError):
            proto_episode_loss(FeatureMap.frozen(2), np.zeros((2, 0, 2)), np.zeros((1, 2)), [0])

    @pytest.mark.parametrize("metric", [Similarity.EUCLIDEAN, Similarity.DOT])
    @pytest.mark.parametrize("seed", FIXTURES)
    def test_gradient_through_mlp(self, seed, metric):
        r = np.random.default_rng(seed)
        fmap = _relu_mlp(r, [3, 6, 4])
        support = r.standard_normal((3, 2, 3)) * 2
        query = r.standard_normal((4, 3)) * 2
        labels = r.integers(0, 3, 4)
        _, g = proto_episode_loss(fmap, support, query, labels, metric)

        def loss():
            return proto_episode_loss(fmap, support, query, labels, metric)[0]
        assert check_params(loss, fmap.params(), g) < TOL

    def test_episode_shapes(self, rng):
        X = rng.standard_normal((60, 3))
        y = np.repeat(np.arange(6), 10)
        s, q, ql = sample_episode(X, y, range(6), 4, 2, 3, rng)
        assert s.shape == (4, 2, 3) and q.shape == (12, 3)
        assert ql.tolist() == [0] * 3 + [1] * 3 + [2] * 3 + [3] * 3


@pytest.mark.parametrize("seed", FIXTURES)
def test_network_xent_gradient_with_mlp(seed):
    r = np.random.default_rng(1000 + seed)
    net = _linear_net(r, d=5, k=4, fmap=_relu_mlp(r, [3, 6, 5]), train_map=True)
    X, y = r.standard_normal((6, 3)), r.integers(0, 4, 6)
    _, g = xent_loss_and_grad(net, X, y)
    assert check_params(lambda: xent_loss_and_grad(net, X, y)[0], net.params(), g) < TOL


# ---------------------------------------------------------------------------
# schedules and offline phases


class TestSchedules:
    def test_offline_due(self):
        s = UpdateStrategy.offline_every(5000, 4)
        assert [p for p in range(0, 20001) if s.offline_due(p)] == [5000, 10000, 15000, 20000]
        assert not s.instance_due(3)

    def test_instance(self):
        s = UpdateStrategy.instance_per_sample()
        assert s.instance_due(1) and not s.offline_due(5000)

    def test_hybrid(self):
        s = UpdateStrategy.hybrid(10, 1)
        assert s.instance_due(7) and s.offline_due(20) and not s.offline_due(21)

    def test_imprint_switch(self):
        s = UpdateStrategy.imprint_then_finetune(switch_at=100, interval=50)
        assert s.instance_due(99) and not s.instance_due(100)
        assert [p for p in range(0, 300) if s.offline_due(p)] == [100, 150, 200, 250]

    def test_none(self):
        s = UpdateStrategy("none")
        assert not any(s.offline_due(p) or s.instance_due(p) for p in range(0, 50000, 500))

    def test_validation(self):
        with pytest.raises(TrainingError):
            UpdateStrategy("offline", interval=0)
        with pytest.raises(TrainingError):
            UpdateStrategy("offline", epochs=0)
        with pytest.raises(TrainingError):
            UpdateStrategy("sometimes")

    @given(kind=st.sampled_from(UpdateStrategy.KINDS), interval=st.integers(1, 100),
           pos=st.integers(0, 10_000))
    def test_schedule_is_pure(self, kind, interval, pos):
        s = UpdateStrategy(kind, interval, 2, 300)
        assert s.offline_due(pos) == s.offline_due(pos)
        assert s.instance_due(pos) == UpdateStrategy(kind, interval, 2, 300).instance_due(pos)

    def test_scaled_switch(self):
        assert scaled_switch_point(90000) == 10000
        assert scaled_switch_point(200000) == 10000
        assert scaled_switch_point(2000) == 222

    def test_batch_sizes(self):
        assert batch_sizes(130, 64) == [64, 64, 2]
        assert sum(batch_sizes(5000, 64)) == 5000
        assert expected_steps(5000, 4, 64) == 4 * 79


@pytest.fixture(scope="module")
def finetune_setup():
    ds = synth_gaussian(GaussianMixtureSpec(10, 8, 4.0, 1000, 0.5, seed=3))
    pool = ds.pretrain_pool
    return ds, ds.features[pool], ds.labels[pool]


def _learner(finetune_setup, **kw):
    ds, X, y = finetune_setup
    learner = build_learner(LearnerSpec(kind="finetune", pretrain_epochs=1, **kw), ds.dim, 0)
    learner.pretrain(X, y)
    for c in range(10):
        if c not in learner.head.row_of:
            learner.admit(c, None)
    return learner


class TestOfflinePhase:
    def _buffer(self, finetune_setup, n=5000):
        ds, _, _ = finetune_setup
        idx = ds.stream_pool[:n]
        return ds.features[idx], ds.labels[idx]

    def test_step_count(self, finetune_setup):
        learner = _learner(finetune_setup)
        X, y = self._buffer(finetune_setup)
        meter = MacMeter()
        steps = run_offline_phase(learner, X, y, UpdateStrategy.offline_every(5000, 4), meter,
                                  5000, np.random.default_rng(0), 64)
        assert steps == 4 * math.ceil(5000 / 64) == 316
        assert meter.training == 3 * 5000 * 4 * learner.trained_forward_macs(10)

    def test_not_due(self, finetune_setup):
        learner = _learner(finetune_setup)
        before = {k: v.copy() for k, v in learner.net.params().items()}
        X, y = self._buffer(finetune_setup, 300)
        meter = MacMeter()
        steps = run_offline_phase(learner, X, y, UpdateStrategy.offline_every(5000, 4), meter,
                                  4999, np.random.default_rng(0))
        assert steps == 0 and meter.total == 0
        for k, v in learner.net.params().items():
            np.testing.assert_array_equal(v, before[k])

    def test_empty_buffer(self, finetune_setup):
        learner = _learner(finetune_setup)
        assert run_offline_phase(learner, np.zeros((0, 8)), np.zeros(0, dtype=int),
                                 UpdateStrategy.offline_every(10, 1), MacMeter(), 10,
                                 np.random.default_rng(0)) == 0

    def test_epochs_double_macs(self, finetune_setup):
        X, y = self._buffer(finetune_setup, 700)
        totals = []
        for epochs in (1, 2, 4):
            meter = MacMeter()
            run_offline_phase(_learner(finetune_setup), X, y,
                              UpdateStrategy.offline_every(700, epochs), meter, 700,
                              np.random.default_rng(0))
            totals.append(meter.training)
        assert totals[1] == 2 * totals[0] and totals[2] == 4 * totals[0]

    def test_zero_learning_rate_is_bit_identical(self, finetune_setup):
        learner = _learner(finetune_setup, lr=0.0)
        before = {k: v.copy() for k, v in learner.net.params().items()}
        X, y = self._buffer(finetune_setup, 500)
        run_offline_phase(learner, X, y, UpdateStrategy.offline_every(500, 2), MacMeter(), 500,
                          np.random.default_rng(0))
        for k, v in learner.net.params().items():
            assert v.tobytes() == before[k].tobytes()

    def test_training_reduces_loss(self, finetune_setup):
        learner = _learner(finetune_setup)
        X, y = self._buffer(finetune_setup, 2000)
        before, _ = xent_loss_and_grad(learner.net, X, y)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            run_offline_phase(learner, X, y, UpdateStrategy.offline_every(2000, 4), MacMeter(),
                              2000, np.random.default_rng(0))
        after, _ = xent_loss_and_grad(learner.net, X, y)
        assert after < before
