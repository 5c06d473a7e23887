"""Outer loop: optimizers, meta-gradients, evaluation and training."""

import math
from random import Random

import pytest
from array import array

from wormhole_maml import autodiff as ad
from wormhole_maml.autodiff import Tape
from wormhole_maml.errors import ContractError, TrainingError
from wormhole_maml.models import (
    ModelSpec,
    ParamSet,
    ParamEntry,
    episode_objective,
    forward,
    init_params,
)
from wormhole_maml.meta_trainer import (
    ADAM_EPS,
    AvgThresholdParams,
    EpisodeSource,
    MetaConfig,
    MnistParams,
    Optimizer,
    OptimizerKind,
    TaskKind,
    WaveletParams,
    adam_step,
    evaluate,
    evaluate_episodes,
    meta_step,
    sgd_step,
    train,
)
from wormhole_maml.seeding import spawn
from wormhole_maml.tasks import sample_avg_threshold, sign_flipped_copy
from wormhole_maml.wormhole import InnerLoopConfig, WormholeKind, WormholeSpec


def small_cfg(**kw):
    defaults = dict(
        task=TaskKind.AVG_THRESHOLD,
        model=ModelSpec.linear_scalar_out(5),
        wormhole=WormholeSpec(WormholeKind.IDENTITY),
        inner=InnerLoopConfig(alpha=1.0, n_inner=1, n_c=0, second_order=True),
        beta=0.1,
        optimizer=OptimizerKind.SGD,
        epochs=3,
        meta_batch=4,
        eval_episodes=5,
        curve_eval_episodes=3,
        seed=7,
        task_params=AvgThresholdParams(tau_min=0.3, tau_max=0.7),
    )
    defaults.update(kw)
    return MetaConfig(**defaults)


class TestAdamStep:
    def test_first_step_hand_value(self):
        # fresh state, g=1: bias correction makes m_hat=g, v_hat=g^2,
        # so the update is -beta * 1/(1 + eps)
        vals, m, v = adam_step(
            array("d", [0.0]), array("d", [1.0]), array("d", [0.0]), array("d", [0.0]),
            step=1, beta=0.005,
        )
        expect = -0.005 * 1.0 / (1.0 + ADAM_EPS)
        assert abs(vals[0] - expect) < 1e-18
        assert abs(m[0] - 0.1) < 1e-15
        assert abs(v[0] - 0.001) < 1e-15

    def test_zero_gradient_no_motion(self):
        p = array("d", [1.5, -2.0])
        z = array("d", [0.0, 0.0])
        vals, m, v = adam_step(p, z, array("d", z), array("d", z), step=1, beta=0.005)
        assert list(vals) == [1.5, -2.0]

    def test_deterministic(self):
        a = adam_step(array("d", [1.0]), array("d", [0.3]), array("d", [0.1]),
                      array("d", [0.2]), step=4, beta=0.01)
        b = adam_step(array("d", [1.0]), array("d", [0.3]), array("d", [0.1]),
                      array("d", [0.2]), step=4, beta=0.01)
        assert [list(x) for x in a] == [list(x) for x in b]

    def test_sgd_step(self):
        out = sgd_step(array("d", [1.0, 2.0]), array("d", [0.5, -0.5]), 0.1)
        assert list(out) == [0.95, 2.05]


class TestMetaStep:
    def test_inner_noop_reduces_to_plain_gradient_step(self, rng):
        # identity wormhole, alpha=0, one episode: theta' = theta - beta*grad(query)
        cfg = small_cfg(inner=InnerLoopConfig(alpha=0.0, n_inner=1, n_c=0, second_order=True),
                        meta_batch=1)
        theta = init_params(cfg.model, Random(1))
        ep = sample_avg_threshold(rng, d=5, tau_range=(0.3, 0.7))
        opt = Optimizer(cfg.optimizer, cfg.beta)
        theta2, _, metrics = meta_step(theta, [ep], cfg, opt)

        with Tape():
            leaves = theta.tracked_copy()
            loss = episode_objective(ep.loss, forward(cfg.model, leaves, ep.query_x), ep.query_y)
            gs = ad.grad(loss, leaves.tensors())
        flat_g = []
        for g in gs:
            flat_g.extend(g.data)
        expect = [v - cfg.beta * g for v, g in zip(theta.flatten(), flat_g)]
        assert theta2.flatten() == expect
        assert metrics.task_losses[0] == loss.item()

    def test_conflicting_pair_cancels_at_zero_theta(self, rng):
        theta = ParamSet([
            ParamEntry("W0", ad.tensor_new((1, 5), [0.0] * 5), 0),
            ParamEntry("b0", ad.tensor_new((1,), [0.0]), 0),
        ])
        ep = sample_avg_threshold(rng, d=5, tau_range=(0.3, 0.7))
        cfg = small_cfg(meta_batch=2)
        opt = Optimizer(cfg.optimizer, cfg.beta)
        theta2, _, _ = meta_step(theta, [ep, sign_flipped_copy(ep)], cfg, opt)
        assert theta2.flatten() == [0.0] * 6  # exact float cancellation

    def test_wormhole_breaks_cancellation_at_informative_theta(self, rng):
        # tanh multiplier flips per task, so the pair's meta-gradients align
        # instead of cancelling; frozen magnitude from a seeded run
        theta = ParamSet([
            ParamEntry("W0", ad.tensor_new((1, 5), [2.0] * 5), 0),
            ParamEntry("b0", ad.tensor_new((1,), [-5.0]), 0),
        ])
        ep = sample_avg_threshold(Random(31), d=5, tau_range=(0.4, 0.6))
        pair = [ep, sign_flipped_copy(ep)]
        cfg = small_cfg(
            wormhole=WormholeSpec(WormholeKind.TANH_SCALAR),
            inner=InnerLoopConfig(alpha=1.0, gamma=6.0, n_inner=1, n_c=5,
                                  second_order=True, differentiate_through_c=False),
            meta_batch=2,
        )
        opt = Optimizer(cfg.optimizer, cfg.beta)
        theta2, _, _ = meta_step(theta, pair, cfg, opt)
        step_norm = math.sqrt(sum((a - b) ** 2 for a, b in zip(theta2.flatten(), theta.flatten())))
        assert step_norm > 0.01

    def test_batch_gradient_is_sum_of_per_task_gradients(self, rng):
        cfg = small_cfg(meta_batch=3)
        theta = init_params(cfg.model, Random(5))
        eps = [sample_avg_threshold(rng, d=5, tau_range=(0.3, 0.7)) for _ in range(3)]

        def grad_of(episodes):
            opt = Optimizer(OptimizerKind.SGD, cfg.beta)
            theta2, _, _ = meta_step(theta, episodes, cfg, opt)
            return [(a - b) / -cfg.beta for a, b in zip(theta2.flatten(), theta.flatten())]

        whole = grad_of(eps)
        parts = [grad_of([e]) for e in eps]
        summed = [sum(p[i] for p in parts) for i in range(len(whole))]
        for a, b in zip(whole, summed):
            assert abs(a - b) < 1e-10

    def test_divergence_guard_raises(self, rng):
        # mse overshoot grows geometrically, which trips the guard fast
        from wormhole_maml.tasks import sample_wavelet

        cfg = small_cfg(
            task=TaskKind.WAVELET,
            model=ModelSpec.linear_vector_filter(50),
            inner=InnerLoopConfig(alpha=50.0, n_inner=5, n_c=0, second_order=False),
            meta_batch=1,
            task_params=WaveletParams(),
        )
        theta = init_params(cfg.model, Random(2))
        ep = sample_wavelet(rng, n=50, k=10)
        opt = Optimizer(cfg.optimizer, cfg.beta)
        with pytest.raises(TrainingError) as err:
            meta_step(theta, [ep], cfg, opt, epoch=3)
        assert err.value.epoch == 3
        assert err.value.task_index == 0


class TestOuterGradientCorrectness:
    def test_analytic_one_step_quadratic(self):
        """Scalar task: support loss (w-a)^2, query loss (w-b)^2, one inner
        step. phi = w - 2 alpha (w - a); dq/dw = 2 (phi - b)(1 - 2 alpha)."""
        alpha, a, b, w0 = 0.3, 1.7, -0.4, 0.9
        spec = ModelSpec.linear_vector_filter(1)
        cfg = small_cfg(
            task=TaskKind.WAVELET,
            model=spec,
            inner=InnerLoopConfig(alpha=alpha, n_inner=1, n_c=0, second_order=True),
            meta_batch=1,
            task_params=WaveletParams(n_grid=1),
        )
        from wormhole_maml.tasks import Episode

        ep = Episode(
            support_x=ad.constant([[1.0]]),
            support_y=ad.constant([[a]]),
            query_x=ad.constant([[1.0]]),
            query_y=ad.constant([[b]]),
            loss="mse",
            sign=1,
        )
        theta = ParamSet([ParamEntry("w", ad.tensor_new((1,), [w0]), 0)])
        opt = Optimizer(OptimizerKind.SGD, cfg.beta)
        theta2, _, _ = meta_step(theta, [ep], cfg, opt)
        got = (theta.flatten()[0] - theta2.flatten()[0]) / cfg.beta

        phi = w0 - 2 * alpha * (w0 - a)
        want = 2 * (phi - b) * (1 - 2 * alpha)
        assert abs(got - want) / max(abs(want), 1e-12) < 1e-8

    def test_first_order_drops_second_order_term(self):
        # same setup, second_order=False: dq/dw = 2 (phi - b)
        alpha, a, b, w0 = 0.3, 1.7, -0.4, 0.9
        spec = ModelSpec.linear_vector_filter(1)
        from wormhole_maml.tasks import Episode

        ep = Episode(
            support_x=ad.constant([[1.0]]),
            support_y=ad.constant([[a]]),
            query_x=ad.constant([[1.0]]),
            query_y=ad.constant([[b]]),
            loss="mse",
            sign=1,
        )
        cfg = small_cfg(
            task=TaskKind.WAVELET,
            model=spec,
            inner=InnerLoopConfig(alpha=alpha, n_inner=1, n_c=0, second_order=False),
            meta_batch=1,
            task_params=WaveletParams(n_grid=1),
        )
        theta = ParamSet([ParamEntry("w", ad.tensor_new((1,), [w0]), 0)])
        opt = Optimizer(OptimizerKind.SGD, cfg.beta)
        theta2, _, _ = meta_step(theta, [ep], cfg, opt)
        got = (theta.flatten()[0] - theta2.flatten()[0]) / cfg.beta
        phi = w0 - 2 * alpha * (w0 - a)
        assert abs(got - 2 * (phi - b)) < 1e-12


class TestEvaluate:
    def test_theta_never_mutated(self):
        cfg = small_cfg()
        theta = init_params(cfg.model, Random(3))
        before = theta.flatten()
        evaluate(theta, cfg, 4, spawn(1, "ev"))
        assert theta.flatten() == before

    def test_deterministic(self):
        cfg = small_cfg()
        theta = init_params(cfg.model, Random(3))
        a = evaluate(theta, cfg, 4, spawn(5, "ev"))
        b = evaluate(theta, cfg, 4, spawn(5, "ev"))
        assert a == b

    def test_error_rate_zero_for_oracle_params(self, rng):
        # scaled-up averaging weights classify perfectly after adaptation
        cfg = small_cfg(
            inner=InnerLoopConfig(alpha=0.0, n_inner=1, n_c=0, second_order=False),
            task_params=AvgThresholdParams(tau_min=0.49, tau_max=0.51),
        )
        theta = ParamSet([
            ParamEntry("W0", ad.tensor_new((1, 5), [40.0] * 5), 0),
            ParamEntry("b0", ad.tensor_new((1,), [-100.0]), 0),
        ])
        source = EpisodeSource(cfg)
        eps = []
        rng2 = spawn(9, "oracle-eval")
        while len(eps) < 10:
            ep = source.sample_eval(rng2)
            if ep.sign == 1:
                eps.append(ep)
        out = evaluate_episodes(theta, cfg, eps)
        assert out["mean_error"] == 0.0

    def test_needs_positive_count(self):
        cfg = small_cfg()
        theta = init_params(cfg.model, Random(3))
        with pytest.raises(ContractError):
            evaluate(theta, cfg, 0, spawn(1, "ev"))

    def test_mnist_random_theta_near_chance(self):
        cfg = small_cfg(
            task=TaskKind.MNIST,
            model=ModelSpec.mlp((784, 16, 2), bias=(True, False)),
            wormhole=WormholeSpec(WormholeKind.IDENTITY, frozenset({1})),
            inner=InnerLoopConfig(alpha=0.01, n_inner=1, n_c=0, second_order=False),
            task_params=MnistParams(),
        )
        theta = init_params(cfg.model, Random(11))
        out = evaluate(theta, cfg, 30, spawn(2, "ev"))
        assert 0.3 < out["mean_error"] < 0.7


class TestTrain:
    def test_epochs_one_gives_unit_sequences(self):
        res = train(small_cfg(epochs=1))
        assert len(res.train_loss) == 1
        assert len(res.eval_loss) == 1
        assert len(res.c_mean) == 1
        assert res.complete

    def test_zero_epochs_rejected(self):
        with pytest.raises(ContractError):
            small_cfg(epochs=0)

    def test_deterministic_given_seed(self):
        a = train(small_cfg())
        b = train(small_cfg())
        assert a.to_json_dict() == b.to_json_dict()

    def test_divergent_run_flagged_incomplete(self):
        cfg = small_cfg(
            task=TaskKind.WAVELET,
            model=ModelSpec.linear_vector_filter(50),
            inner=InnerLoopConfig(alpha=50.0, n_inner=5, n_c=0, second_order=False),
            epochs=4,
            task_params=WaveletParams(),
        )
        res = train(cfg)
        assert not res.complete
        assert res.abort_epoch is not None
        assert res.final_metric is None
        assert "divergence" in res.error

    def test_second_order_flag_irrelevant_when_inner_is_identity_noop(self):
        base = dict(
            inner=InnerLoopConfig(alpha=0.0, n_inner=1, n_c=0, second_order=True),
            epochs=2,
        )
        a = train(small_cfg(**base))
        base["inner"] = InnerLoopConfig(alpha=0.0, n_inner=1, n_c=0, second_order=False)
        b = train(small_cfg(**base))
        assert a.train_loss == b.train_loss
        assert a.eval_loss == b.eval_loss

    def test_c_stats_tracked_for_wormhole(self):
        cfg = small_cfg(
            wormhole=WormholeSpec(WormholeKind.TANH_SCALAR),
            inner=InnerLoopConfig(alpha=1.0, gamma=6.0, n_inner=1, n_c=3,
                                  second_order=True, differentiate_through_c=False),
            epochs=2,
        )
        res = train(cfg)
        assert all(-1.0 <= v <= 1.0 for v in res.c_min + res.c_max)
        assert res.c_probe is not None and len(res.c_probe) == 50
