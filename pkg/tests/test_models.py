"""Parameter containers, forward passes and loss functions."""

import math
from random import Random

import pytest

from wormhole_maml import autodiff as ad
from wormhole_maml.autodiff import Tape
from wormhole_maml.errors import ContractError, StructuralError
from wormhole_maml.models import (
    ModelSpec,
    ParamSet,
    adaptation_loss,
    bce_with_logits,
    episode_objective,
    forward,
    init_params,
    mse,
    softmax_ce,
)


class TestParamSet:
    def test_shapes_linear_scalar_out(self):
        spec = ModelSpec.linear_scalar_out(5)
        p = init_params(spec, Random(0))
        assert p.get("W0").shape == (1, 5)
        assert p.get("b0").shape == (1,)
        assert p.total_dim == 6

    def test_shapes_vector_filter(self):
        p = init_params(ModelSpec.linear_vector_filter(50), Random(0))
        assert p.get("w").shape == (50,)
        assert p.total_dim == 50

    def test_same_seed_bit_identical(self):
        spec = ModelSpec.mlp((8, 4, 2))
        a = init_params(spec, Random(42))
        b = init_params(spec, Random(42))
        assert a.flatten() == b.flatten()

    def test_flatten_unflatten_roundtrip(self):
        spec = ModelSpec.mlp((8, 4, 2))
        p = init_params(spec, Random(1))
        flat = p.flatten()
        q = p.unflatten(flat)
        assert q.flatten() == flat
        assert [e.name for e in q] == [e.name for e in p]

    def test_duplicate_names_rejected(self):
        t = ad.constant([1.0])
        from wormhole_maml.models import ParamEntry

        with pytest.raises(StructuralError):
            ParamSet([ParamEntry("w", t, 0), ParamEntry("w", t, 0)])

    def test_biases_start_at_zero(self):
        p = init_params(ModelSpec.mlp((8, 4, 2)), Random(3))
        assert all(v == 0.0 for v in p.get("b0").data)
        assert all(v == 0.0 for v in p.get("b1").data)

    def test_wavelet_demo_init_range(self):
        p = init_params(ModelSpec.linear_vector_filter(200), Random(5), wavelet_demo_init=True)
        vals = p.get("w").data
        assert min(vals) >= -2.0 and max(vals) <= 3.0
        assert max(vals) > 1.5  # wide init actually used

    def test_empty_layers_rejected(self):
        with pytest.raises(StructuralError):
            ModelSpec.mlp([8])


class TestForward:
    def test_average_threshold_logit(self):
        spec = ModelSpec.linear_scalar_out(5)
        p = init_params(spec, Random(0))
        p = p.unflatten([0.2] * 5 + [-0.5])
        x = ad.constant([[1.0, 1.0, 1.0, 1.0, 1.0]])
        out = forward(spec, p, x)
        assert out.shape == (1, 1)
        assert abs(out.item() - 0.5) < 1e-12

    def test_filter_dot_with_self(self):
        spec = ModelSpec.linear_vector_filter(4)
        p = init_params(spec, Random(0)).unflatten([1.0, -2.0, 0.5, 3.0])
        x = ad.constant([[1.0, -2.0, 0.5, 3.0]])
        norm_sq = 1 + 4 + 0.25 + 9
        assert abs(forward(spec, p, x).item() - norm_sq) < 1e-12

    def test_mlp_zero_weights_zero_logits(self):
        spec = ModelSpec.mlp((6, 3, 2))
        p = init_params(spec, Random(0))
        p = p.unflatten([0.0] * p.total_dim)
        x = ad.constant([[1.0] * 6, [0.5] * 6])
        out = forward(spec, p, x)
        assert out.shape == (2, 2)
        assert all(v == 0.0 for v in out.data)

    def test_input_dim_mismatch(self):
        spec = ModelSpec.linear_scalar_out(5)
        p = init_params(spec, Random(0))
        with pytest.raises(StructuralError):
            forward(spec, p, ad.constant([[1.0, 2.0]]))

    def test_linear_in_params(self, rng):
        # forward(a*W) == a*forward(W) with zero bias
        spec = ModelSpec.linear_vector_filter(8)
        p = init_params(spec, Random(2))
        x = ad.constant([[rng.uniform(0, 1) for _ in range(8)] for _ in range(3)])
        base = forward(spec, p, x)
        scaled = forward(spec, p.unflatten([2.5 * v for v in p.flatten()]), x)
        for a, b in zip(base.data, scaled.data):
            assert abs(2.5 * a - b) < 1e-12


class TestBceWithLogits:
    def test_zero_logit_label_one(self):
        z = ad.constant([[0.0]])
        y = ad.constant([[1.0]])
        assert abs(bce_with_logits(z, y).item() - math.log(2)) < 1e-15

    def test_sum_semantics(self):
        z = ad.constant([[0.0], [0.0]])
        y = ad.constant([[1.0], [0.0]])
        assert abs(bce_with_logits(z, y).item() - 2 * math.log(2)) < 1e-15

    def test_saturation_limit(self):
        z = ad.constant([[40.0]])
        y = ad.constant([[1.0]])
        assert bce_with_logits(z, y).item() < 1e-15

    def test_label_validation(self):
        with pytest.raises(ContractError):
            bce_with_logits(ad.constant([[0.0]]), ad.constant([[0.5]]))

    def test_stable_equals_naive_on_safe_domain(self, rng):
        # -[y log s(z) + (1-y) log s(-z)] summed, on z in [-30, 30];
        # 1 - s(z) is evaluated as s(-z), the same formula without the
        # 1.0-s cancellation that would corrupt the oracle itself
        for _ in range(50):
            z = rng.uniform(-30, 30)
            y = rng.choice([0.0, 1.0])
            stable = bce_with_logits(ad.constant([[z]]), ad.constant([[y]])).item()
            s_pos = 1.0 / (1.0 + math.exp(-z))
            s_neg = 1.0 / (1.0 + math.exp(z))
            naive = -(y * math.log(s_pos) + (1 - y) * math.log(s_neg))
            assert abs(stable - naive) < 1e-10


class TestSoftmaxCe:
    def test_uniform_two_way(self):
        assert abs(softmax_ce(ad.constant([[0.0, 0.0]]), [0]).item() - math.log(2)) < 1e-15

    def test_confident_correct(self):
        # frozen from softplus(-20)
        val = softmax_ce(ad.constant([[10.0, -10.0]]), [0]).item()
        assert abs(val - 2.061153622438558e-09) < 1e-15

    def test_mean_semantics(self):
        row = [[1.0, -0.5], [1.0, -0.5]]
        a = softmax_ce(ad.constant(row), [0, 1]).item()
        l0 = softmax_ce(ad.constant([row[0]]), [0]).item()
        l1 = softmax_ce(ad.constant([row[1]]), [1]).item()
        assert abs(a - 0.5 * (l0 + l1)) < 1e-12

    def test_nonnegative_and_ln_k_at_zero(self, rng):
        k = 7
        logits = ad.constant([[rng.uniform(-3, 3) for _ in range(k)]])
        assert softmax_ce(logits, [3]).item() >= 0.0
        zeros = ad.constant([[0.0] * k])
        assert abs(softmax_ce(zeros, [2]).item() - math.log(k)) < 1e-12

    def test_label_range_validated(self):
        with pytest.raises(ContractError):
            softmax_ce(ad.constant([[0.0, 0.0]]), [2])


class TestMse:
    def test_identity_zero(self):
        p = ad.constant([[1.0], [2.0]])
        assert mse(p, p).item() == 0.0

    def test_unit_error(self):
        assert mse(ad.constant([[1.0]]), ad.constant([[0.0]])).item() == 1.0

    def test_batch_count_division(self):
        p = ad.constant([[1.0], [1.0]])
        t = ad.constant([[0.0], [2.0]])
        assert mse(p, t).item() == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(StructuralError):
            mse(ad.constant([[1.0]]), ad.constant([1.0, 2.0]))


class TestLossDispatch:
    def test_objective_bce_is_summed(self):
        z = ad.constant([[0.0], [0.0]])
        y = ad.constant([[1.0], [0.0]])
        assert abs(episode_objective("bce", z, y).item() - 2 * math.log(2)) < 1e-15

    def test_adaptation_bce_is_batch_mean(self):
        z = ad.constant([[0.0], [0.0]])
        y = ad.constant([[1.0], [0.0]])
        assert abs(adaptation_loss("bce", z, y).item() - math.log(2)) < 1e-15

    def test_ce_targets_from_tensor(self):
        z = ad.constant([[10.0, -10.0], [10.0, -10.0]])
        y = ad.constant([0.0, 0.0])
        assert episode_objective("ce", z, y).item() < 1e-8

    def test_unknown_selector(self):
        with pytest.raises(ContractError):
            episode_objective("huber", ad.constant([[0.0]]), ad.constant([[0.0]]))

    def test_losses_differentiable(self):
        with Tape():
            z = ad.tensor_new((2, 1), [0.3, -0.2], track=True)
            loss = episode_objective("bce", z, ad.constant([[1.0], [0.0]]))
            g = ad.grad(loss, [z])[0]
        # d/dz softplus(-z) = sigmoid(z) - 1 for y=1; sigmoid(z) for y=0
        s0 = 1 / (1 + math.exp(-0.3))
        s1 = 1 / (1 + math.exp(0.2))
        assert abs(g.data[0] - (s0 - 1)) < 1e-12
        assert abs(g.data[1] - s1) < 1e-12
