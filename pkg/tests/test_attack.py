import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deacl import tensor as T
from deacl.attack import AttackConfig, pgd
from deacl.models import Encoder, EncoderConfig
from deacl.tensor import Tensor


def linear_forward(w):
    w_t = Tensor(w)

    def fwd(x):
        flat = T.reshape(x, (x.data.shape[0], -1))
        return T.matmul(flat, w_t)

    return fwd


@pytest.fixture
def small_encoder():
    cfg = EncoderConfig(in_shape=(1, 8, 8), widths=(4, 4), rep_dim=8)
    return Encoder(cfg, np.random.default_rng(0))


def rand_batch(n=4, seed=0, shape=(1, 8, 8)):
    return np.random.default_rng(seed).uniform(0.05, 0.95, (n, *shape)).astype(np.float32)


class TestConfig:
    def test_bad_epsilon(self):
        with pytest.raises(ValueError):
            AttackConfig(epsilon=1.5)

    def test_bad_objective(self):
        with pytest.raises(ValueError):
            AttackConfig(objective="fgsm")

    def test_bad_restarts(self):
        with pytest.raises(ValueError):
            AttackConfig(restarts=0)


class TestPGD:
    def test_zero_epsilon_is_bitwise_identity(self, small_encoder):
        x = rand_batch()
        cfg = AttackConfig(epsilon=0.0, steps=5, objective="cosine-to-clean")
        clean = small_encoder.forward(x, mode="eval").data
        adv = pgd(lambda t: small_encoder.forward(t, mode="attack"), x,
                  {"clean_features": clean}, cfg)
        assert adv.tobytes() == x.tobytes()

    def test_ball_and_box_invariant(self, small_encoder):
        x = rand_batch(n=6, seed=3)
        cfg = AttackConfig(epsilon=8 / 255, alpha=2 / 255, steps=7,
                           restarts=2, random_start=True, objective="cosine-to-clean")
        clean = small_encoder.forward(x, mode="eval").data
        adv = pgd(lambda t: small_encoder.forward(t, mode="attack"), x,
                  {"clean_features": clean}, cfg, rng=np.random.default_rng(0))
        assert np.abs(adv - x).max() <= cfg.epsilon + 1e-6
        assert adv.min() >= 0.0 and adv.max() <= 1.0

    def test_single_step_linear_model_is_alpha_sign(self):
        # CE on a linear model: one step moves exactly alpha * sign(grad)
        w = np.random.default_rng(1).normal(size=(16, 3)).astype(np.float32)
        x = np.random.default_rng(2).uniform(0.3, 0.7, (5, 1, 4, 4)).astype(np.float32)
        labels = np.array([0, 1, 2, 0, 1])
        cfg = AttackConfig(epsilon=0.1, alpha=0.03, steps=1, objective="cross-entropy")
        adv = pgd(linear_forward(w), x, {"labels": labels}, cfg)

        xt = Tensor(x, requires_grad=True)
        loss = T.tsum(T.cross_entropy_per_sample(linear_forward(w)(xt), labels))
        loss.backward()
        expected = np.clip(x + cfg.alpha * np.sign(xt.grad), 0.0, 1.0)
        assert np.allclose(adv, expected, atol=1e-7)

    def test_many_steps_saturate_epsilon_on_linear_model(self):
        # CE gradient sign stays +1 here, so iterated steps pin every pixel
        # to the epsilon boundary
        w = np.stack([np.zeros(16), np.ones(16)], axis=1).astype(np.float32)
        x = np.full((2, 1, 4, 4), 0.5, dtype=np.float32)
        cfg = AttackConfig(epsilon=0.05, alpha=0.02, steps=10, objective="cross-entropy")
        adv = pgd(linear_forward(w), x, {"labels": np.array([0, 0])}, cfg)
        assert np.allclose(np.abs(adv - x), cfg.epsilon, atol=1e-6)

    def test_restarts_never_hurt(self, small_encoder):
        x = rand_batch(n=8, seed=9)
        clean = small_encoder.forward(x, mode="eval").data
        ctx = {"clean_features": clean}
        # eval-mode forward keeps the per-sample objective independent of
        # batch composition, which the per-sample best selection relies on
        fwd = lambda t: small_encoder.forward(t, mode="eval")

        def mean_obj(adv):
            out = small_encoder.forward(adv, mode="eval").data
            cos = np.sum(out * clean, axis=1) / (
                np.linalg.norm(out, axis=1) * np.linalg.norm(clean, axis=1))
            return -cos

        one = AttackConfig(epsilon=8 / 255, alpha=2 / 255, steps=3, restarts=1,
                           random_start=True, objective="cosine-to-clean")
        five = AttackConfig(epsilon=8 / 255, alpha=2 / 255, steps=3, restarts=5,
                            random_start=True, objective="cosine-to-clean")
        obj1 = mean_obj(pgd(fwd, x, ctx, one, rng=np.random.default_rng(0)))
        obj5 = mean_obj(pgd(fwd, x, ctx, five, rng=np.random.default_rng(0)))
        assert np.all(obj5 >= obj1 - 1e-6)

    def test_attack_leaves_parameters_untouched(self, small_encoder):
        x = rand_batch()
        h = small_encoder.param_hash()
        bn = {k: st.running_mean.copy() for k, st in small_encoder.bn_states.items()}
        cfg = AttackConfig(steps=4, objective="cosine-to-clean")
        clean = small_encoder.forward(x, mode="eval").data
        pgd(lambda t: small_encoder.forward(t, mode="attack"), x,
            {"clean_features": clean}, cfg)
        assert small_encoder.param_hash() == h
        for k, v in bn.items():
            assert np.array_equal(small_encoder.bn_states[k].running_mean, v)

    def test_missing_context_rejected(self, small_encoder):
        x = rand_batch()
        with pytest.raises(ValueError):
            pgd(lambda t: small_encoder.forward(t, mode="attack"), x, {},
                AttackConfig(objective="cross-entropy"))

    def test_random_start_without_rng_rejected(self, small_encoder):
        with pytest.raises(ValueError):
            pgd(lambda t: small_encoder.forward(t, mode="attack"), rand_batch(), {},
                AttackConfig(random_start=True, objective="cosine-to-clean"))

    def test_out_of_box_input_rejected(self, small_encoder):
        x = rand_batch() + 0.5
        with pytest.raises(ValueError):
            pgd(lambda t: small_encoder.forward(t, mode="attack"), x, {},
                AttackConfig(objective="cosine-to-clean"))

    @settings(max_examples=20, deadline=None)
    @given(eps=st.floats(0.001, 0.2), steps=st.integers(1, 6),
           seed=st.integers(0, 1000))
    def test_projection_property(self, eps, steps, seed):
        w = np.random.default_rng(0).normal(size=(16, 2)).astype(np.float32)
        x = np.random.default_rng(seed).uniform(0, 1, (3, 1, 4, 4)).astype(np.float32)
        cfg = AttackConfig(epsilon=eps, alpha=eps / 2, steps=steps,
                           random_start=True, objective="cross-entropy")
        adv = pgd(linear_forward(w), x, {"labels": np.array([0, 1, 0])}, cfg,
                  rng=np.random.default_rng(seed))
        assert np.abs(adv - x).max() <= eps + 1e-6
        assert adv.min() >= 0.0 and adv.max() <= 1.0
