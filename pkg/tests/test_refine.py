import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latent_refine.core import DimensionError, Featurizer, RefinementConfig, mse
from latent_refine.dynamics import CheckpointPair, StepContext, make_oracle_arm, model_step, parameter_digest
from latent_refine.refine import (
    contrastive_gradient, contrastive_loss, contrastive_update, refine_step, refinement_round, residual_refine,
)

from oracles import central_difference

finite = st.floats(-100, 100, allow_nan=False)


def triples(max_d=16):
    return st.integers(1, max_d).flatmap(lambda d: st.tuples(*[arrays(np.float64, d, elements=finite)] * 3))


class TestResidual:
    def test_examples(self):
        np.testing.assert_array_equal(residual_refine([4, 0], [0, 4], 1.0), [4, 0])
        np.testing.assert_array_equal(residual_refine([4, 0], [0, 4], 0.0), [0, 4])
        np.testing.assert_array_equal(residual_refine([4, 0], [0, 4], 0.5), [2, 2])


class TestGradient:
    def test_example_two_d(self):
        g = contrastive_gradient([0, 0], [2, 0], [0, 2]).values
        np.testing.assert_allclose(g, [-2, 2])
        f = lambda h: contrastive_loss(h, [2, 0], [0, 2])
        np.testing.assert_allclose(central_difference(f, [0.0, 0.0]), g, rtol=1e-8)

    def test_example_one_d(self):
        g = contrastive_gradient([5], [1], [0]).values
        np.testing.assert_allclose(g, [-2])
        np.testing.assert_allclose(central_difference(lambda h: contrastive_loss(h, [1], [0]), [5.0]), g, rtol=1e-8)

    def test_equal_references_zero(self, rng):
        r = rng.standard_normal(8)
        assert np.all(contrastive_gradient(rng.standard_normal(8), r, r).values == 0)

    @given(triples())
    def test_independent_of_h(self, t):
        h, good, bad = t
        a = contrastive_gradient(h, good, bad).values
        b = contrastive_gradient(h * 3 + 1, good, bad).values
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("d", [2, 16, 64])
    def test_matches_finite_differences(self, d):
        rng = np.random.default_rng(d)
        for _ in range(20):
            h, good, bad = rng.standard_normal((3, d))
            g = contrastive_gradient(h, good, bad).values
            fd = central_difference(lambda z: contrastive_loss(z, good, bad), h)
            assert np.linalg.norm(fd - g) <= 1e-6 * np.linalg.norm(g)

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            contrastive_gradient([0, 0], [1, 1, 1], [0, 0])


class TestUpdate:
    def test_example(self):
        g = contrastive_gradient([0, 0], [2, 0], [0, 2])
        np.testing.assert_allclose(contrastive_update([0, 0], g, 0.25), [0.5, -0.5])

    def test_literal_sign_ascends(self):
        g = contrastive_gradient([0, 0], [2, 0], [0, 2])
        np.testing.assert_allclose(contrastive_update([0, 0], g, 0.25, literal_sign=True), [-0.5, 0.5])

    def test_descent_on_example(self):
        h, good, bad = np.zeros(2), np.array([2.0, 0]), np.array([0, 2.0])
        h2 = contrastive_update(h, contrastive_gradient(h, good, bad), 0.25)
        assert contrastive_loss(h2, good, bad) < contrastive_loss(h, good, bad)

    def test_tiny_eta_near_identity(self, rng):
        h, good, bad = rng.standard_normal((3, 6))
        np.testing.assert_allclose(contrastive_update(h, contrastive_gradient(h, good, bad), 1e-15), h, atol=1e-14)

    @pytest.mark.parametrize("eta", [0.0, -1.0])
    def test_eta_positive(self, eta):
        with pytest.raises(ValueError):
            contrastive_update([0.0], contrastive_gradient([0], [1], [0]), eta)

    @given(triples(), st.sampled_from([1e-3, 1.0, 10.0]))
    def test_exact_linear_descent(self, t, eta):
        h, good, bad = t
        g = contrastive_gradient(h, good, bad)
        lhs = contrastive_loss(contrastive_update(h, g, eta), good, bad)
        rhs = contrastive_loss(h, good, bad) - eta * g.norm ** 2
        scale = max(abs(rhs), mse(h, good) + mse(h, bad), 1e-300)
        assert abs(lhs - rhs) <= 1e-9 * scale


@pytest.fixture
def oracle_setup(dag_small):
    x = dag_small[0]
    feat = Featurizer.create(x.width, 64, 0)
    main, pair = make_oracle_arm(feat, noise=0.4, pull=0.8, noise_seed=1)
    return x, feat, main, pair


class TestRefineStep:
    def test_mode_none_is_plain_step(self, oracle_setup):
        x, feat, main, pair = oracle_setup
        ctx = StepContext(x, 1, 3)
        h = main.encode(x)
        out = refinement_round(h, main, pair, RefinementConfig(mode="none"), ctx)
        assert out.tobytes() == model_step(main, h, ctx).tobytes()

    def test_full_memory_equal_refs_unchanged(self, oracle_setup):
        x, feat, main, _ = oracle_setup
        same = CheckpointPair(main, main)
        h = main.encode(x) + 0.3
        out = refinement_round(h, main, same, RefinementConfig(mode="both", alpha=1.0), StepContext(x, 1, 3))
        np.testing.assert_array_equal(out, h)

    def test_search_moves_closer_to_gold(self, oracle_setup):
        x, feat, main, pair = oracle_setup
        ctx = StepContext(x, 2, 3)
        h = main.encode(x)
        g = main.target(ctx)
        plain = refinement_round(h, main, pair, RefinementConfig(mode="none"), ctx)
        both = refinement_round(h, main, pair, RefinementConfig(mode="both", alpha=0.0, eta=0.5), ctx)
        assert np.linalg.norm(both - g) < np.linalg.norm(plain - g)

    def test_both_with_alpha_zero_equals_search(self, oracle_setup):
        x, _, main, pair = oracle_setup
        ctx = StepContext(x, 1, 3)
        h = main.encode(x)
        a = refinement_round(h, main, pair, RefinementConfig(mode="both", alpha=0.0, eta=3.0, rounds_R=2), ctx)
        b = refinement_round(h, main, pair, RefinementConfig(mode="search", alpha=0.7, eta=3.0, rounds_R=2), ctx)
        assert a.tobytes() == b.tobytes()

    def test_both_converges_to_residual(self, oracle_setup):
        x, _, main, pair = oracle_setup
        ctx = StepContext(x, 1, 3)
        h = main.encode(x)
        res = refinement_round(h, main, pair, RefinementConfig(mode="residual", alpha=0.4), ctx)
        gaps = [np.linalg.norm(refinement_round(h, main, pair, RefinementConfig(mode="both", alpha=0.4, eta=e), ctx) - res)
                for e in (1.0, 1e-3, 1e-6)]
        assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 1e-6

    def test_references_see_post_residual_state(self, oracle_setup):
        x, _, main, pair = oracle_setup
        ctx = StepContext(x, 1, 3)
        h = main.encode(x)
        rec = refine_step(h, main, pair, RefinementConfig(mode="both", alpha=0.5, eta=2.0), ctx)
        post = residual_refine(h, model_step(main, h, ctx), 0.5)
        np.testing.assert_array_equal(rec.post_residual, post)
        g = contrastive_gradient(post, model_step(pair.good, post, ctx), model_step(pair.bad, post, ctx))
        np.testing.assert_array_equal(rec.state, contrastive_update(post, g, 2.0))

    def test_rounds_recorded(self, oracle_setup):
        x, _, main, pair = oracle_setup
        rec = refine_step(main.encode(x), main, pair, RefinementConfig(rounds_R=3), StepContext(x, 1, 3))
        assert rec.rounds == 3 and len(rec.searches) == 3
        assert all(s.loss_after < s.loss_before for s in rec.searches)

    def test_search_needs_pair(self, oracle_setup):
        x, _, main, _ = oracle_setup
        with pytest.raises(ValueError):
            refine_step(main.encode(x), main, None, RefinementConfig(mode="search"), StepContext(x, 1, 3))

    def test_parameters_untouched(self, oracle_setup, small_mlp, dag_small):
        pair = CheckpointPair(small_mlp, small_mlp.with_parameters(b2=np.ones(16)))
        before = [parameter_digest(m) for m in (small_mlp, pair.good, pair.bad)]
        h = small_mlp.encode(dag_small[0])
        for mode in ("none", "residual", "search", "both"):
            refine_step(h, small_mlp, pair, RefinementConfig(mode=mode, eta=5.0, rounds_R=2))
        assert [parameter_digest(m) for m in (small_mlp, pair.good, pair.bad)] == before

    def test_divergence_detected(self, small_mlp, dag_small):
        pair = CheckpointPair(small_mlp, small_mlp.with_parameters(b2=np.full(16, -1e300)))
        with pytest.raises((FloatingPointError, ValueError)):
            with np.errstate(over="ignore", invalid="ignore"):
                refine_step(small_mlp.encode(dag_small[0]), small_mlp, pair,
                            RefinementConfig(mode="search", eta=1e10, rounds_R=3))
