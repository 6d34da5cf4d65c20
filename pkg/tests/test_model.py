"""Forward pass, heads, and numerical components of the model."""

import math

import numpy as np
import pytest

from oracles import forward_oracle
from seqcal.corpus import ExampleRecord
from seqcal.errors import ConfigurationError, InputError, NumericalStateError
from seqcal.model import (
    MethodConfig,
    ModelDims,
    SngpConfig,
    batch_loss,
    build_rows,
    dropout_mask,
    finalize_covariance,
    forward_logits,
    gp_features,
    init_model,
    mean_field_logits,
    predictive_variance,
    spectral_normalize,
    update_precision,
)
from seqcal.rng import stream


def small_dims(vocab=8):
    return ModelDims(vocab_size=vocab, embed_dim=5, hidden_dim=7)


def random_tokens(rs, vocab, lo=1, hi=6):
    n = int(rs.integers(lo, hi + 1))
    return tuple(int(t) for t in rs.integers(0, vocab, size=n))


class TestDims:
    def test_vocab_floor(self):
        with pytest.raises(ConfigurationError, match="vocab_size"):
            ModelDims(vocab_size=3)

    def test_special_ids_in_range(self):
        with pytest.raises(ConfigurationError, match="eos_id"):
            ModelDims(vocab_size=5, eos_id=5)

    def test_special_ids_distinct(self):
        with pytest.raises(ConfigurationError, match="differ"):
            ModelDims(vocab_size=5, bos_id=2, eos_id=2)


class TestMethodConfig:
    def test_unknown_method(self):
        with pytest.raises(ConfigurationError, match="method"):
            MethodConfig(method="bayesian")

    def test_deep_ensemble_needs_seeds(self):
        with pytest.raises(ConfigurationError, match="member seeds"):
            MethodConfig(method="de", seeds=(1,))

    def test_deep_ensemble_seeds_distinct(self):
        with pytest.raises(ConfigurationError, match="distinct"):
            MethodConfig(method="de", seeds=(1, 1, 2))

    def test_single_model_rejects_seed_list(self):
        with pytest.raises(ConfigurationError, match="at most one seed"):
            MethodConfig(method="mcd", seeds=(1, 2))

    def test_dropout_rate_range(self):
        with pytest.raises(ConfigurationError, match="dropout_rate"):
            MethodConfig(method="mcd", dropout_rate=1.0)

    def test_sngp_knob_ranges(self):
        with pytest.raises(ConfigurationError, match="cov_momentum"):
            SngpConfig(cov_momentum=1.0)
        with pytest.raises(ConfigurationError, match="kernel_scale"):
            SngpConfig(kernel_scale=0.0)


class TestInit:
    def test_base_shapes_and_zero_biases(self):
        dims = small_dims()
        m = init_model(dims, MethodConfig(method="base"), seed=11)
        assert m.params.embed.shape == (8, 5)
        assert m.params.w_h.shape == (7, 10)
        assert m.params.w_o.shape == (8, 7)
        assert np.all(m.params.b_h == 0.0) and np.all(m.params.b_o == 0.0)
        assert m.sngp_state is None and m.be_state is None

    def test_deterministic_and_seed_sensitive(self):
        dims = small_dims()
        a = init_model(dims, MethodConfig(method="base"), seed=3)
        b = init_model(dims, MethodConfig(method="base"), seed=3)
        c = init_model(dims, MethodConfig(method="base"), seed=4)
        assert np.array_equal(a.params.embed, b.params.embed)
        assert np.array_equal(a.params.w_o, b.params.w_o)
        assert not np.array_equal(a.params.embed, c.params.embed)

    def test_gp_head_replaces_output_layer(self):
        dims = small_dims()
        cfg = MethodConfig(method="sngp", sngp=SngpConfig(rff_dim=16))
        m = init_model(dims, cfg, seed=5)
        assert m.params.w_o is None and m.params.b_o is None
        assert m.sngp_state.beta.shape == (8, 16)
        assert m.sngp_state.w_r.shape == (16, 7)
        assert np.array_equal(m.sngp_state.precision, np.eye(16))
        assert not m.sngp_state.covariance_valid
        assert np.all((m.sngp_state.b_r >= 0.0) & (m.sngp_state.b_r < 2.0 * math.pi))

    def test_kernel_scale_divides_feature_weights(self):
        dims = small_dims()
        m1 = init_model(dims, MethodConfig(method="sngp", sngp=SngpConfig(rff_dim=16, kernel_scale=1.0)), seed=9)
        m2 = init_model(dims, MethodConfig(method="sngp", sngp=SngpConfig(rff_dim=16, kernel_scale=2.0)), seed=9)
        assert np.allclose(m1.sngp_state.w_r, 2.0 * m2.sngp_state.w_r)

    def test_batch_ensemble_fast_weights_near_one(self):
        dims = small_dims()
        m = init_model(dims, MethodConfig(method="be", be_size=3), seed=2)
        assert m.be_state.r.shape == (3, 7)
        assert m.be_state.s.shape == (3, 10)
        assert np.all(np.abs(m.be_state.r - 1.0) <= 0.1)
        assert np.all(np.abs(m.be_state.s - 1.0) <= 0.1)


class TestForward:
    def test_matches_scalar_oracle_base(self):
        rs = np.random.default_rng(100)
        for trial in range(30):
            vocab = int(rs.integers(4, 12))
            dims = ModelDims(vocab_size=vocab, embed_dim=int(rs.integers(2, 6)),
                             hidden_dim=int(rs.integers(2, 8)))
            m = init_model(dims, MethodConfig(method="base"), seed=trial)
            inp = random_tokens(rs, vocab)
            prefix = random_tokens(rs, vocab, lo=0, hi=4)
            got = forward_logits(m, inp, prefix)
            want = forward_oracle(m, inp, prefix)
            assert np.allclose(got, want, atol=1e-12)

    def test_matches_scalar_oracle_gp_head(self):
        rs = np.random.default_rng(200)
        for trial in range(20):
            vocab = int(rs.integers(4, 10))
            dims = ModelDims(vocab_size=vocab, embed_dim=3, hidden_dim=4)
            cfg = MethodConfig(method="sngp", sngp=SngpConfig(rff_dim=int(rs.integers(2, 20))))
            m = init_model(dims, cfg, seed=1000 + trial)
            inp = random_tokens(rs, vocab)
            prefix = random_tokens(rs, vocab, lo=0, hi=4)
            got = forward_logits(m, inp, prefix)
            want = forward_oracle(m, inp, prefix)
            assert np.allclose(got, want, atol=1e-12)

    def test_empty_prefix_equals_bos_prefix(self):
        dims = small_dims()
        m = init_model(dims, MethodConfig(method="base"), seed=7)
        a = forward_logits(m, (3, 4), ())
        b = forward_logits(m, (3, 4), (dims.bos_id,))
        assert np.array_equal(a, b)

    def test_dropout_methods_without_seed_match_base(self):
        # same init seed draws identical shared weights for base and mcd
        dims = small_dims()
        base = init_model(dims, MethodConfig(method="base"), seed=21)
        mcd = init_model(dims, MethodConfig(method="mcd", dropout_rate=0.3), seed=21)
        a = forward_logits(base, (3, 4, 5), (6,))
        b = forward_logits(mcd, (3, 4, 5), (6,))
        assert np.array_equal(a, b)

    def test_dropout_seed_changes_and_reproduces(self):
        dims = small_dims()
        m = init_model(dims, MethodConfig(method="mcd", dropout_rate=0.5), seed=21)
        plain = forward_logits(m, (3, 4), (5,))
        s1 = forward_logits(m, (3, 4), (5,), sample_seed=77)
        s1again = forward_logits(m, (3, 4), (5,), sample_seed=77)
        s2 = forward_logits(m, (3, 4), (5,), sample_seed=78)
        assert np.array_equal(s1, s1again)
        assert not np.array_equal(plain, s1)
        assert not np.array_equal(s1, s2)

    def test_non_dropout_method_ignores_sample_seed(self):
        dims = small_dims()
        m = init_model(dims, MethodConfig(method="base"), seed=21)
        a = forward_logits(m, (3, 4), (5,))
        b = forward_logits(m, (3, 4), (5,), sample_seed=123)
        assert np.array_equal(a, b)

    def test_train_mode_dropout_requires_seed(self):
        dims = small_dims()
        m = init_model(dims, MethodConfig(method="mcd", dropout_rate=0.1), seed=21)
        with pytest.raises(ConfigurationError, match="sample_seed"):
            forward_logits(m, (3,), (), mode="train")

    def test_unit_fast_weights_match_base(self):
        # shared draws coincide for base and be up to the point the fast
        # weights are drawn, so forcing r=s=1 must reproduce base exactly
        dims = small_dims()
        base = init_model(dims, MethodConfig(method="base"), seed=13)
        be = init_model(dims, MethodConfig(method="be", be_size=3), seed=13)
        be.be_state.r[:] = 1.0
        be.be_state.s[:] = 1.0
        want = forward_logits(base, (3, 4, 6), (7,))
        for k in range(3):
            got = forward_logits(be, (3, 4, 6), (7,), be_member=k)
            assert np.allclose(got, want, atol=1e-12)

    def test_members_differ_with_real_fast_weights(self):
        dims = small_dims()
        be = init_model(dims, MethodConfig(method="be", be_size=3), seed=13)
        a = forward_logits(be, (3, 4), (5,), be_member=0)
        b = forward_logits(be, (3, 4), (5,), be_member=1)
        assert not np.array_equal(a, b)

    def test_member_out_of_range(self):
        dims = small_dims()
        be = init_model(dims, MethodConfig(method="be", be_size=3), seed=13)
        with pytest.raises(InputError, match="member"):
            forward_logits(be, (3,), (), be_member=3)

    def test_token_out_of_range(self):
        m = init_model(small_dims(), MethodConfig(method="base"), seed=1)
        with pytest.raises(InputError, match="token id"):
            forward_logits(m, (3, 8), ())

    def test_bad_mode(self):
        m = init_model(small_dims(), MethodConfig(method="base"), seed=1)
        with pytest.raises(ConfigurationError, match="mode"):
            forward_logits(m, (3,), (), mode="test")

    def test_non_finite_guard(self):
        m = init_model(small_dims(), MethodConfig(method="base"), seed=1)
        m.params.w_o[0, 0] = np.inf
        with pytest.raises(NumericalStateError, match="non-finite"):
            forward_logits(m, (3,), ())


class TestDropoutMask:
    def test_inverted_scaling_values(self):
        mask = dropout_mask(5, 0.25, 1000)
        kept = mask[mask > 0]
        assert np.allclose(kept, 1.0 / 0.75)
        # keep probability should be near 1 - rate
        assert 0.65 < kept.size / 1000 < 0.85

    def test_deterministic_per_seed(self):
        assert np.array_equal(dropout_mask(9, 0.5, 64), dropout_mask(9, 0.5, 64))
        assert not np.array_equal(dropout_mask(9, 0.5, 64), dropout_mask(10, 0.5, 64))


class TestSpectralNormalize:
    def test_diagonal_known_answer(self):
        w = np.diag([3.0, 1.0])
        got = spectral_normalize(w, 1.0, 100)
        assert np.allclose(got, w / 3.0, atol=1e-9)

    def test_random_matrices_meet_bound_and_keep_direction(self):
        rs = np.random.default_rng(4)
        for _ in range(20):
            w = rs.standard_normal((int(rs.integers(2, 12)), int(rs.integers(2, 12))))
            bound = float(rs.uniform(0.2, 2.0))
            got = spectral_normalize(w, bound, 100)
            sigma = np.linalg.svd(w, compute_uv=False)[0]
            assert np.linalg.svd(got, compute_uv=False)[0] <= bound * (1.0 + 1e-6)
            if sigma > bound:
                assert np.allclose(got, w * (bound / sigma), rtol=1e-6, atol=1e-9)

    def test_within_bound_is_identity(self):
        rs = np.random.default_rng(5)
        w = rs.standard_normal((4, 4)) * 0.01
        got = spectral_normalize(w, 1.0, 50)
        assert np.array_equal(got, w)

    def test_zero_matrix(self):
        got = spectral_normalize(np.zeros((3, 5)), 1.0, 10)
        assert np.array_equal(got, np.zeros((3, 5)))

    def test_bad_arguments(self):
        with pytest.raises(ConfigurationError, match="power_iters"):
            spectral_normalize(np.eye(2), 1.0, 0)
        with pytest.raises(ConfigurationError, match="bound"):
            spectral_normalize(np.eye(2), 0.0, 10)
        with pytest.raises(NumericalStateError, match="non-finite"):
            spectral_normalize(np.array([[np.nan, 0.0], [0.0, 1.0]]), 1.0, 10)
        with pytest.raises(InputError, match="matrix"):
            spectral_normalize(np.zeros(3), 1.0, 10)


class TestGpFeatures:
    def _state(self, rff_dim=6, hidden=4, seed=3):
        m = init_model(ModelDims(vocab_size=5, embed_dim=3, hidden_dim=hidden),
                       MethodConfig(method="sngp", sngp=SngpConfig(rff_dim=rff_dim)),
                       seed=seed)
        return m.sngp_state

    def test_matches_manual_formula(self):
        state = self._state()
        h = np.array([0.2, -0.4, 0.1, 0.9])
        got = gp_features(h, state)
        want = [math.sqrt(2.0 / 6) * math.cos(float(state.w_r[i] @ h) + float(state.b_r[i]))
                for i in range(6)]
        assert np.allclose(got, want, atol=1e-12)

    def test_squared_norm_at_most_two(self):
        state = self._state(rff_dim=32)
        rs = np.random.default_rng(8)
        phi = gp_features(rs.standard_normal((50, 4)), state)
        assert np.all(np.sum(phi**2, axis=1) <= 2.0 + 1e-12)

    def test_row_stack_consistent_with_single(self):
        state = self._state()
        rows = np.random.default_rng(9).standard_normal((5, 4))
        stacked = gp_features(rows, state)
        # gemm and gemv may round differently in the last ulp
        for i in range(5):
            assert np.allclose(stacked[i], gp_features(rows[i], state), rtol=1e-13, atol=0)


class TestPrecisionUpdate:
    def _state(self, rff_dim):
        m = init_model(ModelDims(vocab_size=5, embed_dim=3, hidden_dim=4),
                       MethodConfig(method="sngp", sngp=SngpConfig(rff_dim=rff_dim)),
                       seed=1)
        return m.sngp_state

    def test_hand_case(self):
        state = self._state(2)
        phi = np.array([[1.0, 0.0], [0.0, 1.0]])
        new = update_precision(state, phi, momentum=0.5, ridge=0.0)
        assert np.allclose(new.precision, 0.75 * np.eye(2), atol=1e-15)

    def test_momentum_one_keeps_matrix(self):
        state = self._state(3)
        new = update_precision(state, np.ones((4, 3)), momentum=1.0)
        assert np.array_equal(new.precision, state.precision)

    def test_momentum_zero_ridge_zero_is_batch_term(self):
        state = self._state(3)
        rs = np.random.default_rng(2)
        phi = rs.standard_normal((10, 3))
        new = update_precision(state, phi, momentum=0.0, ridge=0.0)
        assert np.allclose(new.precision, phi.T @ phi / 10.0, atol=1e-14)

    def test_stays_symmetric_positive_definite(self):
        state = self._state(8)
        rs = np.random.default_rng(3)
        for _ in range(50):
            phi = rs.standard_normal((int(rs.integers(1, 6)), 8))
            state = update_precision(state, phi, momentum=0.999)
        assert np.array_equal(state.precision, state.precision.T)
        assert np.min(np.linalg.eigvalsh(state.precision)) > 0.0

    def test_update_invalidates_covariance(self):
        state = finalize_covariance(self._state(2))
        assert state.covariance_valid
        new = update_precision(state, np.ones((1, 2)), momentum=0.9)
        assert not new.covariance_valid

    def test_bad_arguments(self):
        state = self._state(2)
        with pytest.raises(ConfigurationError, match="momentum"):
            update_precision(state, np.ones((1, 2)), momentum=1.5)
        with pytest.raises(InputError, match="dimension"):
            update_precision(state, np.ones((1, 3)), momentum=0.5)


class TestPredictiveVariance:
    def _state(self, rff_dim):
        m = init_model(ModelDims(vocab_size=5, embed_dim=3, hidden_dim=4),
                       MethodConfig(method="sngp", sngp=SngpConfig(rff_dim=rff_dim)),
                       seed=4)
        return m.sngp_state

    def test_identity_precision_gives_squared_norm(self):
        state = finalize_covariance(self._state(4))
        phi = np.array([[1.0, 2.0, 0.0, 0.0], [0.5, 0.0, 0.5, 0.0]])
        got = predictive_variance(state, phi)
        assert np.allclose(got, [5.0, 0.5], atol=1e-12)

    def test_matches_explicit_inverse(self):
        state = self._state(5)
        rs = np.random.default_rng(6)
        a = rs.standard_normal((9, 5))
        state.precision = a.T @ a / 9.0 + 0.1 * np.eye(5)
        state = finalize_covariance(state)
        phi = rs.standard_normal((7, 5))
        got = predictive_variance(state, phi)
        inv = np.linalg.inv(state.precision)
        want = np.einsum("bd,de,be->b", phi, inv, phi)
        assert np.allclose(got, want, rtol=1e-10)

    def test_requires_finalized_estimate(self):
        state = self._state(3)
        with pytest.raises(NumericalStateError, match="finalized"):
            predictive_variance(state, np.ones((1, 3)))

    def test_rejects_indefinite_precision(self):
        state = self._state(2)
        state.precision = np.array([[1.0, 0.0], [0.0, -1.0]])
        state = finalize_covariance(state)
        with pytest.raises(NumericalStateError, match="positive definite"):
            predictive_variance(state, np.ones((1, 2)))


class TestMeanFieldLogits:
    def test_zero_factor_is_identity(self):
        logits = np.array([1.0, -2.0, 0.5])
        got = mean_field_logits(logits, np.array(9.0), 0.0)
        assert np.array_equal(got, logits)

    def test_scalar_variance_formula(self):
        logits = np.array([2.0, -1.0])
        got = mean_field_logits(logits, 3.0, 0.5)
        assert np.allclose(got, logits / math.sqrt(2.5), atol=1e-15)

    def test_row_variances_broadcast(self):
        logits = np.arange(6.0).reshape(2, 3)
        var = np.array([0.0, 8.0])
        got = mean_field_logits(logits, var, 1.0)
        assert np.array_equal(got[0], logits[0])
        assert np.allclose(got[1], logits[1] / 3.0, atol=1e-15)

    def test_negative_variance_rejected(self):
        with pytest.raises(NumericalStateError, match="negative"):
            mean_field_logits(np.ones(3), np.array([-0.1]), 1.0)

    def test_negative_factor_rejected(self):
        with pytest.raises(ConfigurationError, match="factor"):
            mean_field_logits(np.ones(3), np.ones(1), -1.0)


class TestRowStructure:
    def test_single_example_layout(self):
        dims = small_dims()
        ex = ExampleRecord(id="a", input=(3, 4), reference=(5, 6))
        rows = build_rows([ex], dims)
        assert rows.targets.tolist() == [5, 6, dims.eos_id]
        assert rows.row_spans == ((0, 3),)
        # context weights: half weight on each input token, every row
        want_ctx = np.zeros(8)
        want_ctx[3] = want_ctx[4] = 0.5
        for r in range(3):
            assert np.allclose(rows.ctx_weights[r], want_ctx, atol=1e-15)
        # prefix weights: bos one-hot, then growing reference averages
        assert rows.prefix_weights[0][dims.bos_id] == 1.0
        assert rows.prefix_weights[1][5] == 1.0
        assert np.allclose(rows.prefix_weights[2][[5, 6]], [0.5, 0.5], atol=1e-15)
        assert np.allclose(rows.ctx_weights.sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(rows.prefix_weights.sum(axis=1), 1.0, atol=1e-12)

    def test_batch_loss_matches_stepwise_forward(self):
        dims = small_dims()
        m = init_model(dims, MethodConfig(method="base"), seed=31)
        examples = [
            ExampleRecord(id="a", input=(3, 4), reference=(5,)),
            ExampleRecord(id="b", input=(6, 7, 3), reference=(4, 6)),
        ]
        terms = []
        for ex in examples:
            seq = tuple(ex.reference) + (dims.eos_id,)
            for t, target in enumerate(seq):
                logits = forward_logits(m, ex.input, tuple(ex.reference)[:t])
                shifted = logits - logits.max()
                logp = shifted - math.log(float(np.exp(shifted).sum()))
                terms.append(-logp[target])
        want = float(np.mean(terms))
        got = batch_loss(m, examples)
        assert abs(got - want) < 1e-12

    def test_duplicated_batch_keeps_loss(self):
        dims = small_dims()
        m = init_model(dims, MethodConfig(method="base"), seed=32)
        ex = ExampleRecord(id="a", input=(3, 4, 5), reference=(6, 7))
        assert abs(batch_loss(m, [ex]) - batch_loss(m, [ex, ex])) < 1e-12

    def test_gp_head_loss_matches_stepwise_forward(self):
        dims = small_dims()
        cfg = MethodConfig(method="sngp", sngp=SngpConfig(rff_dim=12))
        m = init_model(dims, cfg, seed=33)
        ex = ExampleRecord(id="a", input=(3, 4), reference=(5, 6))
        seq = (5, 6, dims.eos_id)
        terms = []
        for t, target in enumerate(seq):
            logits = forward_logits(m, ex.input, seq[:t])
            shifted = logits - logits.max()
            logp = shifted - math.log(float(np.exp(shifted).sum()))
            terms.append(-logp[target])
        assert abs(batch_loss(m, [ex]) - float(np.mean(terms))) < 1e-12


class TestStreamHelper:
    def test_distinct_parts_distinct_streams(self):
        a = stream(1, "x").random(4)
        b = stream(1, "y").random(4)
        assert not np.array_equal(a, b)
