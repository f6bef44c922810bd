"""Head tests: forward passes against composed oracles, backward passes
against finite differences, and the structural invariants of the three
classifier kinds."""

import numpy as np
import pytest

from factgrid.errors import ShapeError, TargetError
from factgrid.heads import (
    FactHead,
    FlatHead,
    ForkHead,
    Trunk,
    bilinear_grid_backward,
    build_model,
    fork_pair_score,
    pair_grid,
)
from factgrid.nn import grad_check, masked_nll_rows, masked_softmax
from helpers import full_grid_vocab, grid_oracle, softmax_oracle


def model_loss_fn(model, features, adj_ids, noun_ids, param):
    """Closure for grad_check: full loss of one model, gradient of one tensor."""

    def f():
        model.zero_grad()
        loss = model.accumulate_batch(features, adj_ids, noun_ids)
        return loss, param.grad.copy()

    return f


def random_batch(vocab, feature_dim, batch, rng, seen_only=True):
    pool = sorted(vocab.seen_pairs) if seen_only else sorted(
        vocab.seen_pairs | vocab.unseen_pairs
    )
    picks = rng.integers(len(pool), size=batch)
    adj_ids = np.array([pool[p][0] for p in picks])
    noun_ids = np.array([pool[p][1] for p in picks])
    features = rng.normal(size=(batch, feature_dim))
    return features, adj_ids, noun_ids


class TestPairGrid:
    def test_rank_one_structure(self):
        column = np.array([[1.0], [2.0], [-3.0], [0.5]])
        grid = pair_grid(np.ones((3, 1)), column)
        for row in grid:
            np.testing.assert_array_equal(row, column[:, 0])

    def test_zero_noun_latents(self):
        grid = pair_grid(np.random.default_rng(0).normal(size=(3, 2)), np.zeros((5, 2)))
        np.testing.assert_array_equal(grid, np.zeros((3, 5)))

    def test_matches_double_loop(self):
        rng = np.random.default_rng(1)
        adj = rng.normal(size=(3, 2))
        noun = rng.normal(size=(4, 2))
        np.testing.assert_allclose(pair_grid(adj, noun), grid_oracle(adj, noun), atol=1e-12)

    def test_latent_width_mismatch(self):
        with pytest.raises(ShapeError):
            pair_grid(np.zeros((3, 2)), np.zeros((4, 3)))


class TestBilinearBackward:
    def test_zero_upstream(self):
        dadj, dnoun = bilinear_grid_backward(
            np.zeros((3, 4)), np.ones((3, 2)), np.ones((4, 2))
        )
        np.testing.assert_array_equal(dadj, np.zeros((3, 2)))
        np.testing.assert_array_equal(dnoun, np.zeros((4, 2)))

    def test_ones_upstream_hand_case(self):
        column = np.array([[1.0], [2.0], [3.0]])
        dadj, _ = bilinear_grid_backward(np.ones((2, 3)), np.ones((2, 1)), column)
        np.testing.assert_array_equal(dadj, [[6.0], [6.0]])

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        adj = rng.normal(size=(4, 3))
        noun = rng.normal(size=(5, 3))
        weights = rng.normal(size=(4, 5))  # L = sum(weights * grid), dL/dgrid = weights

        def loss_of(a, n):
            return float((weights * (a @ n.T)).sum())

        dadj, dnoun = bilinear_grid_backward(weights, adj, noun)
        eps = 1e-6
        for mat, grad in ((adj, dadj), (noun, dnoun)):
            flat = mat.reshape(-1)
            for c in range(flat.size):
                orig = flat[c]
                flat[c] = orig + eps
                plus = loss_of(adj, noun)
                flat[c] = orig - eps
                minus = loss_of(adj, noun)
                flat[c] = orig
                numeric = (plus - minus) / (2 * eps)
                analytic = grad.reshape(-1)[c]
                denom = max(abs(analytic), abs(numeric), 1e-2)
                assert abs(analytic - numeric) / denom < 1e-6


class TestForkPairScore:
    def test_one_hot_product(self):
        grid = fork_pair_score(np.array([0.0, 1.0]), np.array([0.0, 0.0, 1.0]))
        expected = np.zeros((2, 3))
        expected[1, 2] = 1.0
        np.testing.assert_array_equal(grid, expected)

    def test_uniform_product(self):
        grid = fork_pair_score(np.full(4, 0.25), np.full(5, 0.2))
        np.testing.assert_allclose(grid, np.full((4, 5), 1.0 / 20.0), atol=1e-15)

    def test_hand_arithmetic(self):
        grid = fork_pair_score(np.array([0.3, 0.7]), np.array([0.5, 0.5]))
        np.testing.assert_allclose(grid, [[0.15, 0.15], [0.35, 0.35]], atol=1e-15)

    def test_grid_sums_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            adj = softmax_oracle(rng.normal(size=6))
            noun = softmax_oracle(rng.normal(size=9))
            grid = fork_pair_score(adj, noun)
            assert grid.min() >= 0.0
            assert abs(grid.sum() - 1.0) < 1e-9


class TestFlatHead:
    def test_zero_parameters_uniform(self):
        vocab = full_grid_vocab(3, 4, unseen_cells=[(0, 0)])
        head = FlatHead(6, vocab, rng=None)
        probs = head.forward_probs(np.random.default_rng(4).normal(size=(2, 6)))
        np.testing.assert_allclose(probs, np.full((2, 11), 1.0 / 11.0), atol=1e-12)

    def test_single_seen_pair(self):
        vocab = full_grid_vocab(1, 1)
        head = FlatHead(3, vocab, rng=np.random.default_rng(5))
        probs = head.forward_probs(np.random.default_rng(6).normal(size=(4, 3)))
        np.testing.assert_allclose(probs, np.ones((4, 1)), atol=1e-12)

    def test_matches_composed_oracle(self):
        rng = np.random.default_rng(7)
        vocab = full_grid_vocab(3, 3)
        head = FlatHead(5, vocab, rng)
        x = rng.normal(size=(3, 5))
        probs = head.forward_probs(x)
        logits = x @ head.classifier.weight.T + head.classifier.bias
        for row, logit_row in zip(probs, logits):
            np.testing.assert_allclose(row, softmax_oracle(logit_row), atol=1e-12)

    def test_loss_values(self):
        vocab = full_grid_vocab(2, 3)
        head = FlatHead(4, vocab, rng=None)
        x = np.random.default_rng(8).normal(size=(5, 4))
        pairs = np.array([0, 1, 2, 3, 4])
        assert head.loss(x, pairs) == pytest.approx(np.log(6.0), abs=1e-12)

    def test_unseen_training_label_rejected(self):
        vocab = full_grid_vocab(2, 3, unseen_cells=[(1, 2)])
        head = FlatHead(4, vocab, rng=np.random.default_rng(9))
        x = np.zeros((1, 4))
        with pytest.raises(TargetError):
            head.loss(x, np.array([vocab.pair_index(1, 2)]))

    def test_gradcheck(self):
        rng = np.random.default_rng(10)
        vocab = full_grid_vocab(3, 4, unseen_cells=[(2, 3)])
        model = build_model("flat", vocab, feature_dim=5, trunk_widths=(6,), seed=11)
        features, adj_ids, noun_ids = random_batch(vocab, 5, 4, rng)
        for param in model.parameters():
            f = model_loss_fn(model, features, adj_ids, noun_ids, param)
            result = grad_check(f, param.value, tol=1e-5, name=param.name)
            assert result.passed, (param.name, result.failures[:3])


class TestForkHead:
    def test_zero_parameters_uniform(self):
        vocab = full_grid_vocab(4, 6)
        head = ForkHead(5, vocab, hidden=3, rng=None)
        adj_probs, noun_probs = head.forward_probs(
            np.random.default_rng(12).normal(size=(2, 5))
        )
        np.testing.assert_allclose(adj_probs, np.full((2, 4), 0.25), atol=1e-12)
        np.testing.assert_allclose(noun_probs, np.full((2, 6), 1.0 / 6.0), atol=1e-12)

    def test_single_word_vocabularies(self):
        vocab = full_grid_vocab(1, 1)
        head = ForkHead(3, vocab, hidden=2, rng=np.random.default_rng(13))
        adj_probs, noun_probs = head.forward_probs(
            np.random.default_rng(14).normal(size=(3, 3))
        )
        np.testing.assert_allclose(adj_probs, np.ones((3, 1)), atol=1e-12)
        np.testing.assert_allclose(noun_probs, np.ones((3, 1)), atol=1e-12)

    def test_matches_composed_oracle(self):
        rng = np.random.default_rng(15)
        vocab = full_grid_vocab(3, 5)
        head = ForkHead(4, vocab, hidden=6, rng=rng)
        x = rng.normal(size=(2, 4))
        adj_probs, noun_probs = head.forward_probs(x)

        def branch_oracle(hidden, act, out):
            pre = x @ hidden.weight.T + hidden.bias
            mid = np.where(pre >= 0, pre, pre * act.slope)
            return mid @ out.weight.T + out.bias

        adj_logits = branch_oracle(head.adj_hidden, head.adj_act, head.adj_out)
        noun_logits = branch_oracle(head.noun_hidden, head.noun_act, head.noun_out)
        for b in range(2):
            np.testing.assert_allclose(adj_probs[b], softmax_oracle(adj_logits[b]), atol=1e-12)
            np.testing.assert_allclose(noun_probs[b], softmax_oracle(noun_logits[b]), atol=1e-12)

    def test_zero_parameter_loss_is_log_counts(self):
        vocab = full_grid_vocab(4, 7)
        head = ForkHead(5, vocab, hidden=3, rng=None)
        x = np.random.default_rng(16).normal(size=(3, 5))
        loss = head.loss(x, np.array([0, 1, 2]), np.array([0, 3, 6]))
        assert loss == pytest.approx(np.log(4.0) + np.log(7.0), abs=1e-12)

    def test_loss_matches_two_cross_entropies(self):
        rng = np.random.default_rng(17)
        vocab = full_grid_vocab(3, 4)
        head = ForkHead(5, vocab, hidden=4, rng=rng)
        x = rng.normal(size=(4, 5))
        adj_ids = np.array([0, 2, 1, 0])
        noun_ids = np.array([3, 1, 0, 2])
        adj_logits, noun_logits = head.forward_logits(x)
        expected = 0.0
        for b in range(4):
            adj_dist = masked_softmax(adj_logits[b], np.ones(3, dtype=bool))
            noun_dist = masked_softmax(noun_logits[b], np.ones(4, dtype=bool))
            expected += -np.log(adj_dist.probs[adj_ids[b]])
            expected += -np.log(noun_dist.probs[noun_ids[b]])
        assert head.loss(x, adj_ids, noun_ids) == pytest.approx(expected / 4, abs=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(18)
        vocab = full_grid_vocab(3, 4)
        model = build_model(
            "fork", vocab, feature_dim=5, trunk_widths=(6,), fork_hidden=4, seed=19
        )
        features, adj_ids, noun_ids = random_batch(vocab, 5, 4, rng)
        for param in model.parameters():
            f = model_loss_fn(model, features, adj_ids, noun_ids, param)
            result = grad_check(f, param.value, tol=1e-5, name=param.name)
            assert result.passed, (param.name, result.failures[:3])


class TestFactHead:
    def test_grid_matches_double_loop_batch(self):
        rng = np.random.default_rng(20)
        vocab = full_grid_vocab(3, 4)
        head = FactHead(5, vocab, latent_dim=2, rng=rng)
        x = rng.normal(size=(6, 5))
        adj_latent, noun_latent, grid = head.forward(x)
        for b in range(6):
            np.testing.assert_allclose(
                grid[b], grid_oracle(adj_latent[b], noun_latent[b]), atol=1e-10
            )

    def test_zero_parameters_give_zero_grid_and_log_m_loss(self):
        vocab = full_grid_vocab(3, 4, unseen_cells=[(0, 1), (2, 2)])
        head = FactHead(5, vocab, latent_dim=2, rng=None)
        x = np.random.default_rng(21).normal(size=(2, 5))
        _, _, grid = head.forward(x)
        np.testing.assert_array_equal(grid, np.zeros((2, 3, 4)))
        loss = head.loss(x, np.array([vocab.pair_index(0, 0)] * 2))
        assert loss == pytest.approx(np.log(10.0), abs=1e-12)

    def test_single_seen_pair_zero_loss(self):
        vocab = full_grid_vocab(1, 1)
        head = FactHead(4, vocab, latent_dim=3, rng=np.random.default_rng(22))
        x = np.random.default_rng(23).normal(size=(3, 4))
        assert head.loss(x, np.zeros(3, dtype=np.int64)) == pytest.approx(0.0, abs=1e-12)

    def test_unseen_target_rejected(self):
        vocab = full_grid_vocab(2, 2, unseen_cells=[(1, 1)])
        head = FactHead(4, vocab, latent_dim=2, rng=np.random.default_rng(24))
        with pytest.raises(TargetError):
            head.loss(np.zeros((1, 4)), np.array([vocab.pair_index(1, 1)]))

    def test_grid_gradient_zero_outside_mask(self):
        rng = np.random.default_rng(25)
        vocab = full_grid_vocab(3, 4, unseen_cells=[(0, 0), (1, 2), (2, 3)])
        head = FactHead(5, vocab, latent_dim=2, rng=rng)
        x = rng.normal(size=(4, 5))
        _, _, grid = head.forward(x)
        targets = np.full(4, vocab.pair_index(0, 1))
        _, dlogits = masked_nll_rows(grid.reshape(4, -1), vocab.seen_mask, targets)
        assert np.all(dlogits[:, ~vocab.seen_mask] == 0.0)

    def test_rank_bound(self):
        rng = np.random.default_rng(26)
        vocab = full_grid_vocab(8, 9)
        for latent_dim in (1, 2, 3):
            head = FactHead(6, vocab, latent_dim=latent_dim, rng=rng)
            x = rng.normal(size=(3, 6))
            _, _, grid = head.forward(x)
            for b in range(3):
                singular = np.linalg.svd(grid[b], compute_uv=False)
                assert np.all(singular[latent_dim:] < 1e-8)

    def test_gradcheck_all_parameter_groups(self):
        rng = np.random.default_rng(27)
        vocab = full_grid_vocab(3, 4, unseen_cells=[(1, 1)])
        model = build_model(
            "fact", vocab, feature_dim=5, trunk_widths=(6, 5), latent_dim=2, seed=28
        )
        features, adj_ids, noun_ids = random_batch(vocab, 5, 4, rng)
        for param in model.parameters():
            f = model_loss_fn(model, features, adj_ids, noun_ids, param)
            result = grad_check(f, param.value, tol=1e-5, name=param.name)
            assert result.passed, (param.name, result.failures[:3])


class TestModel:
    @pytest.mark.parametrize("kind", ["flat", "fork", "fact"])
    def test_single_step_decreases_loss(self, kind):
        rng = np.random.default_rng(29)
        vocab = full_grid_vocab(3, 4, unseen_cells=[(2, 3)])
        for trial in range(5):
            model = build_model(kind, vocab, feature_dim=6, seed=100 + trial)
            features, adj_ids, noun_ids = random_batch(vocab, 6, 1, rng)
            before = model.batch_loss(features, adj_ids, noun_ids)
            model.zero_grad()
            model.accumulate_batch(features, adj_ids, noun_ids)
            for param in model.parameters():
                param.value -= 1e-4 * param.grad
            after = model.batch_loss(features, adj_ids, noun_ids)
            assert after < before

    def test_pair_scores_shapes_and_policies(self):
        vocab = full_grid_vocab(3, 4, unseen_cells=[(0, 2)])
        features = np.random.default_rng(30).normal(size=(2, 6))
        for kind in ("flat", "fork", "fact"):
            model = build_model(kind, vocab, feature_dim=6, seed=31)
            scores = model.pair_scores(features)
            assert scores.shape == (2, 12)
            if kind == "flat":
                assert not model.supports_unseen
                assert np.all(np.isneginf(scores[:, ~vocab.seen_mask]))
            else:
                assert model.supports_unseen
                assert np.all(np.isfinite(scores))

    def test_fork_scores_are_distributions_over_grid(self):
        vocab = full_grid_vocab(4, 5)
        model = build_model("fork", vocab, feature_dim=6, seed=32)
        scores = model.pair_scores(np.random.default_rng(33).normal(size=(7, 6)))
        assert scores.min() >= 0.0
        np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-9)

    def test_trunk_requires_cached_forward_for_backward(self):
        trunk = Trunk(4, (5,), np.random.default_rng(34))
        trunk.forward(np.zeros((2, 4)))
        with pytest.raises(ShapeError):
            trunk.backward(np.zeros((2, 5)))
