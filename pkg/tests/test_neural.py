"""Network encoding of trees: exactness, bounds, normalization, fine-tuning."""

import numpy as np
import pytest

from cipherforest.activation import fit_tanh
from cipherforest.errors import NormalizationError, UnsupportedTaskError
from cipherforest.forest import Dataset, DecisionTree, train_cart
from cipherforest.neural import (
    convert_forest,
    convert_tree,
    finetune_last_layer,
    forward_hard,
    forward_soft,
    leaf_features,
    network_from_json,
    network_to_json,
    normalize,
    normalize_forest,
    smoothed_targets,
    xent_loss_grad,
)

from conftest import xor_dataset


def depth3_tree():
    """Three-level tree: root n0 -> (n1, n3); n1 -> (leaf0, n2);
    n2 -> (leaf1, leaf2); n3 -> (leaf3, n4); n4 -> (leaf4, leaf5)."""
    return DecisionTree(
        feature=[0, 1, 0, 0, 1],
        threshold=[0.5, 0.3, 0.6, 0.7, 0.8],
        left=[1, -1, -2, -4, -5],
        right=[3, 2, -3, 4, -6],
        root=0,
        leaf_values=np.eye(6)[:, :2] + 0.1,
        leaf_counts=[5, 3, 2, 7, 4, 1],
    )


class TestConversion:
    def test_depth3_row_pattern(self):
        """Leaf 1 is reached via root-left, n1-right, n2-left, so its row
        carries (-1, +1, -1) on comparisons (0, 1, 2) and bias -3 + 1/2."""
        net = convert_tree(depth3_tree())
        assert np.array_equal(net.match_weights[1], [-1, 1, -1, 0, 0])
        assert net.match_bias[1] == -2.5
        assert net.path_lengths.tolist() == [2, 3, 3, 2, 3, 3]

    def test_stump(self):
        stump = DecisionTree(feature=[0], threshold=[0.5], left=[-1], right=[-2],
                             root=0, leaf_values=[[1., 0.], [0., 1.]],
                             leaf_counts=[1, 1])
        net = convert_tree(stump)
        assert np.array_equal(net.match_weights, [[-1.0], [1.0]])
        assert np.array_equal(net.match_bias, [-0.5, -0.5])

    def test_row_support_equals_path_length(self):
        net = convert_tree(depth3_tree())
        nonzero = (net.match_weights != 0).sum(axis=1)
        assert np.array_equal(nonzero, net.path_lengths)

    def test_random_trees_match_classical_routing(self):
        rng = np.random.default_rng(0)
        for seed in range(5):
            data = xor_dataset(rows=500, d=3, seed=seed)
            tree = train_cart(data, max_depth=5, rng_seed=seed)
            net = convert_tree(tree)
            x = rng.uniform(0, 1, (2000, 3))
            assert np.allclose(forward_hard(net, x), tree.predict(x), atol=1e-12)

    def test_single_leaf_constant_output(self):
        tree = DecisionTree(feature=[], threshold=[], left=[], right=[], root=-1,
                            leaf_values=[[0.25, 0.75]], leaf_counts=[4])
        net = convert_tree(tree)
        assert net.n_comparisons == 0
        x = np.random.default_rng(1).uniform(0, 1, (10, 2))
        out = forward_hard(net, x)
        assert np.allclose(out, out[0])
        assert np.allclose(out[0], net.out_weights[:, 0] + net.out_bias)


class TestHardForward:
    def test_matching_layer_one_hot(self, small_model):
        """Under the sign activation exactly one matching output is +1."""
        x = np.random.default_rng(2).uniform(0, 1, (200, 4))
        feats = leaf_features(small_model, x, "hard")
        per_tree = feats.reshape(200, small_model.n_trees, small_model.n_leaves)
        per_tree = per_tree / small_model.alphas[None, :, None]
        assert np.all((per_tree == 1.0).sum(axis=2) == 1)
        assert np.all((per_tree == -1.0).sum(axis=2) == small_model.n_leaves - 1)

    def test_forest_equivalence(self, small_forest, small_model):
        x = np.random.default_rng(3).uniform(0, 1, (5000, 4))
        assert np.allclose(forward_hard(small_model, x), small_forest.predict(x),
                           atol=1e-12)

    def test_exhaustive_grid_equivalence_2d(self):
        """For 2-feature forests the input square is swept on a dense grid
        augmented with every threshold value, so ties at comparison
        boundaries are exercised exactly."""
        from cipherforest.forest import pad_forest, train_forest

        data = xor_dataset(rows=800, d=2, seed=20)
        forest = pad_forest(train_forest(data, n_trees=4, max_depth=4, rng_seed=21))
        model = convert_forest(forest)
        thresholds = np.unique(np.concatenate(
            [net.thresholds for net in model.networks] + [np.linspace(0, 1, 120)]
        ))
        g1, g2 = np.meshgrid(thresholds, thresholds)
        grid = np.column_stack([g1.ravel(), g2.ravel()])
        assert np.allclose(forward_hard(model, grid), forest.predict(grid),
                           atol=1e-12)


class TestBounds:
    def test_symbolic_extremes(self, small_model):
        for net in small_model.networks:
            lo, hi = net.preactivation_bounds()
            assert np.allclose(hi, 0.5)
            assert np.allclose(lo, -2.0 * net.path_lengths + 0.5)

    def test_normalized_extremes_inside_unit_interval(self, small_model_norm):
        for net in small_model_norm.networks:
            lo, hi = net.preactivation_bounds()
            assert lo.min() >= -1.0 - 1e-12
            assert hi.max() <= 1.0 + 1e-12

    def test_observed_preactivations_cover_bounds(self, small_model_norm):
        """On a large sweep with the sign first layer, every observed
        matching pre-activation respects the symbolic interval."""
        x = np.random.default_rng(4).uniform(0, 1, (10_000, 4))
        for net in small_model_norm.networks:
            u = np.sign(net.comparison_pre(x)) + (net.comparison_pre(x) == 0)
            pre = net.match_pre(u)
            assert pre.min() >= -1.0 - 1e-12
            assert pre.max() <= 1.0 + 1e-12


class TestNormalization:
    def test_hard_output_invariant(self, small_model, small_model_norm):
        x = np.random.default_rng(5).uniform(0, 1, (1000, 4))
        assert np.allclose(forward_hard(small_model, x),
                           forward_hard(small_model_norm, x))

    def test_argmax_leaf_stable(self, small_model, small_model_norm):
        x = np.random.default_rng(6).uniform(0, 1, (500, 4))
        for raw, norm in zip(small_model.networks, small_model_norm.networks):
            u = np.sign(raw.comparison_pre(x)) + (raw.comparison_pre(x) == 0)
            assert np.array_equal(
                np.argmax(raw.match_pre(u), axis=1),
                np.argmax(norm.match_pre(u), axis=1),
            )

    def test_scaled_interval_example(self):
        """A path of length 2 maps its raw interval [-3.5, 0.5] to
        [-0.875, 0.125] after division by 2l = 4."""
        net = convert_tree(depth3_tree())
        norm = normalize(net)
        leaf = 0  # path length 2
        lo, hi = norm.preactivation_bounds()
        assert np.isclose(lo[leaf], -3.5 / 4) and np.isclose(hi[leaf], 0.5 / 4)

    def test_double_normalization_rejected(self, small_model_norm):
        with pytest.raises(NormalizationError):
            normalize(small_model_norm.networks[0])

    def test_polynomial_requires_normalized(self, small_model):
        poly = fit_tanh(4.0, 7)
        with pytest.raises(NormalizationError):
            forward_soft(small_model, np.zeros((1, 4)), poly)


class TestSoftForward:
    def test_large_dilatation_matches_hard_away_from_thresholds(self, small_model):
        rng = np.random.default_rng(7)
        x = rng.uniform(0, 1, (3000, 4))
        far = np.ones(len(x), dtype=bool)
        for net in small_model.networks:
            far &= np.min(np.abs(x[:, net.tau] - net.thresholds), axis=1) > 1e-2
        x = x[far]
        soft = forward_soft(small_model, x, ("tanh", 1e4))
        hard = forward_hard(small_model, x)
        assert np.max(np.abs(soft - hard)) < 1e-9

    def test_stump_at_zero_input(self):
        stump = DecisionTree(feature=[0], threshold=[0.5], left=[-1], right=[-2],
                             root=0, leaf_values=[[1., 0.], [0., 1.]],
                             leaf_counts=[1, 1])
        net = convert_tree(stump)
        a = 3.0
        u = np.tanh(a * net.comparison_pre(np.zeros((1, 1))))
        assert np.isclose(u[0, 0], np.tanh(-0.5 * a))

    def test_poly_within_propagated_fit_error(self, small_model_norm):
        """tanh path vs polynomial path differ by at most the fitted error
        amplified once by the tanh Lipschitz constant through layer 2."""
        poly = fit_tanh(4.0, 15)
        eps = poly.max_error
        a = small_model_norm.dilatation
        x = np.random.default_rng(8).uniform(0, 1, (500, 4))
        tanh_out = forward_soft(small_model_norm, x, "tanh")
        poly_out = forward_soft(small_model_norm, x, poly)
        # per matching slot: |P(pre') - tanh(a pre)| <= eps + a * |pre' - pre|
        # with |pre' - pre| <= eps * max row l1 norm (= 1/2 after normalization)
        per_slot = eps + a * eps * 0.5
        bound = sum(
            alpha * np.abs(net.out_weights).sum(axis=1).max() * per_slot
            for alpha, net in zip(small_model_norm.alphas, small_model_norm.networks)
        ) * small_model_norm.n_trees
        assert np.max(np.abs(tanh_out - poly_out)) <= bound


class TestFinetune:
    def test_gradient_matches_finite_differences(self, small_model_norm):
        rng = np.random.default_rng(9)
        data = xor_dataset(rows=64, seed=10)
        feats = leaf_features(small_model_norm, data.features, "tanh")
        targets = smoothed_targets(data.labels, 2, 0.1)
        w = rng.normal(0, 0.2, (2, feats.shape[1]))
        b = rng.normal(0, 0.2, 2)
        _, gw, gb = xent_loss_grad(w, b, feats, targets)
        eps = 1e-6
        for i in range(2):
            for j in range(0, feats.shape[1], 13):
                wp, wm = w.copy(), w.copy()
                wp[i, j] += eps
                wm[i, j] -= eps
                num = (xent_loss_grad(wp, b, feats, targets)[0]
                       - xent_loss_grad(wm, b, feats, targets)[0]) / (2 * eps)
                assert abs(num - gw[i, j]) <= 1e-4 * max(abs(num), 1e-6)
        for i in range(2):
            bp, bm = b.copy(), b.copy()
            bp[i] += eps
            bm[i] -= eps
            num = (xent_loss_grad(w, bp, feats, targets)[0]
                   - xent_loss_grad(w, bm, feats, targets)[0]) / (2 * eps)
            assert abs(num - gb[i]) <= 1e-4 * max(abs(num), 1e-6)

    def test_zero_smoothing_equals_plain_xent(self):
        """With eps = 0 the gradient is the standard cross-entropy gradient
        softmax(z) - onehot."""
        rng = np.random.default_rng(11)
        feats = rng.normal(size=(32, 6))
        labels = rng.integers(0, 3, 32)
        w = rng.normal(size=(3, 6))
        b = rng.normal(size=3)
        targets = smoothed_targets(labels, 3, 0.0)
        onehot = np.zeros((32, 3))
        onehot[np.arange(32), labels] = 1.0
        assert np.allclose(targets, onehot)
        logits = feats @ w.T + b
        e = np.exp(logits - logits.max(1, keepdims=True))
        p = e / e.sum(1, keepdims=True)
        _, gw, _ = xent_loss_grad(w, b, feats, targets)
        assert np.allclose(gw, ((p - onehot) / 32).T @ feats, atol=1e-12)

    def test_zero_learning_rate_is_noop(self, small_model_norm):
        data = xor_dataset(rows=200, seed=12)
        tuned = finetune_last_layer(small_model_norm, data.features, data.labels,
                                    epochs=1, lr=0.0)
        x = np.random.default_rng(13).uniform(0, 1, (100, 4))
        assert np.allclose(forward_soft(tuned, x, "tanh"),
                           forward_soft(small_model_norm, x, "tanh"))

    def test_deterministic(self, small_model_norm):
        data = xor_dataset(rows=200, seed=14)
        a = finetune_last_layer(small_model_norm, data.features, data.labels,
                                epochs=3, lr=0.3, rng_seed=5)
        b = finetune_last_layer(small_model_norm, data.features, data.labels,
                                epochs=3, lr=0.3, rng_seed=5)
        assert network_to_json(a) == network_to_json(b)

    def test_does_not_hurt_validation_accuracy(self, small_model_norm):
        train = xor_dataset(rows=1500, seed=11)
        val = xor_dataset(rows=800, seed=99)
        tuned = finetune_last_layer(small_model_norm, train.features, train.labels,
                                    epochs=15, lr=0.5)
        before = (np.argmax(forward_soft(small_model_norm, val.features, "tanh"), 1)
                  == val.labels).mean()
        after = (np.argmax(forward_soft(tuned, val.features, "tanh"), 1)
                 == val.labels).mean()
        assert after >= before

    def test_regression_rejected(self):
        data = xor_dataset(rows=100, seed=15)
        reg = Dataset(data.features, data.labels.astype(float), data.feature_names,
                      task="regression")
        tree = train_cart(reg, max_depth=3)
        from cipherforest.forest import Forest

        model = normalize_forest(convert_forest(
            Forest(trees=[tree], alphas=[1.0], task="regression", n_classes=1,
                   n_features=4)))
        with pytest.raises(UnsupportedTaskError):
            finetune_last_layer(model, data.features, data.labels)


class TestCheckpoint:
    def test_roundtrip(self, small_model_norm):
        data = xor_dataset(rows=200, seed=16)
        tuned = finetune_last_layer(small_model_norm, data.features, data.labels,
                                    epochs=2, lr=0.2)
        back = network_from_json(network_to_json(tuned))
        x = np.random.default_rng(17).uniform(0, 1, (200, 4))
        assert np.allclose(forward_soft(back, x, "tanh"),
                           forward_soft(tuned, x, "tanh"))
        assert back.normalized
