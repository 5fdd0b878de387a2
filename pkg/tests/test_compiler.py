"""Compiler: packing geometry, the diagonal matrix product, the rotate-and-add
dot product, operation accounting and full-pipeline equivalence."""

import math

import numpy as np
import pytest

from cipherforest.activation import fit_tanh
from cipherforest.compiler import (
    PackingLayout,
    build_diagonals,
    compile_forest,
    compiled_from_json,
    compiled_to_json,
    complexity_report,
    depth_requirement,
    dot_product,
    evaluate,
    evaluate_scores,
    pack_input,
    packed_matmul,
)
from cipherforest.engine import EngineParams, make_engine
from cipherforest.errors import DepthBudgetError, DimensionError, LayoutError
from cipherforest.forest import pad_forest, train_forest
from cipherforest.neural import convert_forest, forward_soft, normalize_forest

from conftest import xor_dataset

N = 512


def ref_engine(budget=10, slots=N):
    return make_engine(EngineParams(slot_count=slots, depth_budget=budget))


@pytest.fixture(scope="module")
def compiled_small(small_model_norm):
    poly = fit_tanh(4.0, 7)
    params = EngineParams(slot_count=N, depth_budget=10)
    return compile_forest(small_model_norm, params, poly), params, poly


class TestLayout:
    def test_capacity_examples(self):
        # 50 trees of 32 leaves fit 8192 slots; 70 trees of 64 leaves do not
        PackingLayout(n_trees=50, n_leaves=32, n_features=4, slot_count=8192)
        with pytest.raises(LayoutError) as err:
            PackingLayout(n_trees=70, n_leaves=64, n_features=4, slot_count=8192)
        assert "8890 > 8192" in str(err.value)

    def test_block_geometry(self):
        lay = PackingLayout(n_trees=3, n_leaves=4, n_features=2, slot_count=64)
        assert lay.block_width == 7
        assert lay.active_width == 21
        assert [lay.offset(i) for i in range(3)] == [0, 7, 14]

    def test_json_roundtrip(self):
        lay = PackingLayout(n_trees=2, n_leaves=3, n_features=5, slot_count=64,
                            taus=(np.array([0, 3]), np.array([1, 4])))
        back = PackingLayout.from_json(lay.to_json())
        assert back.n_trees == 2 and back.n_leaves == 3
        assert [t.tolist() for t in back.taus] == [[0, 3], [1, 4]]


class TestPackInput:
    def test_three_leaf_replication_shape(self):
        """K = 3: the block is (z1, z2, z3, z1, z2) with z3 the padding zero,
        i.e. head, zero, then the head again."""
        lay = PackingLayout(n_trees=1, n_leaves=3, n_features=3, slot_count=16,
                            taus=(np.array([0, 1]),))
        out = pack_input(lay, np.array([0.1, 0.2, 0.9]))
        assert np.allclose(out[:5], [0.1, 0.2, 0.0, 0.1, 0.2])
        assert np.all(out[5:] == 0)

    def test_single_tree_two_leaves(self):
        lay = PackingLayout(n_trees=1, n_leaves=2, n_features=2, slot_count=16,
                            taus=(np.array([0]),))
        out = pack_input(lay, np.array([0.3, 0.9]))
        assert np.allclose(out[:3], [0.3, 0.0, 0.3])

    def test_rotation_windows_match_cyclic_oracle(self):
        """For every rotation i < K the first K block slots equal the
        i-shifted cyclic window of (head | 0)."""
        k = 5
        lay = PackingLayout(n_trees=2, n_leaves=k, n_features=6, slot_count=64,
                            taus=(np.arange(k - 1), np.arange(k - 1) + 1))
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, 6)
        packed = pack_input(lay, x)
        for l, tau in enumerate(lay.taus):
            z = np.concatenate([x[tau], [0.0]])  # the square-padded vector
            off = lay.offset(l)
            for i in range(k):
                window = np.roll(packed, -i)[off : off + k]
                assert np.allclose(window, np.roll(z, -i))

    def test_dimension_error(self):
        lay = PackingLayout(n_trees=1, n_leaves=2, n_features=2, slot_count=16,
                            taus=(np.array([0]),))
        with pytest.raises(DimensionError):
            pack_input(lay, np.array([0.5]))


class TestPackedMatmul:
    def test_worked_3x3_example_slot_for_slot(self):
        """One 3x3 block: the three generalized diagonals against the three
        cyclic windows reproduce the dense product in the first three slots
        and zeros elsewhere."""
        lay = PackingLayout(n_trees=1, n_leaves=3, n_features=3, slot_count=64,
                            taus=(np.array([0, 1]),))
        a = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]])
        z = np.array([0.11, 0.22, 0.33])
        diags = build_diagonals([a], lay)
        assert diags[0][:5].tolist() == [1, 5, 9, 0, 0]
        assert diags[1][:5].tolist() == [2, 6, 7, 0, 0]
        assert diags[2][:5].tolist() == [3, 4, 8, 0, 0]
        replicated = np.zeros(64)
        replicated[:5] = [z[0], z[1], z[2], z[0], z[1]]
        eng = ref_engine(budget=2, slots=64)
        out = eng.decrypt_decode(packed_matmul(eng, diags, eng.encode_encrypt(replicated)))
        expect = np.zeros(64)
        expect[:3] = a @ z
        assert np.allclose(out, expect, atol=1e-12)

    def test_identity_blocks_pass_through(self):
        k, l = 4, 3
        lay = PackingLayout(n_trees=l, n_leaves=k, n_features=4, slot_count=64,
                            taus=tuple(np.arange(k - 1) for _ in range(l)))
        rng = np.random.default_rng(1)
        packed = np.zeros(64)
        blocks = []
        for i in range(l):
            z = rng.normal(size=k)
            blocks.append(z)
            off = lay.offset(i)
            packed[off : off + k] = z
            packed[off + k : off + 2 * k - 1] = z[: k - 1]
        eng = ref_engine(budget=2, slots=64)
        diags = build_diagonals([np.eye(k)] * l, lay)
        out = eng.decrypt_decode(packed_matmul(eng, diags, eng.encode_encrypt(packed)))
        for i in range(l):
            off = lay.offset(i)
            assert np.allclose(out[off : off + k], blocks[i])

    def test_random_blocks_against_dense_oracle(self):
        """Eight random 5x5 per-tree products, checked against plain matmul."""
        rng = np.random.default_rng(2)
        k, l = 5, 8
        lay = PackingLayout(n_trees=l, n_leaves=k, n_features=4,
                            slot_count=128,
                            taus=tuple(np.arange(k - 1) for _ in range(l)))
        mats = [rng.normal(size=(k, k)) for _ in range(l)]
        zs = [rng.normal(size=k) for _ in range(l)]
        packed = np.zeros(128)
        for i in range(l):
            off = lay.offset(i)
            packed[off : off + k] = zs[i]
            packed[off + k : off + 2 * k - 1] = zs[i][: k - 1]
        eng = ref_engine(budget=2, slots=128)
        out = eng.decrypt_decode(
            packed_matmul(eng, build_diagonals(mats, lay), eng.encode_encrypt(packed))
        )
        for i in range(l):
            off = lay.offset(i)
            assert np.max(np.abs(out[off : off + k] - mats[i] @ zs[i])) <= 1e-9
            assert np.allclose(out[off + k : off + 2 * k - 1], 0.0, atol=1e-9)

    def test_exact_operation_counts(self):
        k = 6
        lay = PackingLayout(n_trees=2, n_leaves=k, n_features=5, slot_count=64,
                            taus=(np.arange(k - 1), np.arange(k - 1)))
        eng = ref_engine(budget=2, slots=64)
        c = eng.encode_encrypt(np.zeros(64))
        packed_matmul(eng, build_diagonals([np.eye(k)] * 2, lay), c)
        cnt = eng.counters()
        assert (cnt.additions, cnt.plain_multiplications, cnt.rotations) == (k, k, k)
        assert cnt.cipher_multiplications == 0
        assert cnt.depth_consumed == 1


class TestDotProduct:
    def test_projection_weight(self):
        eng = ref_engine(budget=2, slots=64)
        w = np.zeros(64)
        w[0] = 1.0
        c = np.random.default_rng(3).uniform(-1, 1, 64)
        out = eng.decrypt_decode(dot_product(eng, w, eng.encode_encrypt(c), 1))
        assert np.isclose(out[0], c[0])

    def test_all_ones_hand_sum(self):
        eng = ref_engine(budget=2, slots=64)
        w = np.zeros(64)
        w[:4] = 1.0
        c = np.zeros(64)
        c[:4] = [1, 2, 3, 4]
        out = dot_product(eng, w, eng.encode_encrypt(c), 4)
        assert eng.decrypt_decode(out)[0] == 10.0
        cnt = eng.counters()
        assert cnt.rotations == 2 and cnt.additions == 2  # ceil(log2 4) rounds

    def test_random_including_non_power_of_two_widths(self):
        rng = np.random.default_rng(4)
        eng = ref_engine(budget=2, slots=N)
        for _ in range(40):
            aw = int(rng.integers(2, N))
            w = np.zeros(N)
            w[:aw] = rng.normal(size=aw)
            c = np.zeros(N)
            c[:aw] = rng.normal(size=aw)
            out = eng.decrypt_decode(dot_product(eng, w, eng.encode_encrypt(c), aw))
            assert abs(out[0] - w @ c) <= 1e-8

    def test_trailing_weight_assertion(self):
        eng = ref_engine(budget=2, slots=64)
        w = np.ones(64)  # nonzero beyond the active width
        with pytest.raises(AssertionError):
            dot_product(eng, w, eng.encode_encrypt(np.zeros(64)), 4)


class TestCompile:
    def test_depth_requirement_formula(self, small_model_norm):
        for m, levels in ((3, 8), (7, 10), (15, 12)):
            poly = fit_tanh(4.0, m)
            assert depth_requirement(poly) == levels
            compiled = compile_forest(
                small_model_norm, EngineParams(slot_count=N, depth_budget=levels), poly
            )
            assert compiled.depth_requirement == levels

    def test_budget_too_small_rejected(self, small_model_norm):
        poly = fit_tanh(4.0, 7)
        with pytest.raises(DepthBudgetError) as err:
            compile_forest(small_model_norm, EngineParams(slot_count=N, depth_budget=9), poly)
        assert "10" in str(err.value)

    def test_unnormalized_rejected(self, small_model):
        from cipherforest.errors import NormalizationError

        poly = fit_tanh(4.0, 7)
        with pytest.raises(NormalizationError):
            compile_forest(small_model, EngineParams(slot_count=N, depth_budget=10), poly)

    def test_packed_zero_structure(self, compiled_small):
        compiled, _, _ = compiled_small
        lay = compiled.layout
        k, bw = lay.n_leaves, lay.block_width
        for l in range(lay.n_trees):
            off = lay.offset(l)
            assert np.all(compiled.bias_packed[off + k : off + bw] == 0)
            assert compiled.thresholds_packed[off + k - 1] == 0
            for d in compiled.diagonals:
                assert np.all(d[off + k : off + bw] == 0)
        tail = lay.active_width
        assert np.all(compiled.thresholds_packed[tail:] == 0)
        assert np.all(compiled.out_weights_packed[:, tail:] == 0)


class TestEvaluate:
    def test_reference_matches_clear_polynomial_forward(self, small_model_norm,
                                                        compiled_small):
        compiled, params, poly = compiled_small
        eng = make_engine(params)
        rng = np.random.default_rng(5)
        xs = rng.uniform(0, 1, (1000, 4))
        clear = forward_soft(small_model_norm, xs, poly)
        worst = 0.0
        for i in range(len(xs)):
            ct = eng.encode_encrypt(pack_input(compiled.layout, xs[i]))
            scores = evaluate_scores(eng, compiled, ct)
            worst = max(worst, float(np.max(np.abs(scores - clear[i]))))
        assert worst <= 1e-9

    def test_section_counts_match_complexity_report(self, compiled_small):
        compiled, params, _ = compiled_small
        eng = make_engine(params)
        ct = eng.encode_encrypt(pack_input(compiled.layout, np.full(4, 0.3)))
        trace = evaluate(eng, compiled, ct)
        pred = complexity_report(compiled)
        for name, got in trace.sections.items():
            want = pred["sections"][name]
            assert got.additions == want.additions, name
            assert got.plain_multiplications == want.plain_multiplications, name
            assert got.cipher_multiplications == want.cipher_multiplications, name
            assert got.rotations == want.rotations, name

    def test_linear_layer_counts_formulas(self, compiled_small):
        """The three linear sections cost exactly (1 add | K add, K mul,
        K rot | C log-aw add, C mul, C log-aw rot)."""
        compiled, params, _ = compiled_small
        eng = make_engine(params)
        ct = eng.encode_encrypt(pack_input(compiled.layout, np.full(4, 0.6)))
        trace = evaluate(eng, compiled, ct)
        k = compiled.layout.n_leaves
        c = compiled.n_classes
        log_aw = math.ceil(math.log2(compiled.layout.active_width))
        s1 = trace.sections["comparison_layer"]
        assert (s1.additions, s1.plain_multiplications, s1.rotations) == (1, 0, 0)
        s2 = trace.sections["matching_layer"]
        assert (s2.additions, s2.plain_multiplications, s2.rotations) == (k, k, k)
        s3 = trace.sections["output_layer"]
        assert (s3.additions, s3.plain_multiplications, s3.rotations) == (
            c * log_aw, c, c * log_aw,
        )

    def test_depth_consumption_exact(self, compiled_small):
        compiled, params, _ = compiled_small
        eng = make_engine(params)
        ct = eng.encode_encrypt(pack_input(compiled.layout, np.full(4, 0.2)))
        trace = evaluate(eng, compiled, ct)
        assert trace.depth_consumed == compiled.depth_requirement
        assert trace.output_level == params.depth_budget - compiled.depth_requirement
        # the trace depth must not degrade when the engine is reused
        ct2 = eng.encode_encrypt(pack_input(compiled.layout, np.full(4, 0.9)))
        trace2 = evaluate(eng, compiled, ct2)
        assert trace2.depth_consumed == compiled.depth_requirement

    def test_insufficient_level_rejected(self, compiled_small):
        compiled, params, _ = compiled_small
        eng = make_engine(params)
        ct = eng.encode_encrypt(pack_input(compiled.layout, np.full(4, 0.2)))
        shallow = eng.drop_level(ct, compiled.depth_requirement - 1)
        with pytest.raises(DepthBudgetError):
            evaluate(eng, compiled, shallow)

    def test_block_isolation(self, small_model_norm, compiled_small):
        """Zeroing one tree's packed output weights removes exactly that
        tree's contribution."""
        compiled, params, poly = compiled_small
        lay = compiled.layout
        x = np.full(4, 0.37)
        eng = make_engine(params)
        base = evaluate_scores(eng, compiled, eng.encode_encrypt(pack_input(lay, x)))
        drop = 2
        import copy

        hollow = copy.deepcopy(compiled)
        off = lay.offset(drop)
        hollow.out_weights_packed[:, off : off + lay.block_width] = 0.0
        eng2 = make_engine(params)
        partial = evaluate_scores(eng2, hollow, eng2.encode_encrypt(pack_input(lay, x)))

        from cipherforest.neural import tree_forward

        net = small_model_norm.networks[drop]
        contribution = small_model_norm.alphas[drop] * (
            tree_forward(net, x[None, :], poly.eval_clear)[0] - net.out_bias
        )
        assert np.max(np.abs(base - partial - contribution)) <= 1e-9

    def test_range_safety_sweep(self, small_model_norm, compiled_small):
        """With a normalized model both activation inputs stay inside the
        fitted domain across a large input sweep (clear instrumentation)."""
        compiled, _, poly = compiled_small
        rng = np.random.default_rng(6)
        xs = rng.uniform(0, 1, (10_000, 4))
        for net in small_model_norm.networks:
            pre1 = net.comparison_pre(xs)
            assert pre1.min() >= -1 - 1e-12 and pre1.max() <= 1 + 1e-12
            u = np.tanh(small_model_norm.dilatation * pre1)
            pre2 = net.match_pre(u)
            assert pre2.min() >= -1 - 1e-12 and pre2.max() <= 1 + 1e-12

    def test_compiled_serialization_roundtrip(self, compiled_small):
        compiled, params, _ = compiled_small
        back = compiled_from_json(compiled_to_json(compiled))
        eng = make_engine(params)
        x = np.full(4, 0.81)
        a = evaluate_scores(eng, compiled, eng.encode_encrypt(pack_input(compiled.layout, x)))
        eng2 = make_engine(params)
        b = evaluate_scores(eng2, back, eng2.encode_encrypt(pack_input(back.layout, x)))
        assert np.allclose(a, b, atol=1e-12)


class TestWorkedCountExample:
    def test_l10_k8_c2_counts(self):
        """L=10, K=8, C=2: matching layer (8, 8, 8); the active width is
        10*15 = 150, so each class score needs ceil(log2 150) = 8 rounds."""
        data = xor_dataset(rows=600, d=3, seed=42)
        forest = pad_forest(
            train_forest(data, n_trees=10, max_depth=3, rng_seed=3), k_target=8
        )
        model = normalize_forest(convert_forest(forest))
        params = EngineParams(slot_count=256, depth_budget=10)
        compiled = compile_forest(model, params, fit_tanh(4.0, 7))
        assert compiled.layout.n_leaves == 8
        assert compiled.layout.active_width == 150
        eng = make_engine(params)
        ct = eng.encode_encrypt(pack_input(compiled.layout, np.full(3, 0.5)))
        trace = evaluate(eng, compiled, ct)
        s2 = trace.sections["matching_layer"]
        assert (s2.additions, s2.plain_multiplications, s2.rotations) == (8, 8, 8)
        s3 = trace.sections["output_layer"]
        assert s3.rotations == 2 * 8
        assert s3.additions == 2 * 8
        assert s3.plain_multiplications == 2


class TestComplexityFormulas:
    @staticmethod
    def fake_compiled(l, k, c, m, n):
        lay = PackingLayout(n_trees=l, n_leaves=k, n_features=4, slot_count=n,
                            taus=tuple(np.zeros(k - 1, dtype=int) for _ in range(l)))
        from cipherforest.compiler import CompiledForest

        poly = fit_tanh(4.0, m)
        return CompiledForest(
            layout=lay, thresholds_packed=np.zeros(n), bias_packed=np.zeros(n),
            diagonals=[np.zeros(n)] * k, out_weights_packed=np.zeros((c, n)),
            out_biases=np.zeros(c), activation=poly,
            depth_requirement=2 * poly.depth + 2, n_classes=c,
        )

    def test_matching_layer_scales_with_leaves_only(self):
        pred = complexity_report(self.fake_compiled(50, 32, 2, 7, 8192))
        s2 = pred["sections"]["matching_layer"]
        assert (s2.additions, s2.plain_multiplications, s2.rotations) == (32, 32, 32)

    def test_single_output_needs_one_score_multiply(self):
        pred = complexity_report(self.fake_compiled(5, 4, 1, 7, 256))
        assert pred["sections"]["output_layer"].plain_multiplications == 1

    def test_asymptotic_note_present(self):
        pred = complexity_report(self.fake_compiled(2, 2, 2, 3, 64))
        assert "O(n" in pred["note"]


class TestPredictedVsMeasuredSweep:
    def test_random_configurations(self):
        """Measured = predicted section counts over random forest shapes."""
        rng = np.random.default_rng(7)
        poly = fit_tanh(4.0, 3)
        for trial in range(6):
            n_trees = int(rng.integers(2, 7))
            depth = int(rng.integers(2, 4))
            data = xor_dataset(rows=300, d=3, seed=trial)
            forest = pad_forest(
                train_forest(data, n_trees=n_trees, max_depth=depth, rng_seed=trial)
            )
            model = normalize_forest(convert_forest(forest))
            params = EngineParams(slot_count=N, depth_budget=8)
            compiled = compile_forest(model, params, poly)
            eng = make_engine(params)
            ct = eng.encode_encrypt(
                pack_input(compiled.layout, rng.uniform(0, 1, 3))
            )
            trace = evaluate(eng, compiled, ct)
            pred = complexity_report(compiled)
            for name, got in trace.sections.items():
                assert got.as_dict() == {
                    **pred["sections"][name].as_dict(),
                    "depth_consumed": got.as_dict()["depth_consumed"],
                }, name
