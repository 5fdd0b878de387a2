"""Compiles a normalized forest network into packed SIMD plaintexts and
evaluates it homomorphically.

Packing: tree l owns the slot block [l*(2K-1), (l+1)*(2K-1)).  The client
reshuffles its features per tree as (x_tau | 0 | x_tau): the first K slots
are the comparison inputs padded with one zero (the square-padding column of
the matching matrix) and the trailing K-1 slots replicate the head so every
cyclic rotation 0..K-1 presents a valid window to the packed generalized
diagonals.  All L matching products therefore cost K rotations, K plaintext
multiplications and K additions regardless of L.

The class scores are rotate-and-add dot products against the concatenated
alpha-weighted output rows; slot 0 of each result carries the score, every
other slot is rotated partial-sum garbage.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .activation import ChebyshevPoly, eval_homomorphic
from .engine import CipherHandle, Engine, EngineParams, OpCounter
from .errors import DepthBudgetError, DimensionError, LayoutError, NormalizationError, SchemaError
from .neural import ForestNetwork

COMPILED_FORMAT = "cipherforest-compiled"
COMPILED_VERSION = 1
LAYOUT_FORMAT = "cipherforest-layout"


@dataclass(frozen=True)
class PackingLayout:
    """Slot geometry: L disjoint blocks of width 2K-1 in n slots."""

    n_trees: int
    n_leaves: int
    n_features: int
    slot_count: int
    taus: tuple = ()  # per-tree comparison feature order, each length K-1

    def __post_init__(self):
        if self.n_trees * self.block_width > self.slot_count:
            raise LayoutError(
                f"packing needs L(2K-1) <= n, got {self.n_trees}*"
                f"{self.block_width} = {self.active_width} > {self.slot_count}; "
                f"use fewer/shallower trees or a larger ring"
            )

    @property
    def block_width(self) -> int:
        return 2 * self.n_leaves - 1

    @property
    def active_width(self) -> int:
        return self.n_trees * self.block_width

    def offset(self, tree: int) -> int:
        return tree * self.block_width

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": LAYOUT_FORMAT,
                "L": self.n_trees,
                "K": self.n_leaves,
                "d": self.n_features,
                "block_width": self.block_width,
                "n": self.slot_count,
                "taus": [list(map(int, t)) for t in self.taus],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "PackingLayout":
        doc = json.loads(text)
        if doc.get("format") != LAYOUT_FORMAT:
            raise SchemaError("not a packing-layout document")
        layout = cls(
            n_trees=doc["L"], n_leaves=doc["K"], n_features=doc["d"],
            slot_count=doc["n"],
            taus=tuple(np.asarray(t, dtype=np.int64) for t in doc["taus"]),
        )
        if doc["block_width"] != layout.block_width:
            raise SchemaError("inconsistent block width in layout document")
        return layout


def pack_input(layout: PackingLayout, x: np.ndarray) -> np.ndarray:
    """Client-side clear-text reshuffle: per tree (x_tau | 0 | x_tau),
    concatenated and zero-padded to the full slot vector."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != layout.n_features:
        raise DimensionError(
            f"input has {x.shape[0]} features, layout expects {layout.n_features}"
        )
    out = np.zeros(layout.slot_count)
    k = layout.n_leaves
    for l, tau in enumerate(layout.taus):
        sel = x[tau]
        off = layout.offset(l)
        out[off : off + k - 1] = sel
        out[off + k : off + 2 * k - 1] = sel
    return out


def build_diagonals(matrices: list[np.ndarray], layout: PackingLayout) -> list[np.ndarray]:
    """K packed generalized diagonals of the per-tree square matrices:
    diagonal i holds mat[r, (r+i) mod K] in the first K slots of each block."""
    k = layout.n_leaves
    if len(matrices) != layout.n_trees:
        raise DimensionError("one square matrix per tree required")
    for m in matrices:
        if m.shape != (k, k):
            raise DimensionError(f"matrices must be {k}x{k}, got {m.shape}")
    rows = np.arange(k)
    diagonals = []
    for i in range(k):
        d = np.zeros(layout.slot_count)
        for l, m in enumerate(matrices):
            off = layout.offset(l)
            d[off : off + k] = m[rows, (rows + i) % k]
        diagonals.append(d)
    return diagonals


@dataclass
class CompiledForest:
    """Packed plaintext artifacts of one forest network plus its activation."""

    layout: PackingLayout
    thresholds_packed: np.ndarray        # (x_tau-aligned) (t | 0 | t) blocks
    bias_packed: np.ndarray              # (b | 0...) blocks
    diagonals: list[np.ndarray]          # K packed diagonals
    out_weights_packed: np.ndarray       # (C, n): (alpha_l W_c | 0...) blocks
    out_biases: np.ndarray               # (C,)
    activation: ChebyshevPoly
    depth_requirement: int
    n_classes: int

    def rotation_steps(self) -> list[int]:
        """Every rotation step the evaluation performs (Galois key set)."""
        steps = set(range(1, self.layout.n_leaves))
        aw = self.layout.active_width
        for i in range(max(0, math.ceil(math.log2(aw)))):
            steps.add(2**i)
        return sorted(steps)


def depth_requirement(activation: ChebyshevPoly) -> int:
    """Two activations plus the matching multiply and the score multiply."""
    return 2 * activation.depth + 2


def compile_forest(
    model: ForestNetwork, params: EngineParams, activation: ChebyshevPoly
) -> CompiledForest:
    if not model.normalized:
        raise NormalizationError("compile requires a normalized model")
    k = model.n_leaves
    l = model.n_trees
    need = depth_requirement(activation)
    if need > params.depth_budget:
        raise DepthBudgetError(
            f"compiled program needs 2*({activation.depth}) + 2 = {need} levels "
            f"> budget {params.depth_budget}; lower the activation degree or "
            f"raise depth_budget to {need}",
            params.depth_budget,
        )
    layout = PackingLayout(
        n_trees=l,
        n_leaves=k,
        n_features=model.n_features,
        slot_count=params.slot_count,
        taus=tuple(net.tau.copy() for net in model.networks),
    )
    n = params.slot_count
    bw = layout.block_width

    t_packed = np.zeros(n)
    b_packed = np.zeros(n)
    squares = []
    c = model.n_classes or 1
    w_packed = np.zeros((c, n))
    betas = np.zeros(c)
    for i, (alpha, net) in enumerate(zip(model.alphas, model.networks)):
        off = layout.offset(i)
        t_packed[off : off + k - 1] = net.thresholds
        t_packed[off + k : off + bw] = net.thresholds
        b_packed[off : off + k] = net.match_bias
        square = np.zeros((k, k))
        square[:, : k - 1] = net.match_weights
        squares.append(square)
        w_packed[:, off : off + k] = alpha * net.out_weights
        betas += alpha * net.out_bias
    return CompiledForest(
        layout=layout,
        thresholds_packed=t_packed,
        bias_packed=b_packed,
        diagonals=build_diagonals(squares, layout),
        out_weights_packed=w_packed,
        out_biases=betas,
        activation=activation,
        depth_requirement=need,
        n_classes=c,
    )


# ---------------------------------------------------------------------------
# homomorphic building blocks
# ---------------------------------------------------------------------------

def packed_matmul(
    engine: Engine,
    diagonals: list[np.ndarray],
    c: CipherHandle,
    bias: np.ndarray | None = None,
) -> CipherHandle:
    """sum_i D_i (x) rotate(c, i-1): all per-block matrix products at once.

    Performs exactly K rotations, K plaintext multiplications and K
    additions; when no affine bias is supplied the accumulator is seeded
    with an explicit zero addition to keep the count shape.
    """
    k = len(diagonals)
    acc = None
    for i in range(k):
        term = engine.mul_plain(engine.rotate(c, i), diagonals[i])
        acc = term if acc is None else engine.add(acc, term)
    if bias is not None:
        acc = engine.add(acc, bias)
    else:
        acc = engine.add(acc, 0.0)
    return acc


def dot_product(
    engine: Engine, w: np.ndarray, c: CipherHandle, active_width: int
) -> CipherHandle:
    """Slot 0 of the result holds <w, c> over the first `active_width` slots
    (ceil(log2 aw) rotate-and-add doublings); the remaining slots are
    rotated partial sums and must be treated as garbage."""
    if __debug__:
        w_arr = np.asarray(w, dtype=np.float64)
        assert np.all(w_arr[active_width:] == 0.0), (
            "dot_product weights must be zero beyond the active width"
        )
    z = engine.mul_plain(c, w)
    for i in range(max(0, math.ceil(math.log2(active_width)))):
        z = engine.add(z, engine.rotate(z, 2**i))
    return z


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalTrace:
    outputs: list[CipherHandle]          # one per class; score in slot 0
    sections: dict[str, OpCounter]
    total: OpCounter
    depth_consumed: int
    output_level: int


def evaluate(engine: Engine, compiled: CompiledForest, c_input: CipherHandle) -> EvalTrace:
    """Full pipeline on an encrypted packed input; returns per-class handles
    and per-section operation counts (linear layers match the complexity
    table exactly; activations and the output bias are tracked separately)."""
    if c_input.level < compiled.depth_requirement:
        raise DepthBudgetError(
            f"evaluate (needs {compiled.depth_requirement} levels)", c_input.level
        )
    poly = compiled.activation
    sections: dict[str, OpCounter] = {}

    def section(name):
        sections[name] = engine.counters()

    def close(name):
        sections[name] = engine.counters().delta(sections[name])

    section("comparison_layer")
    u_pre = engine.sub(c_input, compiled.thresholds_packed)
    close("comparison_layer")

    section("activation_1")
    u = eval_homomorphic(poly, engine, u_pre)
    close("activation_1")

    section("matching_layer")
    v_pre = packed_matmul(engine, compiled.diagonals, u, bias=compiled.bias_packed)
    close("matching_layer")

    section("activation_2")
    v = eval_homomorphic(poly, engine, v_pre)
    close("activation_2")

    section("output_layer")
    aw = compiled.layout.active_width
    scores = [
        dot_product(engine, compiled.out_weights_packed[c], v, aw)
        for c in range(compiled.n_classes)
    ]
    close("output_layer")

    section("output_bias")
    outputs = []
    for c, s in enumerate(scores):
        bias_vec = np.zeros(compiled.layout.slot_count)
        bias_vec[0] = compiled.out_biases[c]
        outputs.append(engine.add(s, bias_vec))
    close("output_bias")

    consumed = c_input.level - outputs[0].level
    total = OpCounter(depth_consumed=consumed)
    for delta in sections.values():
        total.additions += delta.additions
        total.plain_multiplications += delta.plain_multiplications
        total.cipher_multiplications += delta.cipher_multiplications
        total.rotations += delta.rotations
    return EvalTrace(
        outputs=outputs,
        sections=sections,
        total=total,
        depth_consumed=consumed,
        output_level=outputs[0].level,
    )


def evaluate_scores(engine: Engine, compiled: CompiledForest, c_input: CipherHandle) -> np.ndarray:
    """Trusted-mode convenience: evaluate then decrypt slot 0 of each class.
    Exists for testing; the deployed flow decrypts client-side."""
    trace = evaluate(engine, compiled, c_input)
    return np.array(
        [engine.decrypt_decode(h)[0] for h in trace.outputs]
    )


# ---------------------------------------------------------------------------
# complexity prediction
# ---------------------------------------------------------------------------

ASYMPTOTIC_NOTE = (
    "per homomorphic op on n slots: additions cost O(n), "
    "multiplications and rotations cost O(n log n)"
)


def complexity_report(compiled: CompiledForest) -> dict:
    """Predicted per-section operation counts; `evaluate` must match exactly."""
    k = compiled.layout.n_leaves
    c = compiled.n_classes
    aw = compiled.layout.active_width
    log_aw = max(0, math.ceil(math.log2(aw)))
    act = compiled.activation.plan_counts()
    act_counter = OpCounter(
        additions=act["additions"],
        plain_multiplications=act["plain_multiplications"],
        cipher_multiplications=act["cipher_multiplications"],
    )
    sections = {
        "comparison_layer": OpCounter(additions=1),
        "activation_1": act_counter,
        "matching_layer": OpCounter(additions=k, plain_multiplications=k, rotations=k),
        "activation_2": act_counter.copy(),
        "output_layer": OpCounter(
            additions=c * log_aw, plain_multiplications=c, rotations=c * log_aw
        ),
        "output_bias": OpCounter(additions=c),
    }
    total = OpCounter()
    for delta in sections.values():
        total.additions += delta.additions
        total.plain_multiplications += delta.plain_multiplications
        total.cipher_multiplications += delta.cipher_multiplications
        total.rotations += delta.rotations
    return {
        "sections": sections,
        "total": total,
        "depth_requirement": compiled.depth_requirement,
        "note": ASYMPTOTIC_NOTE,
    }


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def compiled_to_json(compiled: CompiledForest) -> str:
    return json.dumps(
        {
            "format": COMPILED_FORMAT,
            "version": COMPILED_VERSION,
            "layout": json.loads(compiled.layout.to_json()),
            "thresholds_packed": compiled.thresholds_packed.tolist(),
            "bias_packed": compiled.bias_packed.tolist(),
            "diagonals": [d.tolist() for d in compiled.diagonals],
            "out_weights_packed": compiled.out_weights_packed.tolist(),
            "out_biases": compiled.out_biases.tolist(),
            "activation": {
                "degree": compiled.activation.degree,
                "coefficients": compiled.activation.coefficients.tolist(),
                "max_error": compiled.activation.max_error,
                "dilatation": compiled.activation.dilatation,
            },
            "depth_requirement": compiled.depth_requirement,
            "n_classes": compiled.n_classes,
        }
    )


def compiled_from_json(text: str) -> CompiledForest:
    doc = json.loads(text)
    if doc.get("format") != COMPILED_FORMAT or doc.get("version") != COMPILED_VERSION:
        raise SchemaError("not a compiled-forest document")
    act = doc["activation"]
    poly = ChebyshevPoly(
        degree=int(act["degree"]),
        coefficients=np.asarray(act["coefficients"], dtype=np.float64),
        max_error=float(act["max_error"]),
        dilatation=float(act["dilatation"]),
    )
    layout = PackingLayout.from_json(json.dumps(doc["layout"]))
    return CompiledForest(
        layout=layout,
        thresholds_packed=np.asarray(doc["thresholds_packed"]),
        bias_packed=np.asarray(doc["bias_packed"]),
        diagonals=[np.asarray(d) for d in doc["diagonals"]],
        out_weights_packed=np.atleast_2d(np.asarray(doc["out_weights_packed"])),
        out_biases=np.asarray(doc["out_biases"]),
        activation=poly,
        depth_requirement=int(doc["depth_requirement"]),
        n_classes=int(doc["n_classes"]),
    )
