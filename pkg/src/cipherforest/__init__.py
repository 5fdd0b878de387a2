"""cipherforest: decision forests converted to exact neural encodings and
compiled to packed leveled homomorphic-encryption programs."""

from .activation import ChebyshevPoly, eval_homomorphic, fit_tanh, poly_depth
from .compiler import (
    CompiledForest,
    PackingLayout,
    compile_forest,
    complexity_report,
    depth_requirement,
    dot_product,
    evaluate,
    evaluate_scores,
    pack_input,
    packed_matmul,
)
from .engine import CipherHandle, Engine, EngineParams, OpCounter, make_engine
from .forest import (
    Dataset,
    DecisionTree,
    Forest,
    forest_from_json,
    forest_to_json,
    pad_forest,
    pad_to_leaf_count,
    train_cart,
    train_forest,
)
from .metrics import agreement, classification_metrics
from .neural import (
    ForestNetwork,
    TreeNetwork,
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
)
from .pipeline import ExperimentConfig, run_pipeline

__version__ = "0.1.0"
