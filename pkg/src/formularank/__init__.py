"""Formula retrieval with contrastive operator-graph embeddings and context fusion."""

__version__ = "0.1.0"

from .augmentation import AugmentConfig, attribute_mask, augment_pair, substructure_substitute
from .encoder import build_vocab, embed_corpus, encode, init_params, load_checkpoint, save_checkpoint
from .estimators import ContextEmbedder, FormulaRetriever, StructuralEncoder
from .evaluation import evaluate, ndcg_prime_at_k, p_prime_at_k, rrf_combine
from .formula_ir import (
    FormulaRecord,
    OpgGraph,
    OptTree,
    ParseError,
    UnsupportedConstruct,
    opg_stats,
    opt_to_opg,
    parse_latex_subset,
    parse_opt_sexpr,
)
from .retrieval import SearchConfig, VectorIndex, fuse, stage1_topk
from .training import TrainConfig, info_nce_loss, train

__all__ = [
    "AugmentConfig", "ContextEmbedder", "FormulaRecord", "FormulaRetriever", "OpgGraph", "OptTree",
    "ParseError", "SearchConfig", "StructuralEncoder", "TrainConfig", "UnsupportedConstruct",
    "VectorIndex", "attribute_mask", "augment_pair", "build_vocab", "embed_corpus", "encode",
    "evaluate", "fuse", "info_nce_loss", "init_params", "load_checkpoint", "ndcg_prime_at_k",
    "opg_stats", "opt_to_opg", "p_prime_at_k", "parse_latex_subset", "parse_opt_sexpr",
    "rrf_combine", "save_checkpoint", "stage1_topk", "substructure_substitute", "train",
]
