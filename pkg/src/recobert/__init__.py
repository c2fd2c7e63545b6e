"""Catalog-specialized language model for text-based item-to-item recommendation.

Train a small transformer encoder on an item catalog with a combined
masked-token and title-description matching objective, embed every item,
and rank candidates for a seed item by blending four similarity scores.
"""

from .catalog import (
    AnnotationSet,
    Catalog,
    CatalogItem,
    import_wine_csv,
    load_annotations,
    load_catalog,
    save_catalog,
    split_train_val,
)
from .encoder import (
    EncoderConfig,
    ItemEmbedding,
    Parameters,
    checkpoint_load,
    checkpoint_save,
    forward,
    init_model,
    pool_features,
)
from .metrics import EvalReport, evaluate, hit_ratio_at_k, mean_percentile_rank, mean_reciprocal_rank
from .objectives import LossBreakdown, c_tdm, loss_mlm, loss_tdm, total_loss_and_gradients
from .ranker import EmbeddingStore, RankedList, embed_catalog, rank, znormalize
from .tokenizer import Vocabulary, apply_masking, build_vocab, encode_pair, tokenize
from .trainer import TrainerConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "AnnotationSet", "Catalog", "CatalogItem", "import_wine_csv", "load_annotations",
    "load_catalog", "save_catalog", "split_train_val",
    "EncoderConfig", "ItemEmbedding", "Parameters", "checkpoint_load", "checkpoint_save",
    "forward", "init_model", "pool_features",
    "EvalReport", "evaluate", "hit_ratio_at_k", "mean_percentile_rank", "mean_reciprocal_rank",
    "LossBreakdown", "c_tdm", "loss_mlm", "loss_tdm", "total_loss_and_gradients",
    "EmbeddingStore", "RankedList", "embed_catalog", "rank", "znormalize",
    "Vocabulary", "apply_masking", "build_vocab", "encode_pair", "tokenize",
    "TrainerConfig", "TrainResult", "train",
    "__version__",
]
