"""CIF-localized contrastive hotword retrieval at toy scale."""

__version__ = "0.1.0"

from .cif import CifAlignment, TailPolicy, accumulate_and_fire, scale_weights_to_length
from .encoders import ClarModel, EmbeddingBank, ModelConfig
from .matching import ShortPolicy, rank_topk, score_all, similarity
from .pipeline import emit_prompt, retrieve, retrieve_many

__all__ = [
    "CifAlignment", "TailPolicy", "accumulate_and_fire", "scale_weights_to_length",
    "ClarModel", "EmbeddingBank", "ModelConfig",
    "ShortPolicy", "rank_topk", "score_all", "similarity",
    "emit_prompt", "retrieve", "retrieve_many",
]
