from .base import (
    BPR,
    MODEL_KINDS,
    NCF,
    SVD,
    VAE,
    Batch,
    PerExampleGrads,
    Recommender,
    RecommendationList,
    recommend_all,
    recommend_topk,
    topk_from_scores,
)
from .mf import BPRModel, SVDModel
from .ncf import NCFModel
from .vae import VAEModel

_REGISTRY = {SVD: SVDModel, BPR: BPRModel, NCF: NCFModel, VAE: VAEModel}


def init(kind: str, num_users: int, num_items: int, seed: int = 0, **dims) -> Recommender:
    """Build a freshly initialised model of the given kind."""
    try:
        cls = _REGISTRY[kind.upper()]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}") from None
    return cls(num_users, num_items, seed=seed, **dims)


def from_state_dict(state: dict) -> Recommender:
    import numpy as np

    model = init(state["kind"], state["num_users"], state["num_items"], state["seed"], **state["dims"])
    for name, values in state["params"].items():
        model.params[name][...] = np.asarray(values)
    return model


__all__ = [
    "BPR", "MODEL_KINDS", "NCF", "SVD", "VAE", "Batch", "PerExampleGrads", "Recommender",
    "RecommendationList", "recommend_all", "recommend_topk", "topk_from_scores",
    "BPRModel", "SVDModel", "NCFModel", "VAEModel", "init", "from_state_dict",
]
