"""Top-m recommendations through the neighbor graph."""

from __future__ import annotations

import numpy as np

from nere import annindex
from nere.recsys.cache import RecommendationCache
from nere.recsys.model import NereModel, predict_embedding


def recommend(model: NereModel, graph: annindex.KNNGraph, window, m=100):
    """Ordered set ids nearest to the predicted next-set embedding."""
    return annindex.query(graph, predict_embedding(model, window), m)


def recommend_batch(model: NereModel, graph: annindex.KNNGraph, user_meta, set_meta, content, m=100):
    """(ids [G, m], distances [G, m]) for a batch of windows."""
    pred = model.predict(
        user_meta if model.use_meta else None,
        set_meta if model.use_meta else None,
        content if model.use_content else None,
    )
    ids = np.empty((len(pred), m), dtype=np.int64)
    dists = np.empty((len(pred), m))
    for r, vec in enumerate(pred):
        ids[r], dists[r] = annindex.query_with_distances(graph, vec, m)
    return ids, dists


def build_cache(model: NereModel, graph, keys, user_meta, set_meta, content, m, model_hash, generated_at):
    ids, dists = recommend_batch(model, graph, user_meta, set_meta, content, m)
    cache = RecommendationCache(model_hash=model_hash, generated_at=int(generated_at), m=m)
    for (uid, subject), row_ids, row_d in zip(keys, ids, dists):
        cache.add(uid, subject, row_ids, row_d)
    return cache
