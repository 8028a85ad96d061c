"""Model assembly, training, recommendation, cache and MF baseline."""

from nere.recsys.cache import RecommendationCache, export_cache, load_cache
from nere.recsys.mf import MFBaseline, mf_recommend, mf_recommend_many, train_mf_baseline
from nere.recsys.model import (
    VARIANTS,
    ModelConfig,
    NereModel,
    build_model,
    model_inputs,
    predict_embedding,
    window_inputs,
)
from nere.recsys.recommend import build_cache, recommend, recommend_batch
from nere.recsys.training import TrainConfig, evaluate_mse, split_rows, train

__all__ = [
    "VARIANTS",
    "MFBaseline",
    "ModelConfig",
    "NereModel",
    "RecommendationCache",
    "TrainConfig",
    "build_cache",
    "build_model",
    "evaluate_mse",
    "export_cache",
    "load_cache",
    "mf_recommend",
    "mf_recommend_many",
    "model_inputs",
    "predict_embedding",
    "recommend",
    "recommend_batch",
    "split_rows",
    "train",
    "train_mf_baseline",
    "window_inputs",
]
