"""In-memory pipeline: synthetic data -> set vectors -> tensors -> index.

The CLI runs the same stages through files; this module is the shared
implementation and the fast path used by the evaluation suite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from nere import annindex, synthgen, textvec
from nere.evalkit import EvalData
from nere.features import assemble_sequences, encode_set_meta, fit_encoders, group_sessions
from nere.recsys.training import split_rows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbedConfig:
    dim: int = 128
    window: int = 5
    epochs: int = 50
    x_max: float = 100.0
    alpha: float = 0.75
    lr: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class BenchmarkConfig:
    """The standard synthetic benchmark: 20,000 windows over 2,000 sets."""

    synth: synthgen.SynthConfig = field(default_factory=synthgen.SynthConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    index: annindex.IndexConfig = field(default_factory=annindex.IndexConfig)
    T: int = 5
    test_fraction: float = 0.2
    split_seed: int = 0


def split_groups(sessions, fraction, seed):
    """Split (user, subject) groups into (train_keys, test_keys) sets."""
    keys = list(group_sessions(sessions))
    kept, held = split_rows(len(keys), fraction, seed)
    return {keys[i] for i in kept}, {keys[i] for i in held}


def make_features(sessions, catalog, set_ids, vectors, T, test_fraction, seed):
    """Fit encoders on training groups only, assemble windows, split rows by group."""
    train_keys, _ = split_groups(sessions, test_fraction, seed)
    encoders = fit_encoders([s for s in sessions if (s.user_id, s.broad_subject) in train_keys], catalog)
    triple = assemble_sequences(sessions, catalog, set_ids, vectors, encoders, T=T)
    is_train = np.array([k in train_keys for k in triple.row_keys], dtype=bool)
    return triple, encoders, np.flatnonzero(is_train), np.flatnonzero(~is_train)


def build_eval_data(config: BenchmarkConfig | None = None) -> tuple[EvalData, dict]:
    """Run every data stage in memory; returns the data and intermediate artifacts."""
    config = config or BenchmarkConfig()
    catalog = synthgen.generate_catalog(config.synth)
    sessions = synthgen.generate_sessions(config.synth, catalog)
    e = config.embed
    table, set_ids, vectors = textvec.embed_catalog(
        catalog, dim=e.dim, window=e.window, epochs=e.epochs, x_max=e.x_max, alpha=e.alpha, lr=e.lr, seed=e.seed
    )
    triple, encoders, train_rows, test_rows = make_features(
        sessions, catalog, set_ids, vectors, config.T, config.test_fraction, config.split_seed
    )
    graph = annindex.build(vectors, config.index, ids=set_ids)
    data = EvalData(
        triple=triple,
        train_rows=train_rows,
        test_rows=test_rows,
        set_ids=set_ids,
        set_vectors=vectors,
        set_meta=encode_set_meta(catalog, encoders),
        graph=graph,
        manifest=encoders.manifest(),
    )
    extras = {"catalog": catalog, "sessions": sessions, "table": table, "encoders": encoders}
    return data, extras
