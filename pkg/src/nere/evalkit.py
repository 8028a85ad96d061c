"""Evaluation: recall@k, R², ablations, input-length sweep, MF baseline,
chance rate and attention heatmaps."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from nere.errors import ConfigError, PreconditionError, StateError
from nere.features import SET_COLUMNS, USER_COLUMNS
from nere.recsys.mf import mf_recommend_many, train_mf_baseline
from nere.recsys.model import VARIANTS, ModelConfig, NereModel, build_model, model_inputs
from nere.recsys.recommend import recommend_batch
from nere.recsys.training import TrainConfig, train


# -- metrics --------------------------------------------------------------------

def recall_from_lists(lists, truths):
    """(recall, hits, n) for ranked lists against one true id per row."""
    truths = list(truths)
    if len(truths) == 0:
        raise PreconditionError("recall needs a non-empty test set")
    if len(lists) != len(truths):
        raise PreconditionError(f"{len(lists)} recommendation lists for {len(truths)} truths")
    hits = sum(int(t in set(np.asarray(r).tolist())) for r, t in zip(lists, truths))
    return hits / len(truths), hits, len(truths)


def recall_at_k(recommend_fn, test_windows, truths, k=100):
    """Fraction of windows whose true next set is in ``recommend_fn(window, k)``."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    test_windows = list(test_windows)
    truths = list(truths)
    if len(test_windows) == 0:
        raise PreconditionError("recall needs a non-empty test set")
    if len(test_windows) != len(truths):
        raise PreconditionError("truths must align with test windows")
    lists = [list(recommend_fn(w, k))[:k] for w in test_windows]
    return recall_from_lists(lists, truths)[0]


def binomial_se(p, n):
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def gap_se(p1, p2, n):
    """Standard error of the difference of two recall estimates over n windows each."""
    return math.sqrt(binomial_se(p1, n) ** 2 + binomial_se(p2, n) ** 2)


def r_squared(pred, truth):
    """Uniform mean over dimensions of 1 - SS_res/SS_tot; constant dims score 0."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or truth.ndim != 2:
        raise PreconditionError(f"pred {pred.shape} and truth {truth.shape} must be equal 2-D shapes")
    if truth.shape[0] < 2:
        raise PreconditionError("r_squared needs at least 2 rows")
    mu = truth.mean(axis=0)
    ss_tot = ((truth - mu) ** 2).sum(axis=0)
    ss_res = ((truth - pred) ** 2).sum(axis=0)
    # relative cutoff so float noise on a constant column does not count as variance
    scale = np.maximum(np.abs(mu), 1.0) ** 2 * truth.shape[0]
    live = ss_tot > 1e-24 * scale
    per_dim = np.zeros(truth.shape[1])
    per_dim[live] = 1.0 - ss_res[live] / ss_tot[live]
    return float(per_dim.mean())


class RandomRecommender:
    """Uniform k-subset of the catalog per call (the chance-rate reference)."""

    def __init__(self, set_ids, seed=0):
        self.set_ids = np.asarray(set_ids)
        self.rng = np.random.default_rng(seed)

    def __call__(self, window, k):
        return self.set_ids[self.rng.choice(len(self.set_ids), size=k, replace=False)]


# -- benchmark data ---------------------------------------------------------------

@dataclass
class EvalData:
    """Everything the protocol needs: tensors, a fixed row split and the index."""

    triple: object
    train_rows: np.ndarray
    test_rows: np.ndarray
    set_ids: np.ndarray
    set_vectors: np.ndarray
    set_meta: np.ndarray  # encoded set metadata aligned with set_ids
    graph: object
    manifest: dict

    @property
    def n_sets(self):
        return len(self.set_ids)

    def truths(self, rows=None):
        rows = self.test_rows if rows is None else rows
        return self.triple.target_ids[rows]


def evaluate_model(model: NereModel, data: EvalData, k=100, rows=None):
    """R² and recall@k of ``model`` on the test rows."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    rows = data.test_rows if rows is None else np.asarray(rows)
    if len(rows) == 0:
        raise PreconditionError("evaluation needs test rows")
    um, sm, ct = model_inputs(model, data.triple, rows)
    pred = model.predict(um, sm, ct)
    r2 = r_squared(pred, data.triple.target[rows])
    ids, _ = recommend_batch(model, data.graph, um, sm, ct, m=k)
    recall, hits, n = recall_from_lists(ids, data.truths(rows))
    return {"r_squared": r2, "recall": recall, "hits": hits, "n": n}


def _train_and_eval(data, variant, model_config, train_config, seed, k):
    model = build_model(data.manifest, variant, model_config, seed=seed)
    history = train(model, data.triple, train_config, rows=data.train_rows)
    result = evaluate_model(model, data, k)
    result["epochs"] = len(history)
    result["best_val_mse"] = min(h["val_mse"] for h in history) if history else None
    return model, history, result


def ablation_suite(data: EvalData, variants=VARIANTS, model_config=None, train_config=None, seed=0, k=100):
    """Train and evaluate each variant on identical data, seed and schedule."""
    variants = list(variants)
    if len(set(variants)) != len(variants):
        raise ConfigError(f"duplicate variants in {variants}")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; valid: {VARIANTS}")
    model_config = model_config or ModelConfig()
    out = {}
    for v in variants:
        _, history, result = _train_and_eval(data, v, model_config, train_config, seed, k)
        out[v] = {"result": result, "history": history}
    return out


def sequence_length_sweep(data: EvalData, lengths=(1, 2, 3, 4), variant="both", model_config=None, train_config=None, seed=0, k=100):
    """One model per input length L (most recent L steps of each window)."""
    T = data.triple.T
    lengths = list(lengths)
    for L in lengths:
        if not 1 <= L < T:
            raise ConfigError(f"input length {L} must satisfy 1 <= L < T={T}")
    base = model_config or ModelConfig()
    out = {}
    for L in lengths:
        cfg = ModelConfig(**{**base.__dict__, "input_len": L})
        _, history, result = _train_and_eval(data, variant, cfg, train_config, seed, k)
        out[L] = {"result": result, "history": history}
    return out


# -- MF baseline on the same split --------------------------------------------------

def _one_hot_block(arr, columns, manifest_cols):
    """Expand categorical columns to one-hot, keep continuous ones."""
    parts = []
    for j, ((name, kind), col) in enumerate(zip(columns, manifest_cols)):
        if kind == "c":
            card = col["cardinality"]
            idx = arr[..., j].astype(np.int64)
            parts.append(np.eye(card + 1)[idx])
        else:
            parts.append(arr[..., j:j + 1])
    return np.concatenate(parts, axis=-1)


def mf_features(data: EvalData):
    """(interactions, user_features, item_features) for the MF baseline.

    One MF "user" per tensor row (user-subject window).  Training rows
    contribute all T studied sets, test rows only their input steps.  User
    features average the encoded user metadata over the input steps; item
    features are the set metadata plus the content vector.
    """
    tri = data.triple
    T = tri.T
    pos = {int(s): i for i, s in enumerate(data.set_ids)}
    col = np.vectorize(pos.__getitem__, otypes=[np.int64])(tri.step_set_ids)
    n = len(tri)
    mask = np.ones((n, T), dtype=bool)
    mask[data.test_rows, T - 1] = False
    r, c = np.nonzero(mask)
    R = sparse.csr_matrix((np.ones(r.size), (r, col[r, c])), shape=(n, data.n_sets))
    R.data[:] = 1.0
    um = _one_hot_block(tri.user_meta[:, : T - 1], USER_COLUMNS, data.manifest["user"]).mean(axis=1)
    Xu = np.hstack([um, np.ones((n, 1))])
    sm = _one_hot_block(data.set_meta, SET_COLUMNS, data.manifest["set"])
    Yi = np.hstack([sm, data.set_vectors, np.ones((data.n_sets, 1))])
    return R, Xu, Yi


def evaluate_mf(data: EvalData, d=32, epochs=20, seed=0, k=100, **kwargs):
    R, Xu, Yi = mf_features(data)
    mf = train_mf_baseline(R, Xu, Yi, d=d, epochs=epochs, seed=seed, **kwargs)
    lists = mf_recommend_many(mf, data.test_rows, k, item_ids=data.set_ids)
    recall, hits, n = recall_from_lists(lists, data.truths())
    return mf, {"recall": recall, "hits": hits, "n": n}


def evaluate_random(data: EvalData, k=100, seed=0):
    rec = RandomRecommender(data.set_ids, seed=seed)
    truths = data.truths()
    lists = [rec(None, k) for _ in truths]
    recall, hits, n = recall_from_lists(lists, truths)
    return {"recall": recall, "hits": hits, "n": n, "expected": k / data.n_sets}


# -- attention heatmap ------------------------------------------------------------

def attention_heatmap(model: NereModel, window=None):
    """(L, 2H) attention weights; runs ``window`` through the model first if given."""
    if window is not None:
        um, sm, ct = (None if a is None else np.asarray(a, dtype=np.float64)[None] for a in window)
        model.forward(
            um if model.use_meta else None,
            sm if model.use_meta else None,
            ct if model.use_content else None,
            train=False,
        )
    alpha = model.attention.alpha
    if alpha is None:
        raise StateError("attention weights are not available before a forward pass")
    return np.array(alpha[0] if alpha.ndim == 3 else alpha)


def export_heatmap(alpha, prefix):
    """Write ``<prefix>.txt`` (grid of values) and ``<prefix>.pgm`` (binary graymap).

    Pixel brightness is alpha / max(alpha) scaled to 0..255, one pixel per cell.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    txt = prefix.with_name(prefix.name + ".txt")
    pgm = prefix.with_name(prefix.name + ".pgm")
    with txt.open("w", encoding="utf-8", newline="\n") as fh:
        for row in alpha:
            fh.write(" ".join(f"{v:.9f}" for v in row) + "\n")
    top = alpha.max()
    pixels = np.zeros(alpha.shape, dtype=np.uint8) if top <= 0 else np.rint(255.0 * alpha / top).astype(np.uint8)
    rows, cols = alpha.shape
    pgm.write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes())
    return txt, pgm


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise PreconditionError(f"{path} is not a binary graymap")
    cols, rows = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=rows * cols).reshape(rows, cols)


# -- report -----------------------------------------------------------------------

@dataclass
class EvaluationReport:
    k: int
    recall_at_k: float
    r_squared: float
    n_evaluated: int
    variant: str = "both"
    variants: dict = field(default_factory=dict)  # variant -> {"r_squared", "recall", ...}
    lengths: dict = field(default_factory=dict)  # L -> {...}
    baselines: dict = field(default_factory=dict)  # name -> {"recall", ...}

    def __post_init__(self):
        if self.n_evaluated <= 0:
            raise PreconditionError("a report needs n_evaluated > 0")
        if not 0.0 <= self.recall_at_k <= 1.0:
            raise PreconditionError(f"recall {self.recall_at_k} outside [0, 1]")

    def records(self):
        recs = [{"kind": "main", "variant": self.variant, "k": self.k, "recall": self.recall_at_k,
                 "r_squared": self.r_squared, "n": self.n_evaluated}]
        for v, res in self.variants.items():
            recs.append({"kind": "variant", "variant": v, "k": self.k, **_clean(res)})
        for L, res in self.lengths.items():
            recs.append({"kind": "length", "input_len": int(L), "k": self.k, **_clean(res)})
        for name, res in self.baselines.items():
            recs.append({"kind": "baseline", "name": name, "k": self.k, **_clean(res)})
        return recs

    def write_jsonl(self, path):
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def table(self):
        k = self.k
        lines = [f"{'entry':<22} {'recall@' + str(k):>11} {'±se':>8} {'R²':>8} {'n':>7}"]

        def row(label, rec, r2):
            se = binomial_se(rec, self.n_evaluated)
            r2s = "-" if r2 is None else f"{r2:.4f}"
            lines.append(f"{label:<22} {rec:>11.4f} {se:>8.4f} {r2s:>8} {self.n_evaluated:>7}")

        row(f"model[{self.variant}]", self.recall_at_k, self.r_squared)
        for v, res in self.variants.items():
            row(f"variant {v}", res["recall"], res.get("r_squared"))
        for L, res in self.lengths.items():
            row(f"input length {L}", res["recall"], res.get("r_squared"))
        for name, res in self.baselines.items():
            row(f"baseline {name}", res["recall"], res.get("r_squared"))
        return "\n".join(lines)


def _clean(res):
    return {k: v for k, v in res.items() if isinstance(v, (int, float, str)) or v is None}
