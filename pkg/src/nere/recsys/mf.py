"""Feature-based matrix-factorization baseline.

Users and items are represented only through their feature vectors:
``u = x_u A`` and ``v = y_i B`` live in a shared ``d``-dim space and the
score is ``u . v + x_u b_u + y_i b_i``.  Training minimizes squared error
between scores and labels (1 for studied pairs, 0 for uniformly sampled
negatives) with Adam.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from nere.errors import ConfigError, PreconditionError, ShapeError
from nere.neuralcore.optim import AdamState, adam_step


@dataclass
class MFBaseline:
    user_map: np.ndarray  # (n_user_features, d)
    item_map: np.ndarray  # (n_item_features, d)
    user_bias: np.ndarray  # (n_user_features,)
    item_bias: np.ndarray  # (n_item_features,)
    user_features: np.ndarray
    item_features: np.ndarray
    interactions: sparse.csr_matrix
    history: list

    @property
    def d(self):
        return self.user_map.shape[1]

    def params(self):
        return {"A": self.user_map, "B": self.item_map, "bu": self.user_bias, "bi": self.item_bias}

    def user_vectors(self, users=None):
        x = self.user_features if users is None else self.user_features[users]
        return x @ self.user_map, x @ self.user_bias

    def item_vectors(self):
        return self.item_features @ self.item_map, self.item_features @ self.item_bias

    def scores(self, users):
        """(len(users), n_items) score matrix."""
        u, ub = self.user_vectors(np.atleast_1d(users))
        v, vb = self.item_vectors()
        return u @ v.T + ub[:, None] + vb[None, :]


def _as_interactions(interactions):
    m = sparse.csr_matrix(interactions, dtype=np.float64)
    m.eliminate_zeros()
    if m.nnz and not np.all(m.data == 1.0):
        raise PreconditionError("interactions must be binary (0/1)")
    return m


def train_mf_baseline(
    interactions,
    user_features,
    item_features,
    d=32,
    epochs=20,
    lr=0.01,
    neg_ratio=4,
    batch_size=4096,
    init_scale=0.1,
    seed=0,
) -> MFBaseline:
    if d < 1:
        raise ConfigError(f"latent dimension d must be >= 1, got {d}")
    if epochs < 0 or neg_ratio < 0 or batch_size < 1:
        raise ConfigError("epochs >= 0, neg_ratio >= 0 and batch_size >= 1 required")
    R = _as_interactions(interactions)
    if R.nnz == 0:
        raise PreconditionError("interaction matrix has no positive entries")
    X = np.asarray(user_features, dtype=np.float64)
    Y = np.asarray(item_features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != R.shape[0]:
        raise ShapeError(f"user_features {X.shape} do not match {R.shape[0]} users")
    if Y.ndim != 2 or Y.shape[0] != R.shape[1]:
        raise ShapeError(f"item_features {Y.shape} do not match {R.shape[1]} items")

    rng = np.random.default_rng(seed)
    model = MFBaseline(
        user_map=rng.normal(0.0, init_scale, (X.shape[1], d)),
        item_map=rng.normal(0.0, init_scale, (Y.shape[1], d)),
        user_bias=np.zeros(X.shape[1]),
        item_bias=np.zeros(Y.shape[1]),
        user_features=X,
        item_features=Y,
        interactions=R,
        history=[],
    )
    pos_u, pos_i = R.nonzero()
    n_items = R.shape[1]
    adam = AdamState(lr=lr)
    params = model.params()
    for epoch in range(1, epochs + 1):
        neg_u = np.repeat(pos_u, neg_ratio)
        neg_i = rng.integers(0, n_items, size=neg_u.size)
        us = np.concatenate([pos_u, neg_u])
        its = np.concatenate([pos_i, neg_i])
        labels = np.concatenate([np.ones(pos_u.size), np.zeros(neg_u.size)])
        order = rng.permutation(us.size)
        total = 0.0
        for s in range(0, order.size, batch_size):
            b = order[s:s + batch_size]
            xu, yi, lab = X[us[b]], Y[its[b]], labels[b]
            pu, pi = xu @ params["A"], yi @ params["B"]
            err = (pu * pi).sum(1) + xu @ params["bu"] + yi @ params["bi"] - lab
            total += float(err @ err)
            g = 2.0 * err / b.size
            grads = {
                "A": xu.T @ (g[:, None] * pi),
                "B": yi.T @ (g[:, None] * pu),
                "bu": xu.T @ g,
                "bi": yi.T @ g,
            }
            adam_step(params, grads, adam)
        model.history.append({"epoch": epoch, "loss": total / us.size})
    return model


def mf_recommend(baseline: MFBaseline, user, m, item_ids=None):
    """Top-m items for ``user`` by score; ties broken by item position."""
    n = baseline.item_features.shape[0]
    if not 1 <= m <= n:
        raise PreconditionError(f"m must lie in [1, {n}], got {m}")
    s = baseline.scores([user])[0]
    top = np.lexsort((np.arange(n), -s))[:m]
    return top if item_ids is None else np.asarray(item_ids)[top]


def mf_recommend_many(baseline: MFBaseline, users, m, item_ids=None, chunk=1024):
    """Vectorized ``mf_recommend`` over many users -> (len(users), m)."""
    users = np.asarray(users, dtype=np.int64)
    n = baseline.item_features.shape[0]
    if not 1 <= m <= n:
        raise PreconditionError(f"m must lie in [1, {n}], got {m}")
    out = np.empty((users.size, m), dtype=np.int64)
    pos = np.arange(n)
    for s in range(0, users.size, chunk):
        sc = baseline.scores(users[s:s + chunk])
        for r, row in enumerate(sc):
            out[s + r] = np.lexsort((pos, -row))[:m]
    return out if item_ids is None else np.asarray(item_ids)[out]
