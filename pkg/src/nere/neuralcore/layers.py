"""Layers with explicit forward/backward passes (float64, batch-major).

Each layer owns ``params`` and ``grads`` dicts keyed by short names.
``forward`` caches what ``backward`` needs; calling ``backward`` without a
preceding ``forward`` raises :class:`StateError`.  Gradients accumulate
into ``grads`` until ``zero_grad`` is called.
"""

from __future__ import annotations

import numpy as np

from nere.errors import EmbeddingIndexError, PreconditionError, ShapeError, StateError


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache


class Embedding(Layer):
    """Lookup table ``W`` of shape (dim, cardinality + 1); column j embeds category j."""

    def __init__(self, cardinality, dim=32, name="field", rng=None, scale=0.05):
        super().__init__()
        self.name = name
        self.cardinality = int(cardinality)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = rng.normal(0.0, scale, size=(dim, self.cardinality + 1))
        self.zero_grad()

    def forward(self, indices):
        idx = np.asarray(indices)
        if idx.dtype.kind == "f":
            if not np.all(np.isfinite(idx)) or np.any(idx != np.round(idx)):
                raise EmbeddingIndexError(f"field {self.name!r}: non-integer index")
            idx = idx.astype(np.int64)
        if idx.size and (idx.min() < 0 or idx.max() > self.cardinality):
            bad = idx[(idx < 0) | (idx > self.cardinality)].flat[0]
            raise EmbeddingIndexError(
                f"field {self.name!r}: index {int(bad)} outside [0, {self.cardinality}]"
            )
        self._cache = idx
        return self.params["W"].T[idx]

    def backward(self, dout):
        idx = self._take_cache()
        dim = self.params["W"].shape[0]
        gT = np.zeros((self.cardinality + 1, dim))
        np.add.at(gT, idx.ravel(), dout.reshape(-1, dim))
        self.grads["W"] += gT.T
        return None


class Dense(Layer):
    def __init__(self, n_in, n_out, activation="linear", rng=None):
        super().__init__()
        if activation not in ("linear", "relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.activation = activation
        self.params["W"] = glorot(rng, n_in, n_out)
        self.params["b"] = np.zeros(n_out)
        self.zero_grad()

    def forward(self, x, train=False):
        W = self.params["W"]
        if x.shape[-1] != W.shape[0]:
            raise ShapeError(f"dense expects last dim {W.shape[0]}, got input {x.shape}")
        z = x @ W + self.params["b"]
        if self.activation == "relu":
            out = np.maximum(z, 0.0)
        elif self.activation == "tanh":
            out = np.tanh(z)
        else:
            out = z
        self._cache = (x, z, out)
        return out

    def backward(self, dout):
        x, z, out = self._take_cache()
        if self.activation == "relu":
            dz = dout * (z > 0)
        elif self.activation == "tanh":
            dz = dout * (1.0 - out * out)
        else:
            dz = dout
        x2 = x.reshape(-1, x.shape[-1])
        dz2 = dz.reshape(-1, dz.shape[-1])
        self.grads["W"] += x2.T @ dz2
        self.grads["b"] += dz2.sum(axis=0)
        return dz @ self.params["W"].T


class BatchNorm(Layer):
    """Normalizes the last axis using statistics over all leading axes."""

    def __init__(self, dim, momentum=0.99, eps=1e-7):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(dim)
        self.params["beta"] = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.zero_grad()

    def forward(self, x, train=False):
        if x.shape[-1] != self.params["gamma"].shape[0]:
            raise ShapeError(f"batchnorm expects last dim {self.params['gamma'].shape[0]}, got {x.shape}")
        g, b = self.params["gamma"], self.params["beta"]
        if train:
            if x.shape[0] < 2:
                raise PreconditionError("train-mode batch normalization needs a batch of at least 2")
            x2 = x.reshape(-1, x.shape[-1])
            mean = x2.mean(axis=0)
            var = x2.var(axis=0)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv
            self.running_mean = self.momentum * self.running_mean + (1.0 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1.0 - self.momentum) * var
            self._cache = ("train", xhat, inv)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv
            self._cache = ("infer", xhat, inv)
        return xhat * g + b

    def backward(self, dout):
        mode, xhat, inv = self._take_cache()
        g = self.params["gamma"]
        D = g.shape[0]
        d2 = dout.reshape(-1, D)
        xh2 = xhat.reshape(-1, D)
        self.grads["gamma"] += (d2 * xh2).sum(axis=0)
        self.grads["beta"] += d2.sum(axis=0)
        dxhat = d2 * g
        if mode == "infer":
            return (dxhat * inv).reshape(dout.shape)
        n = d2.shape[0]
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xh2 * (dxhat * xh2).sum(axis=0))
        return dx.reshape(dout.shape)

    def set_population_stats(self, x):
        """Replace the running moments by exact statistics of ``x``."""
        x2 = x.reshape(-1, x.shape[-1])
        self.running_mean = x2.mean(axis=0)
        self.running_var = x2.var(axis=0)


class Dropout(Layer):
    def __init__(self, p=0.5):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.p = p

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0.0:
            self._cache = None
            self._identity = True
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        self._identity = False
        self._cache = mask
        return x * mask

    def backward(self, dout):
        if getattr(self, "_identity", None) is None:
            raise StateError("Dropout.backward called before forward")
        if self._identity:
            return dout
        return dout * self._take_cache()


class GRUCell(Layer):
    """Cho et al. GRU.

    Column blocks of ``W`` (D x 3H), ``U`` (H x 3H) and ``b`` (3H) are the
    update gate z, reset gate r and candidate state, in that order.
    ``U`` is the recurrent kernel.
    """

    def __init__(self, input_dim, hidden_dim, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        D, H = input_dim, hidden_dim
        self.input_dim, self.hidden_dim = D, H
        self.params["W"] = np.concatenate([glorot(rng, D, H) for _ in range(3)], axis=1)
        self.params["U"] = np.concatenate([glorot(rng, H, H) for _ in range(3)], axis=1)
        self.params["b"] = np.zeros(3 * H)
        self.zero_grad()

    def _check(self, x, h):
        D, H = self.input_dim, self.hidden_dim
        if x.ndim != 2 or x.shape[1] != D or h.ndim != 2 or h.shape[1] != H or x.shape[0] != h.shape[0]:
            raise ShapeError(f"gru_step expects x (B, {D}) and h (B, {H}); got x {x.shape}, h {h.shape}")

    def step(self, ax, h):
        """One step given the precomputed input projection ``ax = x W + b``."""
        H = self.hidden_dim
        U = self.params["U"]
        zr = sigmoid(ax[:, : 2 * H] + h @ U[:, : 2 * H])
        z, r = zr[:, :H], zr[:, H:]
        rh = r * h
        hh = np.tanh(ax[:, 2 * H:] + rh @ U[:, 2 * H:])
        h_new = h + z * (hh - h)
        return h_new, (h, z, r, rh, hh)

    def step_backward(self, dh_new, cache, dU):
        """Returns (d ax, d h_prev); accumulates the recurrent kernel gradient into ``dU``."""
        H = self.hidden_dim
        U = self.params["U"]
        h, z, r, rh, hh = cache
        dz = dh_new * (hh - h)
        dhh = dh_new * z
        dh = dh_new * (1.0 - z)
        dah = dhh * (1.0 - hh * hh)
        dU[:, 2 * H:] += rh.T @ dah
        drh = dah @ U[:, 2 * H:].T
        dr = drh * h
        dh += drh * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        dazr = np.concatenate([daz, dar], axis=1)
        dU[:, : 2 * H] += h.T @ dazr
        dh += dazr @ U[:, : 2 * H].T
        return np.concatenate([dazr, dah], axis=1), dh


def gru_step(x_t, h_prev, cell: GRUCell):
    """h_t for a single step; accepts unbatched (D,)/(H,) or batched inputs."""
    x = np.asarray(x_t, dtype=np.float64)
    h = np.asarray(h_prev, dtype=np.float64)
    squeeze = x.ndim == 1 and h.ndim == 1
    if squeeze:
        x, h = x[None], h[None]
    cell._check(x, h)
    h_new, _ = cell.step(x @ cell.params["W"] + cell.params["b"], h)
    return h_new[0] if squeeze else h_new


class GRU(Layer):
    """Runs a :class:`GRUCell` over (B, T, D) from a zero state; returns all states."""

    def __init__(self, cell: GRUCell, reverse=False):
        super().__init__()
        self.cell = cell
        self.reverse = reverse
        self.params = cell.params
        self.grads = cell.grads

    def forward(self, X, train=False):
        B, T, D = X.shape
        if D != self.cell.input_dim:
            raise ShapeError(f"GRU expects input dim {self.cell.input_dim}, got {X.shape}")
        if T < 1:
            raise PreconditionError("GRU needs a sequence of length >= 1")
        H = self.cell.hidden_dim
        AX = X @ self.cell.params["W"] + self.cell.params["b"]
        out = np.empty((B, T, H))
        h = np.zeros((B, H))
        caches = [None] * T
        order = range(T - 1, -1, -1) if self.reverse else range(T)
        for t in order:
            h, caches[t] = self.cell.step(AX[:, t], h)
            out[:, t] = h
        self._cache = (X, caches)
        return out

    def backward(self, dout):
        X, caches = self._take_cache()
        B, T, D = X.shape
        H = self.cell.hidden_dim
        dAX = np.empty((B, T, 3 * H))
        dU = np.zeros_like(self.cell.params["U"])
        dh = np.zeros((B, H))
        order = range(T) if self.reverse else range(T - 1, -1, -1)
        for t in order:
            dax, dh = self.cell.step_backward(dh + dout[:, t], caches[t], dU)
            dAX[:, t] = dax
        self.grads["U"] += dU
        self.grads["W"] += X.reshape(-1, D).T @ dAX.reshape(-1, 3 * H)
        self.grads["b"] += dAX.sum(axis=(0, 1))
        return dAX @ self.cell.params["W"].T


class Bidirectional(Layer):
    """Forward and backward GRU passes concatenated per timestep -> (B, T, 2H)."""

    def __init__(self, cell_fwd: GRUCell, cell_bwd: GRUCell):
        super().__init__()
        self.fwd = GRU(cell_fwd)
        self.bwd = GRU(cell_bwd, reverse=True)

    def forward(self, X, train=False):
        hf = self.fwd.forward(X)
        hb = self.bwd.forward(X)
        self._cache = hf.shape[-1]
        return np.concatenate([hf, hb], axis=-1)

    def backward(self, dout):
        H = self._take_cache()
        return self.fwd.backward(dout[..., :H]) + self.bwd.backward(dout[..., H:])


def bidirectional_forward(sequence, cell_fwd: GRUCell, cell_bwd: GRUCell):
    """Unbatched convenience wrapper: (T', D) -> (T', 2H)."""
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise PreconditionError(f"bidirectional_forward needs a non-empty (T', D) sequence, got {seq.shape}")
    return Bidirectional(cell_fwd, cell_bwd).forward(seq[None])[0]


class AttentionWithContext(Layer):
    """Per-timestep softmax over features with a learned context vector.

    u = tanh(h W + b); scores = u * u_w (element-wise); alpha = softmax over
    the feature axis; output = alpha * h.  The last alpha is kept in
    ``self.alpha`` for visualization.
    """

    def __init__(self, dim, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = glorot(rng, dim, dim)
        self.params["b"] = np.zeros(dim)
        self.params["u"] = glorot(rng, dim, 1, shape=(dim,))
        self.alpha = None
        self.zero_grad()

    def forward(self, Hin, train=False):
        F = self.params["b"].shape[0]
        if Hin.shape[-1] != F:
            raise ShapeError(f"attention expects feature dim {F}, got {Hin.shape}")
        u = np.tanh(Hin @ self.params["W"] + self.params["b"])
        s = u * self.params["u"]
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        alpha = e / e.sum(axis=-1, keepdims=True)
        self.alpha = alpha
        self._cache = (Hin, u, alpha)
        return alpha * Hin, alpha

    def backward(self, dout):
        Hin, u, alpha = self._take_cache()
        F = Hin.shape[-1]
        dalpha = dout * Hin
        dH = dout * alpha
        ds = alpha * (dalpha - (dalpha * alpha).sum(axis=-1, keepdims=True))
        self.grads["u"] += (ds * u).reshape(-1, F).sum(axis=0)
        da = ds * self.params["u"] * (1.0 - u * u)
        self.grads["W"] += Hin.reshape(-1, F).T @ da.reshape(-1, F)
        self.grads["b"] += da.reshape(-1, F).sum(axis=0)
        return dH + da @ self.params["W"].T


def attention_forward(H_in, layer: AttentionWithContext):
    """(weighted, alpha) for an unbatched (T', F) or batched (B, T', F) input."""
    x = np.asarray(H_in, dtype=np.float64)
    if x.ndim == 2:
        out, alpha = layer.forward(x[None])
        return out[0], alpha[0]
    return layer.forward(x)
