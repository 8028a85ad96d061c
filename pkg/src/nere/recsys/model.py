"""NERE layer stack.

Per timestep, the categorical metadata columns are embedded (one table per
field), concatenated with the continuous metadata columns and the content
vector, batch-normalized, run through a bidirectional GRU, dropout,
attention with context, dropout, then flattened into dense(ReLU) ->
dense(linear) producing the predicted content vector.

``variant`` selects the input streams: ``both`` (user + set metadata +
content), ``content`` (content only) or ``metadata`` (user + set metadata).
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from nere.errors import ConfigError, ShapeError
from nere.neuralcore import checkpoint
from nere.neuralcore.layers import (
    AttentionWithContext,
    BatchNorm,
    Bidirectional,
    Dense,
    Dropout,
    Embedding,
    GRUCell,
)
from nere.neuralcore.losses import l2_grad, l2_penalty, mse_grad, mse_loss

VARIANTS = ("both", "content", "metadata")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    hidden: int = 64
    dense: int = 256
    dropout: float = 0.5
    l2: float = 0.001
    content_dim: int = 128
    input_len: int = 4
    bn_momentum: float = 0.99

    def validate(self):
        for name in ("embed_dim", "hidden", "dense", "content_dim", "input_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must lie in [0, 1)")
        if self.l2 < 0:
            raise ConfigError("model.l2 must be >= 0")


def _check_manifest(manifest):
    for stream in ("user", "set"):
        if stream not in manifest:
            raise ConfigError(f"manifest lacks the {stream!r} stream")
        for col in manifest[stream]:
            if col.get("kind") not in ("c", "f"):
                raise ConfigError(f"column {col.get('name')!r} has unknown kind {col.get('kind')!r}")
            if col["kind"] == "c" and int(col.get("cardinality", -1)) < 1:
                raise ConfigError(f"categorical column {col['name']!r} needs cardinality >= 1")


class NereModel:
    def __init__(self, manifest, variant="both", config: ModelConfig | None = None, seed=0):
        if variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
        config = config or ModelConfig()
        config.validate()
        _check_manifest(manifest)
        self.manifest = {k: [dict(c) for c in manifest[k]] for k in ("user", "set")}
        self.variant = variant
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(seed)

        self.use_meta = variant in ("both", "metadata")
        self.use_content = variant in ("both", "content")
        E = config.embed_dim
        self.embeddings = {}
        width = 0
        if self.use_meta:
            for stream in ("user", "set"):
                for col in self.manifest[stream]:
                    if col["kind"] == "c":
                        key = f"{stream}.{col['name']}"
                        self.embeddings[key] = Embedding(col["cardinality"], E, name=key, rng=rng)
                        width += E
                    else:
                        width += 1
        if self.use_content:
            width += config.content_dim
        self.input_width = width

        H = config.hidden
        self.bn = BatchNorm(width, momentum=config.bn_momentum)
        self.bigru = Bidirectional(GRUCell(width, H, rng=rng), GRUCell(width, H, rng=rng))
        self.drop1 = Dropout(config.dropout)
        self.attention = AttentionWithContext(2 * H, rng=rng)
        self.drop2 = Dropout(config.dropout)
        self.dense1 = Dense(config.input_len * 2 * H, config.dense, "relu", rng=rng)
        self.dense2 = Dense(config.dense, config.content_dim, "linear", rng=rng)

    # -- bookkeeping ---------------------------------------------------------

    def input_streams(self):
        """Names of the tensors this variant consumes."""
        names = []
        if self.use_meta:
            names += ["user_meta", "set_meta"]
        if self.use_content:
            names.append("content")
        return names

    def _modules(self):
        mods = [(f"emb.{k}", layer) for k, layer in self.embeddings.items()]
        mods += [
            ("bn", self.bn),
            ("gru_fwd", self.bigru.fwd),
            ("gru_bwd", self.bigru.bwd),
            ("att", self.attention),
            ("dense1", self.dense1),
            ("dense2", self.dense2),
        ]
        return mods

    def parameters(self):
        """Flat name -> array view of every trainable parameter."""
        return {f"{m}.{k}": v for m, layer in self._modules() for k, v in layer.params.items()}

    def gradients(self):
        return {f"{m}.{k}": v for m, layer in self._modules() for k, v in layer.grads.items()}

    def recurrent_kernels(self):
        return {"gru_fwd.U": self.bigru.fwd.params["U"], "gru_bwd.U": self.bigru.bwd.params["U"]}

    def zero_grad(self):
        for _, layer in self._modules():
            layer.zero_grad()

    def state_arrays(self):
        """Parameters plus batch-norm running moments (what a checkpoint stores)."""
        arrays = dict(self.parameters())
        arrays["bn.running_mean"] = self.bn.running_mean
        arrays["bn.running_var"] = self.bn.running_var
        return arrays

    def load_state_arrays(self, arrays):
        own = self.state_arrays()
        if set(arrays) != set(own):
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            raise ConfigError(f"checkpoint mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in arrays.items():
            if own[name].shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {own[name].shape}")
        for name, arr in arrays.items():
            if name == "bn.running_mean":
                self.bn.running_mean = np.array(arr, dtype=np.float64)
            elif name == "bn.running_var":
                self.bn.running_var = np.array(arr, dtype=np.float64)
            else:
                own[name][...] = arr

    def spec(self):
        return {"manifest": self.manifest, "variant": self.variant, "config": asdict(self.config), "seed": self.seed}

    def to_bytes(self):
        return checkpoint.dumps(self.state_arrays(), self.spec())

    def save(self, path):
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def from_bytes(cls, data):
        arrays, spec = checkpoint.loads(data)
        if spec is None:
            raise ConfigError("checkpoint has no model config line")
        model = cls(spec["manifest"], spec["variant"], ModelConfig(**spec["config"]), spec["seed"])
        model.load_state_arrays(arrays)
        return model

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    # -- forward / backward ----------------------------------------------------

    def _check_inputs(self, user_meta, set_meta, content):
        L = self.config.input_len
        if self.use_meta:
            for name, arr, cols in (("user_meta", user_meta, self.manifest["user"]), ("set_meta", set_meta, self.manifest["set"])):
                if arr is None:
                    raise ShapeError(f"variant {self.variant!r} needs {name}")
                if arr.ndim != 3 or arr.shape[1] != L or arr.shape[2] != len(cols):
                    raise ConfigError(f"{name} shape {arr.shape} does not match manifest (B, {L}, {len(cols)})")
        if self.use_content:
            if content is None:
                raise ShapeError(f"variant {self.variant!r} needs content")
            if content.ndim != 3 or content.shape[1] != L or content.shape[2] != self.config.content_dim:
                raise ShapeError(f"content shape {content.shape}, expected (B, {L}, {self.config.content_dim})")

    def embed_inputs(self, user_meta, set_meta, content):
        """Concatenated per-timestep input features (B, L, input_width)."""
        self._check_inputs(user_meta, set_meta, content)
        parts = []
        if self.use_meta:
            for stream, arr in (("user", user_meta), ("set", set_meta)):
                for j, col in enumerate(self.manifest[stream]):
                    if col["kind"] == "c":
                        parts.append(self.embeddings[f"{stream}.{col['name']}"].forward(arr[..., j]))
                    else:
                        parts.append(arr[..., j:j + 1])
        if self.use_content:
            parts.append(content)
        return np.concatenate(parts, axis=-1)

    def forward(self, user_meta=None, set_meta=None, content=None, train=False, rng=None):
        x = self.embed_inputs(user_meta, set_meta, content)
        x = self.bn.forward(x, train=train)
        h = self.bigru.forward(x)
        h = self.drop1.forward(h, train=train, rng=rng)
        a, _ = self.attention.forward(h)
        a = self.drop2.forward(a, train=train, rng=rng)
        B = a.shape[0]
        self._flat_shape = a.shape
        y = self.dense1.forward(a.reshape(B, -1))
        return self.dense2.forward(y)

    def backward(self, dpred):
        d = self.dense2.backward(dpred)
        d = self.dense1.backward(d)
        d = d.reshape(self._flat_shape)
        d = self.drop2.backward(d)
        d = self.attention.backward(d)
        d = self.drop1.backward(d)
        d = self.bigru.backward(d)
        d = self.bn.backward(d)
        if self.use_meta:
            E = self.config.embed_dim
            off = 0
            for stream in ("user", "set"):
                for col in self.manifest[stream]:
                    if col["kind"] == "c":
                        self.embeddings[f"{stream}.{col['name']}"].backward(d[..., off:off + E])
                        off += E
                    else:
                        off += 1

    def loss_and_backward(self, batch, target, rng=None, train=True):
        """Forward, MSE + L2(recurrent kernels), backward.  Returns (loss, mse)."""
        pred = self.forward(*batch, train=train, rng=rng)
        mse = mse_loss(pred, target)
        kernels = self.recurrent_kernels()
        loss = mse + l2_penalty(kernels.values(), self.config.l2)
        self.backward(mse_grad(pred, target))
        for name, k in kernels.items():
            module, key = name.split(".")
            layer = self.bigru.fwd if module == "gru_fwd" else self.bigru.bwd
            layer.grads[key] += l2_grad(k, self.config.l2)
        return loss, mse

    def predict(self, user_meta=None, set_meta=None, content=None, batch_size=2048):
        out = []
        n = next(a for a in (user_meta, set_meta, content) if a is not None).shape[0]
        for s in range(0, n, batch_size):
            sl = slice(s, s + batch_size)
            out.append(self.forward(
                None if user_meta is None else user_meta[sl],
                None if set_meta is None else set_meta[sl],
                None if content is None else content[sl],
                train=False,
            ))
        return np.concatenate(out) if out else np.zeros((0, self.config.content_dim))


def build_model(manifest, variant="both", config: ModelConfig | None = None, seed=0) -> NereModel:
    return NereModel(manifest, variant, config, seed)


def window_inputs(triple, input_len=None, rows=None):
    """Slice the model inputs (last ``input_len`` of steps 1..T-1) out of a triple."""
    T = triple.T
    L = T - 1 if input_len is None else int(input_len)
    if not 1 <= L <= T - 1:
        raise ConfigError(f"input length {L} must lie in [1, {T - 1}]")
    sl = slice(T - 1 - L, T - 1)
    idx = slice(None) if rows is None else rows
    return (
        triple.user_meta[idx][:, sl],
        triple.set_meta[idx][:, sl],
        triple.set_content[idx][:, sl],
    )


def model_inputs(model: NereModel, triple, rows=None):
    um, sm, ct = window_inputs(triple, model.config.input_len, rows)
    return (
        um if model.use_meta else None,
        sm if model.use_meta else None,
        ct if model.use_content else None,
    )


def predict_embedding(model: NereModel, window):
    """Predicted content vector for one window ``(user_meta, set_meta, content)``, each (L, cols)."""
    um, sm, ct = window
    arrs = []
    for a in (um, sm, ct):
        if a is None:
            arrs.append(None)
            continue
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise ShapeError(f"window arrays must be 2-D (L, cols), got {a.shape}")
        arrs.append(a[None])
    return model.forward(
        arrs[0] if model.use_meta else None,
        arrs[1] if model.use_meta else None,
        arrs[2] if model.use_content else None,
        train=False,
    )[0]
