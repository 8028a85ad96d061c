"""Set text -> content vectors.

Tokenize term/definition strings, accumulate a symmetric windowed
co-occurrence matrix, fit GloVe vectors with AdaGrad and mean-pool the
token vectors of a set.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from nere.errors import ConfigError, FormatError, PreconditionError

log = logging.getLogger(__name__)

OOV = "<unk>"

# Fixed English stopword list; part of the artifact so tokenization is reproducible.
STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because been
    before being below between both but by can could did do does doing down during
    each few for from further had has have having he her here hers herself him
    himself his how i if in into is it its itself just me more most my myself no
    nor not now of off on once only or other our ours ourselves out over own same
    she should so some such than that the their theirs them themselves then there
    these they this those through to too under until up very was we were what when
    where which while who whom why will with would you your yours yourself
    yourselves
    """.split()
)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, drop non-ASCII tokens and stopwords."""
    out = []
    for tok in text.lower().split():
        if not tok.isascii() or tok in STOPWORDS:
            continue
        out.append(tok)
    return out


@dataclass
class Vocabulary:
    """Bijective token <-> index map; index 0 is the out-of-vocabulary slot."""

    itos: list[str] = field(default_factory=lambda: [OOV])
    counts: list[int] = field(default_factory=lambda: [0])

    def __post_init__(self):
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, corpus, min_count=1):
        freq = Counter(tok for doc in corpus for tok in doc)
        # frequency-descending, then lexicographic: independent of corpus order
        ordered = sorted((t for t, c in freq.items() if c >= min_count), key=lambda t: (-freq[t], t))
        return cls(itos=[OOV, *ordered], counts=[0, *(freq[t] for t in ordered)])

    def __len__(self):
        return len(self.itos)

    def __contains__(self, tok):
        return tok in self.stoi and self.stoi[tok] != 0

    def index(self, tok):
        return self.stoi.get(tok, 0)

    def encode(self, tokens):
        return np.array([self.index(t) for t in tokens], dtype=np.int64)


@dataclass
class CooccurrenceMatrix:
    """Symmetric sparse co-occurrence counts over a vocabulary."""

    vocab: Vocabulary
    matrix: sp.csr_matrix

    @property
    def nnz(self):
        return self.matrix.nnz

    def get(self, a, b):
        i, j = self.vocab.index(a), self.vocab.index(b)
        return float(self.matrix[i, j])


def build_cooccurrence(corpus, window: int, vocab: Vocabulary | None = None) -> CooccurrenceMatrix:
    """Windowed co-occurrence with 1/distance weighting.

    Every pair of positions ``p < q`` with ``q - p <= window`` adds
    ``1/(q-p)`` to both X[t_p, t_q] and X[t_q, t_p]; for identical tokens the
    diagonal entry gets the increment once.
    """
    if int(window) != window or window < 1:
        raise ConfigError(f"window must be an integer >= 1, got {window!r}")
    if vocab is None:
        vocab = Vocabulary.build(corpus)
    rows, cols, vals = [], [], []
    for doc in corpus:
        ids = vocab.encode(doc)
        ids = ids[ids > 0]
        n = len(ids)
        for d in range(1, min(window, n - 1) + 1):
            rows.append(ids[:-d])
            cols.append(ids[d:])
            vals.append(np.full(n - d, 1.0 / d))
    V = len(vocab)
    if not rows:
        return CooccurrenceMatrix(vocab, sp.csr_matrix((V, V)))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    upper = sp.coo_matrix((v, (r, c)), shape=(V, V)).tocsr()
    sym = upper + upper.T - sp.diags(upper.diagonal())
    sym = sp.csr_matrix(sym)
    sym.eliminate_zeros()
    sym.sort_indices()
    return CooccurrenceMatrix(vocab, sym)


def glove_weight(x, x_max=100.0, alpha=0.75):
    """GloVe weighting f(x) = min(1, (x/x_max)^alpha)."""
    x = np.asarray(x, dtype=np.float64)
    return np.minimum(1.0, (x / x_max) ** alpha)


@dataclass
class EmbeddingTable:
    vocab: Vocabulary
    vectors: np.ndarray  # |V| x dim, row 0 (OOV) is zero
    loss_history: list = field(default_factory=list)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __getitem__(self, tok):
        return self.vectors[self.vocab.index(tok)]

    def save(self, path):
        with Path(path).open("w", encoding="ascii", newline="\n") as fh:
            fh.write(f"glove {len(self.vocab)} {self.dim}\n")
            for tok, row in zip(self.vocab.itos, self.vectors):
                fh.write(tok + " " + " ".join(f"{x:.9g}" for x in row) + "\n")

    @classmethod
    def load(cls, path):
        with Path(path).open("r", encoding="ascii") as fh:
            header = fh.readline().split()
            if len(header) != 3 or header[0] != "glove":
                raise FormatError(f"bad glove header {header!r}", line=1)
            n, dim = int(header[1]), int(header[2])
            itos, rows = [], []
            for lineno, line in enumerate(fh, 2):
                parts = line.split()
                if len(parts) != dim + 1:
                    raise FormatError(f"expected {dim + 1} fields, got {len(parts)}", line=lineno)
                itos.append(parts[0])
                rows.append([float(x) for x in parts[1:]])
        if len(itos) != n:
            raise FormatError(f"header announces {n} tokens, file has {len(itos)}")
        return cls(Vocabulary(itos=itos, counts=[0] * n), np.array(rows, dtype=np.float64).reshape(n, dim))


def glove_loss(W, Wc, b, bc, rows, cols, logx, weight):
    """Return (loss, residuals) of the weighted least-squares objective."""
    resid = np.einsum("ij,ij->i", W[rows], Wc[cols]) + b[rows] + bc[cols] - logx
    return float(np.dot(weight, resid * resid)), resid


def train_glove(
    cooc: CooccurrenceMatrix,
    dim=128,
    epochs=100,
    x_max=100.0,
    alpha=0.75,
    lr=0.05,
    lr_decay=0.0,
    seed=0,
) -> EmbeddingTable:
    """Fit GloVe vectors by full-batch AdaGrad.

    Minimizes sum f(X_ij) (w_i . w~_j + b_i + b~_j - ln X_ij)^2 over the
    nonzero entries; the returned table holds w_i + w~_i per token.
    ``lr_decay`` scales the step as ``lr / (1 + lr_decay * epoch)``.
    """
    if cooc.nnz == 0:
        raise PreconditionError("train_glove needs a non-empty co-occurrence matrix")
    if dim < 1 or epochs < 0:
        raise ConfigError("dim must be >= 1 and epochs >= 0")
    X = cooc.matrix.tocoo()
    rows, cols = X.row.astype(np.int64), X.col.astype(np.int64)
    logx = np.log(X.data)
    weight = glove_weight(X.data, x_max, alpha)
    V = cooc.matrix.shape[0]

    rng = np.random.default_rng(seed)
    W = (rng.random((V, dim)) - 0.5) / dim
    Wc = (rng.random((V, dim)) - 0.5) / dim
    b = np.zeros(V)
    bc = np.zeros(V)
    gW, gWc = np.full((V, dim), 1e-8), np.full((V, dim), 1e-8)
    gb, gbc = np.full(V, 1e-8), np.full(V, 1e-8)

    history = []
    loss, resid = glove_loss(W, Wc, b, bc, rows, cols, logx, weight)
    history.append(loss)
    for epoch in range(epochs):
        step = lr / (1.0 + lr_decay * epoch)
        fr = 2.0 * weight * resid
        G = sp.csr_matrix((fr, (rows, cols)), shape=(V, V))
        dW = G @ Wc
        dWc = G.T @ W
        db = np.asarray(G.sum(axis=1)).ravel()
        dbc = np.asarray(G.sum(axis=0)).ravel()
        for p, g, acc in ((W, dW, gW), (Wc, dWc, gWc), (b, db, gb), (bc, dbc, gbc)):
            acc += g * g
            p -= step * g / np.sqrt(acc)
        loss, resid = glove_loss(W, Wc, b, bc, rows, cols, logx, weight)
        history.append(loss)
        log.debug("glove epoch %d loss %.6f", epoch + 1, loss)

    vectors = W + Wc
    vectors[0] = 0.0
    return EmbeddingTable(cooc.vocab, vectors, history)


def set_tokens(record):
    """Distinct tokens of a set's terms and definitions, order-free."""
    return set(tokenize(record.terms)) | set(tokenize(record.definitions))


def set_vector(record, table: EmbeddingTable) -> np.ndarray:
    """Unweighted mean of in-vocabulary token vectors; zero vector if none."""
    idx = sorted(i for i in (table.vocab.index(t) for t in set_tokens(record)) if i != 0)
    if not idx:
        return np.zeros(table.dim)
    return table.vectors[idx].mean(axis=0)


def catalog_corpus(catalog):
    return [tokenize(r.terms) + tokenize(r.definitions) for r in catalog]


def embed_catalog(catalog, dim=128, window=5, epochs=100, x_max=100.0, alpha=0.75, lr=0.05, seed=0):
    """Train GloVe on the catalog text and return (table, set_ids, vectors)."""
    corpus = catalog_corpus(catalog)
    cooc = build_cooccurrence(corpus, window)
    table = train_glove(cooc, dim=dim, epochs=epochs, x_max=x_max, alpha=alpha, lr=lr, seed=seed)
    ids = np.array([r.set_id for r in catalog], dtype=np.int64)
    vecs = np.stack([set_vector(r, table) for r in catalog]) if catalog else np.zeros((0, dim))
    return table, ids, vecs
