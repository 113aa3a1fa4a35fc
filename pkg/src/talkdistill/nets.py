"""Feed-forward nets whose hidden layers are split into lower/higher blocks.

Layers are numbered 1..n. Layers 1..l produce the lower states ``s``,
layers l+1..h produce the higher states ``e`` and layers h+1..n (the head)
map ``e`` to predictions ``y``. Every layer except the last is dense+relu.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, DimensionError


def he_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(nk.DTYPE)


class Dense:
    def __init__(self, in_dim, out_dim, rng, name="dense"):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W = nk.parameter(he_uniform(rng, in_dim, out_dim), name=f"{name}.W")
        self.b = nk.parameter(np.zeros(out_dim), name=f"{name}.b")

    def __call__(self, x):
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"{self.W.name}: expected input width {self.in_dim}, got {x.shape}")
        return nk.matmul(x, self.W) + self.b

    def named_parameters(self):
        return [(self.W.name, self.W), (self.b.name, self.b)]


@dataclass(frozen=True)
class LayerPartition:
    l: int
    h: int
    n: int

    def __post_init__(self):
        if not 1 <= self.l < self.h <= self.n:
            raise ConfigError(f"need 1 <= l < h <= n, got l={self.l} h={self.h} n={self.n}")


@dataclass
class HiddenStates:
    """Lower and higher states ``{s; e}`` of one model on one batch."""

    s: nk.Tensor
    e: nk.Tensor

    def cat(self):
        return nk.concat([self.s, self.e], axis=-1)

    @property
    def widths(self):
        return self.s.shape[-1], self.e.shape[-1]


def _csr_gather(ptr, idx, rows):
    starts, ends = ptr[rows], ptr[rows + 1]
    lens = ends - starts
    new_ptr = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum(lens, out=new_ptr[1:])
    offsets = np.arange(new_ptr[-1]) - np.repeat(new_ptr[:-1], lens)
    return new_ptr, idx[np.repeat(starts, lens) + offsets]


@dataclass
class FeatureBatch:
    """Sparse MovieLens features, token bags stored CSR-style.

    Tokens of row ``i`` are ``title_idx[title_ptr[i]:title_ptr[i + 1]]``.
    """

    user: np.ndarray
    movie: np.ndarray
    title_ptr: np.ndarray
    title_idx: np.ndarray
    genre_ptr: np.ndarray
    genre_idx: np.ndarray

    def __len__(self):
        return len(self.user)

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        title_ptr, title_idx = _csr_gather(self.title_ptr, self.title_idx, rows)
        genre_ptr, genre_idx = _csr_gather(self.genre_ptr, self.genre_idx, rows)
        return FeatureBatch(self.user[rows], self.movie[rows], title_ptr, title_idx,
                            genre_ptr, genre_idx)

    @staticmethod
    def segments(ptr):
        return np.repeat(np.arange(len(ptr) - 1), np.diff(ptr))


def take_rows(X, rows):
    if isinstance(X, FeatureBatch):
        return X.take(rows)
    return X[rows]


class FeatureEncoder:
    """Embedding front-end: user 100 + movie 100 + title 50 + genre 50 = 300."""

    def __init__(self, n_users, n_movies, n_tokens, n_genres, rng, dims=(100, 100, 50, 50),
                 scale=0.05):
        self.dims = tuple(dims)
        shapes = [(n_users, dims[0]), (n_movies, dims[1]), (n_tokens, dims[2]), (n_genres, dims[3])]
        names = ["emb.user", "emb.movie", "emb.title", "emb.genre"]
        self.tables = [nk.parameter(rng.normal(0.0, scale, size=s), name=n)
                       for s, n in zip(shapes, names)]

    @property
    def out_dim(self):
        return sum(self.dims)

    def __call__(self, batch: FeatureBatch):
        user, movie, title, genre = self.tables
        n = len(batch)
        return nk.concat([
            nk.embedding(user, batch.user),
            nk.embedding(movie, batch.movie),
            nk.embedding_bag(title, batch.title_idx, FeatureBatch.segments(batch.title_ptr), n),
            nk.embedding_bag(genre, batch.genre_idx, FeatureBatch.segments(batch.genre_ptr), n),
        ])

    def named_parameters(self):
        return [(t.name, t) for t in self.tables]


class PartitionedNet:
    """MLP ``in -> hidden[0] -> ... -> out`` with a declared layer partition.

    With the default partition and two hidden layers, the first relu block
    gives ``s``, the second gives ``e`` and the linear head gives ``y``.
    """

    def __init__(self, in_dim, hidden, out_dim=1, partition=None, rng=None, dropout=0.0,
                 front=None):
        rng = np.random.default_rng(0) if rng is None else rng
        widths = [in_dim, *hidden, out_dim]
        n = len(widths) - 1
        self.partition = partition or LayerPartition(1, 2, n)
        if self.partition.n != n:
            raise ConfigError(f"partition n={self.partition.n} but net has {n} layers")
        self.front = front
        if front is not None and front.out_dim != in_dim:
            raise ConfigError(f"front-end width {front.out_dim} != input width {in_dim}")
        self.layers = [Dense(widths[i], widths[i + 1], rng, name=f"layer{i + 1}") for i in range(n)]
        self.dropout = dropout
        self.frozen = False

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def s_width(self):
        return self.layers[self.partition.l - 1].out_dim

    @property
    def e_width(self):
        return self.layers[self.partition.h - 1].out_dim

    def named_parameters(self):
        out = self.front.named_parameters() if self.front is not None else []
        for layer in self.layers:
            out.extend(layer.named_parameters())
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def freeze(self, frozen=True):
        self.frozen = frozen
        nk.freeze(self.parameters(), frozen)

    def _apply(self, x, start, stop, training, rng):
        """Layers ``start..stop`` (1-based, inclusive)."""
        n = self.partition.n
        for i in range(start, stop + 1):
            x = self.layers[i - 1](x)
            if i < n:
                x = nk.relu(x)
                if training and self.dropout:
                    x = nk.dropout(x, self.dropout, rng, training=True)
        return x

    def embed(self, x):
        if isinstance(x, FeatureBatch):
            if self.front is None:
                raise DimensionError("net has no embedding front-end for sparse features")
            return self.front(x)
        x = x if isinstance(x, nk.Tensor) else nk.Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"expected input of width {self.in_dim}, got {x.shape}")
        return x

    def forward_with_taps(self, x, training=False, rng=None):
        """Return ``(y, HiddenStates(s, e))`` from one pass over ``x``."""
        p = self.partition
        h0 = self.embed(x)
        s = self._apply(h0, 1, p.l, training, rng)
        e = self._apply(s, p.l + 1, p.h, training, rng)
        y = self._apply(e, p.h + 1, p.n, training, rng)
        return y, HiddenStates(s, e)

    def __call__(self, x, training=False, rng=None):
        return self.forward_with_taps(x, training, rng)[0]

    def run_middle(self, s_in, training=False, rng=None):
        """Apply layers l+1..h to (possibly decoded) lower states."""
        if s_in.shape[-1] != self.s_width:
            raise DimensionError(f"run_middle: expected width {self.s_width}, got {s_in.shape}")
        return self._apply(s_in, self.partition.l + 1, self.partition.h, training, rng)

    def run_head(self, e_in, training=False, rng=None):
        if e_in.shape[-1] != self.e_width:
            raise DimensionError(f"run_head: expected width {self.e_width}, got {e_in.shape}")
        return self._apply(e_in, self.partition.h + 1, self.partition.n, training, rng)

    def predict(self, X, batch_size=4096):
        preds = []
        for start in range(0, len(X), batch_size):
            rows = np.arange(start, min(start + batch_size, len(X)))
            preds.append(self(take_rows(X, rows)).data)
        return np.concatenate(preds, axis=0)


def checksum(params):
    """Order-sensitive float64 checksum of parameter buffers."""
    return float(sum(np.float64(i + 1) * p.data.astype(np.float64).sum()
                     for i, p in enumerate(params)))
