"""MovieLens-100K ingestion, task construction, and a synthetic shift generator."""
from __future__ import annotations

import logging
import math
import re
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError, DataError
from .nets import FeatureBatch

log = logging.getLogger(__name__)

GENRES = ("unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
          "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
          "Romance", "Sci-Fi", "Thriller", "War", "Western")
UNKNOWN_GENRE = 0
TRAIN_FRACTION = 0.9
MIN_EVAL_EXAMPLES = 500
MAX_DOWNSTREAM = 8

_YEAR = re.compile(r"\(\s*\d{4}\s*\)")
_NON_ALNUM = re.compile(r"[^0-9a-z]+")


@dataclass(frozen=True)
class RatingExample:
    user_id: int
    movie_id: int
    rating: float
    timestamp: int
    title_tokens: tuple
    genre_ids: tuple


def tokenize_title(title):
    """Lowercase, drop ``(1995)``-style year parentheticals, split on non-alphanumerics."""
    return tuple(t for t in _NON_ALNUM.split(_YEAR.sub(" ", title.lower())) if t)


def _read_lines(path):
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        warnings.warn(f"{path} is not valid UTF-8; undecodable bytes replaced", stacklevel=3)
        text = raw.decode("utf-8", errors="replace")
    return text.splitlines()


def _parse_items(path):
    items = {}
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        parts = line.split("|")
        if len(parts) != 5 + len(GENRES):
            raise DataError(f"{path}:{lineno}: expected {5 + len(GENRES)} fields, got {len(parts)}")
        try:
            movie_id = int(parts[0])
            flags = [int(f) for f in parts[5:]]
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed item record") from None
        genres = tuple(i for i, f in enumerate(flags) if f)
        items[movie_id] = (tokenize_title(parts[1]), genres or (UNKNOWN_GENRE,))
    return items


def ingest_movielens(path):
    """Parse ``u.data`` + ``u.item`` under ``path`` into :class:`RatingExample` rows."""
    path = Path(path)
    for name in ("u.data", "u.item"):
        if not (path / name).is_file():
            raise DataError(f"missing MovieLens file {path / name}")
    items = _parse_items(path / "u.item")
    out = []
    for lineno, line in enumerate(_read_lines(path / "u.data"), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path / 'u.data'}:{lineno}: expected 4 tab-separated fields")
        try:
            user, movie, rating, ts = int(parts[0]), int(parts[1]), float(parts[2]), int(parts[3])
        except ValueError:
            raise DataError(f"{path / 'u.data'}:{lineno}: malformed rating record") from None
        if not 1.0 <= rating <= 5.0:
            raise DataError(f"{path / 'u.data'}:{lineno}: rating {rating} outside [1, 5]")
        if movie not in items:
            raise DataError(f"{path / 'u.data'}:{lineno}: unknown movie id {movie}")
        tokens, genres = items[movie]
        out.append(RatingExample(user, movie, rating, ts, tokens, genres))
    return out


@dataclass
class TaskSpec:
    """A train/eval pair. ``X_*`` are example lists (MovieLens) or arrays (synthetic)."""

    kind: str
    name: str
    X_train: object
    y_train: np.ndarray
    X_eval: object
    y_eval: np.ndarray
    meta: dict = field(default_factory=dict)


def temporal_split(examples, train_fraction=TRAIN_FRACTION):
    """Earliest ``train_fraction`` by timestamp for training; ties at the boundary go to train."""
    if not examples:
        raise DataError("no examples to split")
    ts = np.array([e.timestamp for e in examples], dtype=np.int64)
    order = np.argsort(ts, kind="stable")
    cut = max(1, math.ceil(train_fraction * len(ts))) - 1
    boundary = ts[order[cut]]
    train = [examples[i] for i in order if ts[i] <= boundary]
    evals = [examples[i] for i in order if ts[i] > boundary]
    return train, evals, int(boundary)


def _ratings(examples):
    return np.array([e.rating for e in examples], dtype=np.float32)


def make_tasks(examples, min_eval=MIN_EVAL_EXAMPLES, max_tasks=MAX_DOWNSTREAM):
    """Pretrain task over all genres plus per-genre downstream tasks.

    Downstream genres need more than ``min_eval`` eval examples and are
    ranked dense to sparse by eval count; ``meta['rank']`` is 1 for the
    densest. The split boundary is computed once on the full corpus.
    """
    train, evals, boundary = temporal_split(examples)
    pretrain = TaskSpec("pretrain", "all-genres", train, _ratings(train), evals, _ratings(evals),
                        {"boundary": boundary})
    counts = np.zeros(len(GENRES), dtype=np.int64)
    for e in evals:
        for g in e.genre_ids:
            counts[g] += 1
    candidates = [g for g in range(len(GENRES)) if g != UNKNOWN_GENRE and counts[g] > min_eval]
    candidates.sort(key=lambda g: (-counts[g], g))
    candidates = candidates[:max_tasks]
    if not candidates:
        raise DataError(f"no genre has more than {min_eval} eval examples")
    tasks = []
    for rank, g in enumerate(candidates, 1):
        tr = [e for e in train if g in e.genre_ids]
        ev = [e for e in evals if g in e.genre_ids]
        group = "dense" if rank <= math.ceil(len(candidates) / 2) else "sparse"
        tasks.append(TaskSpec("downstream-genre", GENRES[g], tr, _ratings(tr), ev, _ratings(ev),
                              {"genre_id": g, "rank": rank, "group": group,
                               "n_train": len(tr), "n_eval": len(ev), "boundary": boundary}))
    return pretrain, tasks


class MovieLensFeaturizer(BaseEstimator, TransformerMixin):
    """Maps :class:`RatingExample` lists to index-encoded :class:`FeatureBatch` objects.

    Vocabularies come from the examples passed to ``fit`` (the training
    split). Index 0 of the user/movie tables is reserved for ids unseen at
    fit time; unseen title tokens are dropped.
    """

    def fit(self, X, y=None):
        users = sorted({e.user_id for e in X})
        movies = sorted({e.movie_id for e in X})
        tokens = sorted({t for e in X for t in e.title_tokens})
        self.user_index_ = {u: i + 1 for i, u in enumerate(users)}
        self.movie_index_ = {m: i + 1 for i, m in enumerate(movies)}
        self.token_index_ = {t: i for i, t in enumerate(tokens)}
        return self

    @property
    def table_sizes(self):
        check_is_fitted(self, "user_index_")
        return (len(self.user_index_) + 1, len(self.movie_index_) + 1,
                max(len(self.token_index_), 1), len(GENRES))

    def transform(self, X):
        check_is_fitted(self, "user_index_")
        user = np.array([self.user_index_.get(e.user_id, 0) for e in X], dtype=np.int64)
        movie = np.array([self.movie_index_.get(e.movie_id, 0) for e in X], dtype=np.int64)
        title = [[self.token_index_[t] for t in e.title_tokens if t in self.token_index_] for e in X]
        genre = [list(e.genre_ids) for e in X]
        return FeatureBatch(user, movie, *_csr(title), *_csr(genre))


def _csr(lists):
    ptr = np.zeros(len(lists) + 1, dtype=np.int64)
    np.cumsum([len(x) for x in lists], out=ptr[1:])
    idx = np.fromiter((i for x in lists for i in x), dtype=np.int64, count=int(ptr[-1]))
    return ptr, idx


def write_split(examples, path):
    """Tab-separated dump with a header row, one example per line."""
    lines = ["user_id\tmovie_id\trating\ttimestamp\ttitle_tokens\tgenres"]
    for e in examples:
        lines.append(f"{e.user_id}\t{e.movie_id}\t{e.rating:g}\t{e.timestamp}\t"
                     f"{' '.join(e.title_tokens)}\t{','.join(GENRES[g] for g in e.genre_ids)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- synthetic distribution shift ------------------------------------------------

@dataclass
class SyntheticSpec:
    """Regression mixture ``y = f_c(x) + noise`` over latent subpopulations ``c``.

    Every subpopulation shares a smooth nonlinear component and adds its own
    linear deviation; inputs of subpopulation ``c`` are centred on their own
    random mean. With ``kind='linear'`` each ``f_c`` is purely linear.
    """

    input_dim: int = 16
    n_subpops: int = 4
    mixture: tuple = (0.4, 0.3, 0.25, 0.05)
    downstream: int = 3
    noise_std: float = 0.3
    n_pretrain: int = 20000
    n_pretrain_eval: int = 2000
    n_downstream_train: int = 200
    n_downstream_eval: int = 2000
    shared_hidden: int = 32
    shift_scale: float = 1.0
    center_scale: float = 1.0
    kind: str = "mlp"
    seed: int = 0

    def __post_init__(self):
        self.mixture = tuple(float(m) for m in self.mixture)
        if self.input_dim <= 0 or self.n_subpops <= 0:
            raise ConfigError("input_dim and n_subpops must be positive")
        if len(self.mixture) != self.n_subpops:
            raise ConfigError(f"mixture has {len(self.mixture)} weights for {self.n_subpops} subpopulations")
        if any(m < 0 for m in self.mixture) or not math.isclose(sum(self.mixture), 1.0, abs_tol=1e-9):
            raise ConfigError("mixture weights must be non-negative and sum to 1")
        if not 0 <= self.downstream < self.n_subpops:
            raise ConfigError(f"downstream index {self.downstream} out of range")
        for name in ("n_pretrain", "n_pretrain_eval", "n_downstream_train", "n_downstream_eval"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.kind not in ("mlp", "linear"):
            raise ConfigError(f"unknown synthetic kind {self.kind!r}")

    def to_dict(self):
        d = asdict(self)
        d["mixture"] = list(self.mixture)
        return d


class SyntheticWorld:
    """The fixed random functions behind a :class:`SyntheticSpec`."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
        d, c = spec.input_dim, spec.n_subpops
        self.centers = rng.normal(0.0, spec.center_scale, size=(c, d))
        self.W1 = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, spec.shared_hidden))
        self.b1 = rng.normal(0.0, 0.5, size=spec.shared_hidden)
        self.w2 = rng.normal(0.0, 1.0 / math.sqrt(spec.shared_hidden), size=spec.shared_hidden) * 2.0
        self.shift_w = rng.normal(0.0, spec.shift_scale / math.sqrt(d), size=(c, d))
        self.shift_b = rng.normal(0.0, spec.shift_scale, size=c)

    def f(self, x, c):
        lin = np.einsum("nd,nd->n", x, self.shift_w[c]) + self.shift_b[c]
        if self.spec.kind == "linear":
            return lin
        return np.tanh(x @ self.W1 + self.b1) @ self.w2 + lin

    def sample(self, n, rng, subpop=None):
        s = self.spec
        if subpop is None:
            c = rng.choice(s.n_subpops, size=n, p=np.asarray(s.mixture))
        else:
            c = np.full(n, subpop, dtype=np.int64)
        x = self.centers[c] + rng.normal(size=(n, s.input_dim))
        y = self.f(x, c) + s.noise_std * rng.normal(size=n)
        return x.astype(np.float32), y.astype(np.float32), c


def gen_synthetic(spec: SyntheticSpec):
    """Pretrain task over the full mixture and a small single-subpopulation downstream task."""
    world = SyntheticWorld(spec)
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence([spec.seed, 1]).spawn(4)]
    Xp, yp, cp = world.sample(spec.n_pretrain, streams[0])
    Xpe, ype, cpe = world.sample(spec.n_pretrain_eval, streams[1])
    Xd, yd, _ = world.sample(spec.n_downstream_train, streams[2], subpop=spec.downstream)
    Xde, yde, _ = world.sample(spec.n_downstream_eval, streams[3], subpop=spec.downstream)
    pretrain = TaskSpec("pretrain", "synthetic-mixture", Xp, yp, Xpe, ype,
                        {"subpop_train": cp, "subpop_eval": cpe})
    downstream = TaskSpec("synthetic", f"synthetic-subpop{spec.downstream}", Xd, yd, Xde, yde,
                          {"subpop": spec.downstream})
    return pretrain, downstream
