"""scikit-learn style wrappers around the nets and the distillation engine."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .engine import Channels, Rngs, TrainConfig, build_channels, restore, train
from .errors import ConfigError, DimensionError
from .losses import LossWeights
from .nets import FeatureBatch, FeatureEncoder, PartitionedNet

EMBEDDING_DIMS = (100, 100, 50, 50)


def _validate(X, y=None):
    """Dense inputs go through sklearn's checks; FeatureBatch passes as-is."""
    if isinstance(X, FeatureBatch):
        if y is not None:
            y = np.asarray(y, dtype=np.float32).reshape(-1)
            if len(y) != len(X):
                raise DimensionError(f"{len(X)} examples but {len(y)} targets")
        return X, y
    if y is None:
        return check_array(X, dtype=np.float32), None
    X, y = check_X_y(X, y, dtype=np.float32, y_numeric=True)
    return X, y.astype(np.float32)


def _table_sizes(X, table_sizes):
    if table_sizes is not None:
        return tuple(table_sizes)
    return (int(X.user.max()) + 1, int(X.movie.max()) + 1,
            int(X.title_idx.max(initial=0)) + 1, int(X.genre_idx.max(initial=0)) + 1)


def build_net(X, hidden, rng, dropout=0.0, table_sizes=None, in_dim=None):
    """A partitioned MLP for dense arrays or, with an embedding front-end, for FeatureBatch."""
    if isinstance(X, FeatureBatch) or table_sizes is not None:
        sizes = _table_sizes(X, table_sizes)
        front = FeatureEncoder(*sizes, rng=rng, dims=EMBEDDING_DIMS)
        return PartitionedNet(front.out_dim, hidden, 1, rng=rng, dropout=dropout, front=front)
    return PartitionedNet(in_dim or X.shape[1], hidden, 1, rng=rng, dropout=dropout)


class PartitionedMLPRegressor(RegressorMixin, BaseEstimator):
    """MLP regressor trained on ground truth only; used for teachers and scratch students.

    ``select='best'`` keeps the parameters with the lowest eval RMSE seen
    during training instead of the final ones.
    """

    def __init__(self, hidden=(512, 256), dropout=0.0, lr=1e-3, train_steps=2000, batch_size=256,
                 eval_every=200, log_every=50, seed=0, table_sizes=None, select="final"):
        self.hidden = hidden
        self.dropout = dropout
        self.lr = lr
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.eval_every = eval_every
        self.log_every = log_every
        self.seed = seed
        self.table_sizes = table_sizes
        self.select = select

    def fit(self, X, y, eval_set=None, on_row=None, wall_clock=True):
        X, y = _validate(X, y)
        Xe, ye = (X, y) if eval_set is None else _validate(*eval_set)
        rngs = Rngs(self.seed)
        self.net_ = build_net(X, tuple(self.hidden), rngs.init_student, self.dropout, self.table_sizes)
        cfg = TrainConfig(method="scratch", train_steps=self.train_steps, batch_size=self.batch_size,
                          lr=self.lr, seed=self.seed, eval_every=self.eval_every,
                          log_every=self.log_every)
        result = train(None, self.net_, Channels(), (X, y, Xe, ye), cfg, rngs, on_row=on_row,
                       wall_clock=wall_clock)
        _finish(self, result)
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X, _ = _validate(X)
        return self.net_.predict(X).reshape(-1)


def _finish(est, result):
    if est.select not in ("final", "best"):
        raise ConfigError(f"select must be 'final' or 'best', got {est.select!r}")
    if est.select == "best":
        named = [(f"student.{n}", p) for n, p in result.student.named_parameters()]
        named += result.channels.named_parameters()
        restore(named, result.best_state)
    est.history_ = result.history
    est.result_ = result
    est.eval_metric_ = result.best_metric if est.select == "best" else result.final_metric


class TalkingDistiller(RegressorMixin, BaseEstimator):
    """Distil a frozen teacher into a small student for a downstream task.

    ``method`` picks TD or one of the baselines (scratch, LD, FD, FitNet,
    Hybrid). ``teacher`` is a :class:`PartitionedNet` or a fitted
    :class:`PartitionedMLPRegressor`; it is never updated. Only the student
    is used by ``predict``.
    """

    def __init__(self, teacher=None, method="TD", k=1, interaction=True, w1=1.0, w2=1.0, w3=1.0,
                 lambda_logit=1.0, lambda_feature=1.0, lambda_fitnet=1.0,
                 lambda_hybrid_logit=1.0, lambda_hybrid_feature=1.0, noise_sigma=0.0,
                 ramp_student_steps=0, ramp_channel_steps=0, student_hidden=(128, 64),
                 student_dropout=0.0, msg_dim=128, channel_hidden=256, channel_dropout=0.1,
                 lr=1e-3, train_steps=2000, batch_size=256, eval_every=200, log_every=50, seed=0,
                 table_sizes=None, select="final"):
        self.teacher = teacher
        self.method = method
        self.k = k
        self.interaction = interaction
        self.w1 = w1
        self.w2 = w2
        self.w3 = w3
        self.lambda_logit = lambda_logit
        self.lambda_feature = lambda_feature
        self.lambda_fitnet = lambda_fitnet
        self.lambda_hybrid_logit = lambda_hybrid_logit
        self.lambda_hybrid_feature = lambda_hybrid_feature
        self.noise_sigma = noise_sigma
        self.ramp_student_steps = ramp_student_steps
        self.ramp_channel_steps = ramp_channel_steps
        self.student_hidden = student_hidden
        self.student_dropout = student_dropout
        self.msg_dim = msg_dim
        self.channel_hidden = channel_hidden
        self.channel_dropout = channel_dropout
        self.lr = lr
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.eval_every = eval_every
        self.log_every = log_every
        self.seed = seed
        self.table_sizes = table_sizes
        self.select = select

    def _teacher_net(self):
        t = self.teacher
        if isinstance(t, PartitionedMLPRegressor):
            check_is_fitted(t, "net_")
            return t.net_
        if t is None and self.method == "scratch":
            return None
        if not isinstance(t, PartitionedNet):
            raise ConfigError("teacher must be a PartitionedNet or a fitted PartitionedMLPRegressor")
        return t

    def train_config(self):
        weights = LossWeights(self.w1, self.w2, self.w3, self.lambda_logit, self.lambda_feature,
                              self.lambda_fitnet, self.lambda_hybrid_logit,
                              self.lambda_hybrid_feature)
        return TrainConfig(method=self.method, k=self.k, interaction=self.interaction,
                           weights=weights, noise_sigma=self.noise_sigma,
                           ramp_student_steps=self.ramp_student_steps,
                           ramp_channel_steps=self.ramp_channel_steps,
                           train_steps=self.train_steps, batch_size=self.batch_size, lr=self.lr,
                           seed=self.seed, eval_every=self.eval_every, log_every=self.log_every)

    def build(self, X):
        """Create the student and the method's channels without training."""
        teacher = self._teacher_net()
        rngs = Rngs(self.seed)
        in_dim = teacher.in_dim if teacher is not None else None
        sizes = self.table_sizes
        if sizes is None and teacher is not None and teacher.front is not None:
            sizes = tuple(t.shape[0] for t in teacher.front.tables)
        student = build_net(X, tuple(self.student_hidden), rngs.init_student, self.student_dropout,
                            sizes, in_dim)
        channels = build_channels(self.method, teacher, student, rngs.init_comm, self.msg_dim,
                                  self.channel_hidden, self.channel_dropout)
        return teacher, student, channels, rngs

    def fit(self, X, y, eval_set=None, on_row=None, wall_clock=True):
        X, y = _validate(X, y)
        Xe, ye = (X, y) if eval_set is None else _validate(*eval_set)
        cfg = self.train_config()
        teacher, student, channels, rngs = self.build(X)
        self.student_, self.channels_ = student, channels
        result = train(teacher, student, channels, (X, y, Xe, ye), cfg, rngs, on_row=on_row,
                       wall_clock=wall_clock)
        _finish(self, result)
        return self

    def predict(self, X):
        check_is_fitted(self, "student_")
        X, _ = _validate(X)
        return self.student_.predict(X).reshape(-1)
